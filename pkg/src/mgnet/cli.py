"""Command-line entry point: data prep, training, evaluation, experiment runs.

Configuration precedence is CLI flags > config-file values > built-in
defaults. The config file is TOML with [data], [model], [train], and [run]
sections; every key has a matching flag. Relative dataset paths that do not
resolve from the working directory are retried under $MGNET_DATA_DIR.
"""
from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - Python < 3.11
    import tomli as tomllib

import numpy as np

from .data import (
    SplitSpec,
    generate_synthetic,
    load_tracks,
    split_manifest,
    write_tracks_jsonl,
)
from .evaluation import (
    ExperimentRow,
    ExperimentTable,
    ModelPredictor,
    evaluate_checkpoints,
    plot_trajectories,
    prepare_splits,
    run_ablation,
    run_exploration,
    write_predictions_jsonl,
)
from .network import ModelConfig
from .training import TrainConfig, load_checkpoint, train_model

DATA_DIR_ENV = "MGNET_DATA_DIR"

DEFAULTS = {
    "data": {
        "path": None,
        "format": "jsonl",
        "tau": 15,
        "rho": 45,
        "stride": 1,
        "image_width": 1920,
        "image_height": 1080,
        "split_seed": 0,
        "train_ratio": 0.5,
        "test_ratio": 0.4,
        "val_ratio": 0.1,
    },
    "model": {
        "goals": 9,
        "attention": True,
        "evaluator": True,
        "hidden": 256,
        "latent": 32,
        "embed": 32,
        "heads": 8,
        "layers": 1,
        "box_embed": 64,
        "dropout": 0.1,
    },
    "train": {
        "lr": 0.001,
        "batch": 128,
        "epochs": 100,
        "plateau_factor": 0.5,
        "plateau_patience": 5,
        "clip": 1.0,
        "seed": 0,
    },
    "run": {"out": None, "seeds": [0], "limit": 8},
}


@dataclass(frozen=True)
class RunConfig:
    """Everything a command run depends on; written next to its outputs."""

    data: dict
    model: dict
    train: dict
    run: dict

    def model_config(self, goal_stages: int | None = None) -> ModelConfig:
        m, d = self.model, self.data
        if goal_stages is None:
            goal_stages = m["goals"] if m["evaluator"] else 1
        return ModelConfig(
            tau=d["tau"],
            rho=d["rho"],
            goal_stages=goal_stages,
            hidden_dim=m["hidden"],
            latent_dim=m["latent"],
            embed_dim=m["embed"],
            attention_heads=m["heads"],
            attention_layers=m["layers"],
            box_embed_dim=m["box_embed"],
            use_attention=m["attention"],
            dropout=m["dropout"],
        )

    def train_config(self, seed: int | None = None) -> TrainConfig:
        t = self.train
        return TrainConfig(
            lr=t["lr"],
            batch_size=t["batch"],
            epochs=t["epochs"],
            plateau_factor=t["plateau_factor"],
            plateau_patience=t["plateau_patience"],
            grad_clip=t["clip"],
            seed=t["seed"] if seed is None else seed,
        )

    def split_spec(self) -> SplitSpec:
        d = self.data
        return SplitSpec(
            train_ratio=d["train_ratio"],
            test_ratio=d["test_ratio"],
            val_ratio=d["val_ratio"],
            seed=d["split_seed"],
        )

    def validate(self, *, model: bool = False, train: bool = False) -> None:
        """Fail fast, before any data or model work.

        Only the sections a command consumes are checked; eval and plot take
        their model geometry from the checkpoint, not from [model].
        """
        if model:
            self.model_config()
        if train:
            self.train_config()
        self.split_spec()
        if not self.run["seeds"]:
            raise ValueError("need at least one seed")


def resolve_data_path(path: str) -> Path:
    """Try the path as given, then under $MGNET_DATA_DIR."""
    p = Path(path)
    if p.exists():
        return p
    root = os.environ.get(DATA_DIR_ENV)
    if root and not p.is_absolute():
        candidate = Path(root) / p
        if candidate.exists():
            return candidate
        raise FileNotFoundError(f"dataset not found at {p} or {candidate}")
    raise FileNotFoundError(f"dataset not found at {p}")


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as fh:
        loaded = tomllib.load(fh)
    for section, values in loaded.items():
        if section not in DEFAULTS:
            raise ValueError(f"unknown config section [{section}]")
        for key in values:
            if key not in DEFAULTS[section]:
                raise ValueError(f"unknown config key {key!r} in section [{section}]")
    return loaded


def build_run_config(
    args: argparse.Namespace, *, model: bool = False, train: bool = False
) -> RunConfig:
    """Merge defaults <- config file <- explicitly passed CLI flags."""
    merged = copy.deepcopy(DEFAULTS)
    for section, values in _load_config_file(getattr(args, "config", None)).items():
        merged[section].update(values)
    for section, keys in _FLAG_MAP.items():
        for key, attr in keys.items():
            value = getattr(args, attr, None)
            if value is not None:
                merged[section][key] = value
    config = RunConfig(**merged)
    config.validate(model=model, train=train)
    return config


def write_run_config(
    config: RunConfig, out_dir: Path, command: str, extra: dict | None = None
) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, **asdict(config), **(extra or {})}
    with open(out_dir / "run_config.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require(config: RunConfig, *, data: bool = False, out: bool = False) -> None:
    if data and config.data["path"] is None:
        raise ValueError("no dataset given; pass --data or set data.path in the config file")
    if out and config.run["out"] is None:
        raise ValueError("no output directory given; pass --out or set run.out in the config file")


def _splits(config: RunConfig):
    tracks = load_tracks(resolve_data_path(config.data["path"]), format=config.data["format"])
    d = config.data
    return prepare_splits(
        tracks,
        d["tau"],
        d["rho"],
        stride=d["stride"],
        image_size=(d["image_width"], d["image_height"]),
        spec=config.split_spec(),
    )


def _dataset_name(config: RunConfig) -> str:
    return Path(config.data["path"]).stem


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args: argparse.Namespace) -> int:
    config = build_run_config(args)
    _require(config, out=True)
    source = resolve_data_path(args.source)
    tracks = load_tracks(source, format=config.data["format"])
    out_dir = Path(config.run["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    write_tracks_jsonl(tracks, out_dir / "tracks.jsonl")
    manifest = split_manifest(tracks, config.split_spec())
    with open(out_dir / "splits.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_run_config(config, out_dir, "ingest", extra={"source": str(source)})
    print(f"ingested {len(tracks)} tracks from {source} -> {out_dir / 'tracks.jsonl'}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    config = build_run_config(args)
    _require(config, out=True)
    tracks = generate_synthetic(
        args.tracks,
        args.length,
        motion=args.motion,
        noise_sigma=args.noise,
        seed=args.seed if args.seed is not None else 0,
        image_size=(config.data["image_width"], config.data["image_height"]),
        fps=args.fps,
    )
    out_dir = Path(config.run["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    write_tracks_jsonl(tracks, out_dir / "tracks.jsonl")
    corpus = {
        "tracks": args.tracks,
        "length": args.length,
        "motion": args.motion,
        "noise": args.noise,
        "seed": args.seed if args.seed is not None else 0,
        "fps": args.fps,
    }
    write_run_config(config, out_dir, "synth", extra={"corpus": corpus})
    print(f"wrote {len(tracks)} synthetic tracks -> {out_dir / 'tracks.jsonl'}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = build_run_config(args, model=True, train=True)
    _require(config, data=True, out=True)
    splits = _splits(config)
    out_dir = Path(config.run["out"])
    write_run_config(config, out_dir, "train")
    _, result = train_model(
        config.model_config(), config.train_config(), splits.train, splits.val, out_dir=out_dir
    )
    print(
        f"best epoch {result.best_epoch} val loss {result.best_val_loss:.6f} "
        f"-> {result.checkpoint_path}"
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = build_run_config(args, train=True)
    _require(config, data=True, out=True)
    splits = _splits(config)
    if not splits.test:
        raise ValueError("test split is empty; nothing to evaluate")
    report = evaluate_checkpoints(args.checkpoint, splits.test)
    loaded = [load_checkpoint(p) for p in args.checkpoint]
    out_dir = Path(config.run["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = tuple(c.train_config.seed for c in loaded if c.train_config is not None)
    table = ExperimentTable(
        rows=[
            ExperimentRow(
                dataset=_dataset_name(config),
                variant=loaded[0].model_config.variant,
                k=loaded[0].model_config.goal_stages,
                report=report,
                seeds=seeds or (config.train["seed"],),
            )
        ]
    )
    table.write_csv(out_dir / "metrics.csv")
    write_run_config(
        config, out_dir, "eval", extra={"checkpoints": [str(p) for p in args.checkpoint]}
    )
    horizons = " ".join(f"mse[{sec}s]={v:.3f}" for sec, v in report.mse_by_horizon.items())
    print(f"{horizons} c_mse={report.c_mse:.3f} cf_mse={report.cf_mse:.3f} -> {out_dir / 'metrics.csv'}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    config = build_run_config(args, model=True, train=True)
    _require(config, data=True, out=True)
    splits = _splits(config)
    out_dir = Path(config.run["out"])
    write_run_config(config, out_dir, "ablate")
    table = run_ablation(
        splits,
        config.model_config(),
        config.train_config(),
        seeds=tuple(config.run["seeds"]),
        out_dir=out_dir,
        dataset=_dataset_name(config),
    )
    print(f"wrote {len(table.rows)} variant rows -> {out_dir / 'ablation.csv'}")
    return 0


def cmd_explore(args: argparse.Namespace) -> int:
    config = build_run_config(args, train=True)
    _require(config, data=True, out=True)
    k_list = tuple(args.goal_list) if args.goal_list else (1, 3, 9, 15, 45)
    # the sweep replaces the stage count row by row; validate the rest with k=1
    base = config.model_config(goal_stages=1)
    splits = _splits(config)
    out_dir = Path(config.run["out"])
    write_run_config(config, out_dir, "explore", extra={"k_list": list(k_list)})
    table = run_exploration(
        splits,
        base,
        config.train_config(),
        k_list=k_list,
        seeds=tuple(config.run["seeds"]),
        out_dir=out_dir,
        dataset=_dataset_name(config),
    )
    print(f"wrote {len(table.rows)} stage-count rows -> {out_dir / 'exploration.csv'}")
    return 0


def cmd_plot(args: argparse.Namespace) -> int:
    config = build_run_config(args)
    _require(config, data=True, out=True)
    splits = _splits(config)
    windows = splits.test[: config.run["limit"]]
    loaded = load_checkpoint(args.checkpoint[0])
    predictions = ModelPredictor(loaded.model)(windows) if windows else np.zeros((0, 0, 4))
    out_dir = Path(config.run["out"])
    written = plot_trajectories(windows, predictions, out_dir)
    write_predictions_jsonl(windows, predictions, out_dir / "predictions.jsonl")
    write_run_config(config, out_dir, "plot", extra={"checkpoints": [str(args.checkpoint[0])]})
    print(f"wrote {len(written)} plots -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing

# (section, key) -> argparse dest; every config key stays reachable from the CLI
_FLAG_MAP = {
    "data": {
        "path": "data",
        "format": "format",
        "tau": "tau",
        "rho": "rho",
        "stride": "stride",
        "image_width": "image_width",
        "image_height": "image_height",
        "split_seed": "split_seed",
        "train_ratio": "train_ratio",
        "test_ratio": "test_ratio",
        "val_ratio": "val_ratio",
    },
    "model": {
        "goals": "goals",
        "attention": "attention",
        "evaluator": "evaluator",
        "hidden": "hidden",
        "latent": "latent",
        "embed": "embed",
        "heads": "heads",
        "layers": "layers",
        "box_embed": "box_embed",
        "dropout": "dropout",
    },
    "train": {
        "lr": "lr",
        "batch": "batch",
        "epochs": "epochs",
        "plateau_factor": "plateau_factor",
        "plateau_patience": "plateau_patience",
        "clip": "clip",
        "seed": "train_seed",
    },
    "run": {"out": "out", "seeds": "seeds", "limit": "limit"},
}


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML config file; flags given here override it")
    parser.add_argument("--data", help=f"dataset path (relative paths retried under ${DATA_DIR_ENV})")
    parser.add_argument("--format", choices=("jsonl", "jaad-xml", "pie"), help="annotation format")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--tau", type=int, help="observed steps")
    parser.add_argument("--rho", type=int, help="predicted steps")
    parser.add_argument("--stride", type=int, help="window stride")
    parser.add_argument("--image-width", type=int, dest="image_width")
    parser.add_argument("--image-height", type=int, dest="image_height")
    parser.add_argument("--split-seed", type=int, dest="split_seed")
    parser.add_argument("--train-ratio", type=float, dest="train_ratio")
    parser.add_argument("--test-ratio", type=float, dest="test_ratio")
    parser.add_argument("--val-ratio", type=float, dest="val_ratio")


def _add_model(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--goals", type=int, help="fine goal stages k")
    parser.add_argument(
        "--attention", action=argparse.BooleanOptionalAction, default=None,
        help="temporal attention encoder on/off",
    )
    parser.add_argument(
        "--evaluator", action=argparse.BooleanOptionalAction, default=None,
        help="multi-stage goal evaluator on/off (off = single long-term goal)",
    )
    parser.add_argument("--hidden", type=int, help="recurrent feature width")
    parser.add_argument("--latent", type=int, help="latent dimension")
    parser.add_argument("--embed", type=int, help="attention embedding width")
    parser.add_argument("--heads", type=int, help="attention heads")
    parser.add_argument("--layers", type=int, help="attention layers")
    parser.add_argument("--box-embed", type=int, dest="box_embed", help="decoder box embedding width")
    parser.add_argument("--dropout", type=float)


def _add_train(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--lr", type=float, help="Adam learning rate")
    parser.add_argument("--batch", type=int, help="batch size")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--plateau-factor", type=float, dest="plateau_factor")
    parser.add_argument("--plateau-patience", type=int, dest="plateau_patience")
    parser.add_argument("--clip", type=float, help="gradient norm clip")
    parser.add_argument("--seed", type=int, dest="train_seed", help="training seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mgnet",
        description="Goal-conditioned pedestrian bounding-box trajectory prediction.",
        epilog="Precedence: CLI flags override config-file values override built-in defaults.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="convert annotations to canonical JSONL plus a split manifest")
    p.add_argument("--source", required=True, help="annotation file or directory")
    _add_common(p)
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic verification corpus")
    p.add_argument("--tracks", type=int, default=100)
    p.add_argument("--length", type=int, default=90)
    p.add_argument("--motion", choices=("constant-velocity", "turn", "stop-go"), default="turn")
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=None, help="corpus seed")
    p.add_argument("--fps", type=float, default=30.0)
    _add_common(p)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("train", help="train a model, writing checkpoint.pt and log.csv")
    _add_common(p)
    _add_model(p)
    _add_train(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="score checkpoints on the test split; several are averaged")
    p.add_argument("--checkpoint", nargs="+", required=True, help="one checkpoint per training run")
    _add_common(p)
    _add_train(p)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("ablate", help="train and score the four attention/evaluator variants")
    p.add_argument("--seeds", type=_int_list, help="comma-separated training seeds shared by variants")
    _add_common(p)
    _add_model(p)
    _add_train(p)
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("explore", help="sweep the fine goal stage count k")
    p.add_argument("--goal-list", dest="goal_list", type=_int_list, help="comma-separated k values")
    p.add_argument("--seeds", type=_int_list, help="comma-separated training seeds shared by rows")
    _add_common(p)
    _add_model(p)
    _add_train(p)
    p.set_defaults(handler=cmd_explore)

    p = sub.add_parser("plot", help="render prediction plots for test windows")
    p.add_argument("--checkpoint", nargs=1, required=True)
    p.add_argument("--limit", type=int, help="number of windows to plot")
    _add_common(p)
    p.set_defaults(handler=cmd_plot)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (ValueError, OSError, RuntimeError) as exc:
        message = str(exc).splitlines()[0] if str(exc) else exc.__class__.__name__
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
