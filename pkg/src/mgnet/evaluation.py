"""Pixel-space metrics, reference baselines, experiment harnesses, and plots."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import (
    SplitSpec,
    Track,
    TrajectoryWindow,
    boxes_to_corners,
    normalize_window,
    split_dataset,
    window_tracks,
)
from .network import MGNet, ModelConfig
from .training import TrainConfig, train_model, windows_to_tensors

HORIZONS_SEC = (0.5, 1.0, 1.5)

# a predictor maps windows to (n, rho, 4) pixel-space (cx, cy, w, h) boxes
Predictor = Callable[[list[TrajectoryWindow]], np.ndarray]


# ---------------------------------------------------------------------------
# metrics


def _paired(pred: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 3 or pred.shape[-1] != 4:
        raise ValueError(
            f"need matching (n, steps, 4) arrays, got {pred.shape} and {truth.shape}"
        )
    return pred, truth


def mse_bbox(pred: np.ndarray, truth: np.ndarray, horizon_steps: int) -> float:
    """Mean squared corner-coordinate error over the first horizon_steps."""
    pred, truth = _paired(pred, truth)
    if not 1 <= horizon_steps <= pred.shape[1]:
        raise ValueError(f"horizon {horizon_steps} outside [1, {pred.shape[1]}] steps")
    diff = boxes_to_corners(pred[:, :horizon_steps]) - boxes_to_corners(truth[:, :horizon_steps])
    return float(np.mean(np.square(diff)))


def c_mse(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean squared centroid-coordinate error over all steps."""
    pred, truth = _paired(pred, truth)
    return float(np.mean(np.square(pred[..., :2] - truth[..., :2])))


def cf_mse(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean squared centroid-coordinate error at the final step."""
    pred, truth = _paired(pred, truth)
    return float(np.mean(np.square(pred[:, -1, :2] - truth[:, -1, :2])))


@dataclass(frozen=True)
class MetricReport:
    """The three pixel-space metrics; MSE per horizon in seconds."""

    mse_by_horizon: dict[float, float]
    c_mse: float
    cf_mse: float
    sample_count: int

    def __post_init__(self):
        values = list(self.mse_by_horizon.values()) + [self.c_mse, self.cf_mse]
        if any(v < 0 for v in values):
            raise ValueError("squared-error metrics cannot be negative")
        if self.sample_count < 1:
            raise ValueError("a metric report needs at least one sample")


def available_horizons(rho: int, fps: float, horizons_sec: Sequence[float] = HORIZONS_SEC) -> dict[float, int]:
    """Map horizon seconds to step counts, keeping those the rollout covers."""
    out = {}
    for sec in horizons_sec:
        steps = round(sec * fps)
        if 1 <= steps <= rho:
            out[sec] = steps
    return out


def evaluate(
    predictor: Predictor,
    windows: list[TrajectoryWindow],
    horizons_sec: Sequence[float] = HORIZONS_SEC,
) -> MetricReport:
    """Score a predictor on windows; deterministic for deterministic predictors."""
    if not windows:
        raise ValueError("evaluation needs at least one window")
    rho, fps = windows[0].rho, windows[0].fps
    horizons = available_horizons(rho, fps, horizons_sec)
    if not horizons:
        raise ValueError(f"no configured horizon fits rho={rho} at {fps} fps")
    pred = np.asarray(predictor(windows), dtype=np.float64)
    truth = np.stack([w.future_pixels() for w in windows])
    if pred.shape != truth.shape:
        raise ValueError(f"predictor returned {pred.shape}, expected {truth.shape}")
    return MetricReport(
        mse_by_horizon={sec: mse_bbox(pred, truth, steps) for sec, steps in horizons.items()},
        c_mse=c_mse(pred, truth),
        cf_mse=cf_mse(pred, truth),
        sample_count=len(windows),
    )


def evaluate_checkpoints(
    paths: Sequence[Path | str],
    windows: list[TrajectoryWindow],
    horizons_sec: Sequence[float] = HORIZONS_SEC,
) -> MetricReport:
    """Score one or more saved runs on the same windows and average the reports."""
    from .training import load_checkpoint

    if not paths:
        raise ValueError("need at least one checkpoint")
    reports = [
        evaluate(ModelPredictor(load_checkpoint(p).model), windows, horizons_sec) for p in paths
    ]
    return average_reports(reports)


def average_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Mean of per-run reports, as in multi-seed result rows."""
    if not reports:
        raise ValueError("nothing to average")
    keys = reports[0].mse_by_horizon.keys()
    if any(r.mse_by_horizon.keys() != keys or r.sample_count != reports[0].sample_count for r in reports):
        raise ValueError("reports being averaged must share horizons and sample counts")
    n = len(reports)
    return MetricReport(
        mse_by_horizon={k: sum(r.mse_by_horizon[k] for r in reports) / n for k in keys},
        c_mse=sum(r.c_mse for r in reports) / n,
        cf_mse=sum(r.cf_mse for r in reports) / n,
        sample_count=reports[0].sample_count,
    )


# ---------------------------------------------------------------------------
# predictors


class ModelPredictor:
    """Wraps a trained network: normalized windows in, pixel boxes out."""

    def __init__(self, model: MGNet, batch_size: int = 256):
        self.model = model
        self.batch_size = batch_size

    def __call__(self, windows: list[TrajectoryWindow]) -> np.ndarray:
        if any(not w.is_normalized for w in windows):
            raise ValueError("model evaluation expects normalized windows")
        self.model.eval()
        observed, _ = windows_to_tensors(windows)
        chunks = []
        with torch.no_grad():
            for i in range(0, len(windows), self.batch_size):
                out = self.model.predict(observed[i : i + self.batch_size])
                chunks.append(out.trajectory.boxes.double().numpy())
        normalized = np.concatenate(chunks)
        return np.stack([w.norm_transform.to_pixels(normalized[i]) for i, w in enumerate(windows)])


def constant_velocity_baseline(windows: list[TrajectoryWindow]) -> np.ndarray:
    """Extrapolates the last observed frame-to-frame box difference."""
    preds = []
    for w in windows:
        observed = w.observed_pixels()
        velocity = observed[-1] - observed[-2] if observed.shape[0] >= 2 else np.zeros(4)
        steps = np.arange(1, w.rho + 1, dtype=np.float64)[:, None]
        preds.append(observed[-1] + steps * velocity)
    return np.stack(preds)


def linear_baseline(windows: list[TrajectoryWindow]) -> np.ndarray:
    """Least-squares line per coordinate over the observed window, extrapolated."""
    preds = []
    for w in windows:
        observed = w.observed_pixels()
        tau = observed.shape[0]
        t = np.arange(tau, dtype=np.float64)
        design = np.stack([t, np.ones(tau)], axis=1)
        coef, *_ = np.linalg.lstsq(design, observed, rcond=None)
        t_future = np.arange(tau, tau + w.rho, dtype=np.float64)
        preds.append(np.stack([t_future, np.ones(w.rho)], axis=1) @ coef)
    return np.stack(preds)


# ---------------------------------------------------------------------------
# experiment harnesses


@dataclass
class WindowSplits:
    train: list[TrajectoryWindow]
    test: list[TrajectoryWindow]
    val: list[TrajectoryWindow]


def prepare_splits(
    tracks: list[Track],
    tau: int,
    rho: int,
    stride: int = 1,
    image_size: tuple[int, int] = (1920, 1080),
    spec: SplitSpec = SplitSpec(),
) -> WindowSplits:
    """Video-granular split, windowing, and normalization in one step."""
    parts = split_dataset(tracks, spec)
    width, height = image_size
    splits = [
        [normalize_window(w, width, height) for w in window_tracks(part, tau, rho, stride=stride)]
        for part in parts
    ]
    return WindowSplits(train=splits[0], test=splits[1], val=splits[2])


@dataclass(frozen=True)
class ExperimentRow:
    dataset: str
    variant: str
    k: int
    report: MetricReport
    seeds: tuple[int, ...]


@dataclass
class ExperimentTable:
    rows: list[ExperimentRow] = field(default_factory=list)

    CSV_COLUMNS = ("dataset", "variant", "k", "mse_0.5", "mse_1.0", "mse_1.5", "c_mse", "cf_mse", "seeds")

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.CSV_COLUMNS)
            for row in self.rows:
                mse = row.report.mse_by_horizon
                writer.writerow(
                    [
                        row.dataset,
                        row.variant,
                        row.k,
                        *(("" if sec not in mse else repr(mse[sec])) for sec in HORIZONS_SEC),
                        repr(row.report.c_mse),
                        repr(row.report.cf_mse),
                        " ".join(str(s) for s in row.seeds),
                    ]
                )


def _score_config(
    model_config: ModelConfig,
    train_config: TrainConfig,
    splits: WindowSplits,
    seeds: tuple[int, ...],
    out_dir: Path | None,
    tag: str,
) -> MetricReport:
    reports = []
    for seed in seeds:
        run_dir = None if out_dir is None else Path(out_dir) / f"{tag}_seed{seed}"
        model, _ = train_model(
            model_config, replace(train_config, seed=seed), splits.train, splits.val, out_dir=run_dir
        )
        reports.append(evaluate(ModelPredictor(model), splits.test))
    return average_reports(reports)


ABLATION_VARIANTS = ("BL", "+AT", "+ES", "+AT+ES")


def run_ablation(
    splits: WindowSplits,
    base_config: ModelConfig,
    train_config: TrainConfig,
    seeds: tuple[int, ...] = (0,),
    out_dir: Path | None = None,
    dataset: str = "synthetic",
) -> ExperimentTable:
    """Train and score the four attention/goal-evaluator variants."""
    table = ExperimentTable()
    for variant in ABLATION_VARIANTS:
        config = replace(
            base_config,
            use_attention="AT" in variant,
            goal_stages=base_config.goal_stages if "ES" in variant else 1,
        )
        tag = "variant_" + variant.replace("+", "_").strip("_").lower()
        report = _score_config(config, train_config, splits, seeds, out_dir, tag)
        table.rows.append(
            ExperimentRow(dataset=dataset, variant=variant, k=config.goal_stages, report=report, seeds=seeds)
        )
    if out_dir is not None:
        table.write_csv(Path(out_dir) / "ablation.csv")
    return table


def run_exploration(
    splits: WindowSplits,
    base_config: ModelConfig,
    train_config: TrainConfig,
    k_list: tuple[int, ...] = (1, 3, 9, 15, 45),
    seeds: tuple[int, ...] = (0,),
    out_dir: Path | None = None,
    dataset: str = "synthetic",
) -> ExperimentTable:
    """Sweep the fine stage count k; every k is validated before any training."""
    configs = [replace(base_config, goal_stages=k) for k in k_list]  # fails fast on bad k
    table = ExperimentTable()
    for k, config in zip(k_list, configs):
        report = _score_config(config, train_config, splits, seeds, out_dir, tag=f"stages_{k}")
        table.rows.append(
            ExperimentRow(dataset=dataset, variant=config.variant, k=k, report=report, seeds=seeds)
        )
    if out_dir is not None:
        table.write_csv(Path(out_dir) / "exploration.csv")
    return table


# ---------------------------------------------------------------------------
# exports and plots

PAST_COLOR = "blue"
TRUTH_COLOR = "orange"
PRED_COLOR = "green"


def write_predictions_jsonl(
    windows: list[TrajectoryWindow], predictions: np.ndarray, path: Path
) -> None:
    """One record per predicted step: ids, anchor frame, step offset, box."""
    if len(windows) != predictions.shape[0]:
        raise ValueError(f"{len(windows)} windows but {predictions.shape[0]} prediction rows")
    with open(path, "w") as fh:
        for w, boxes in zip(windows, predictions):
            for step, (cx, cy, bw, bh) in enumerate(boxes, start=1):
                record = {
                    "video_id": w.video_id,
                    "track_id": w.track_id,
                    "t": w.anchor_frame,
                    "horizon_step": step,
                    "cx": float(cx),
                    "cy": float(cy),
                    "w": float(bw),
                    "h": float(bh),
                }
                fh.write(json.dumps(record) + "\n")


def _box_rectangle(box: np.ndarray, color: str):
    from matplotlib import patches

    cx, cy, w, h = box
    return patches.Rectangle(
        (cx - w / 2, cy - h / 2), w, h, linewidth=1.2, edgecolor=color, facecolor="none"
    )


def trajectory_figure(window: TrajectoryWindow, prediction: np.ndarray):
    """Figure with centroid polylines plus boxes at the reporting horizons."""
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    observed = window.observed_pixels()
    truth = window.future_pixels()
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    ax.plot(observed[:, 0], observed[:, 1], color=PAST_COLOR, linewidth=2, label="observed")
    ax.plot(truth[:, 0], truth[:, 1], color=TRUTH_COLOR, linewidth=2, label="ground truth")
    ax.plot(prediction[:, 0], prediction[:, 1], color=PRED_COLOR, linewidth=2, label="prediction")
    for steps in available_horizons(window.rho, window.fps).values():
        ax.add_patch(_box_rectangle(truth[steps - 1], TRUTH_COLOR))
        ax.add_patch(_box_rectangle(prediction[steps - 1], PRED_COLOR))
    ax.set_xlabel("x (px)")
    ax.set_ylabel("y (px)")
    ax.invert_yaxis()  # image coordinates grow downward
    ax.legend(loc="best")
    ax.set_title(f"{window.video_id} / {window.track_id} @ frame {window.anchor_frame}")
    fig.tight_layout()
    return fig


def plot_trajectories(
    windows: list[TrajectoryWindow], predictions: np.ndarray, out_dir: Path
) -> list[Path]:
    """One PNG per window with a deterministic name; returns the written paths."""
    predictions = np.asarray(predictions, dtype=np.float64)
    if len(windows) != (0 if predictions.size == 0 else predictions.shape[0]):
        raise ValueError(f"{len(windows)} windows but {predictions.shape[0]} prediction rows")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, window in enumerate(windows):
        fig = trajectory_figure(window, predictions[i])
        path = out_dir / f"{window.video_id}_{window.track_id}_f{window.anchor_frame:06d}.png"
        fig.savefig(path)
        import matplotlib.pyplot as plt

        plt.close(fig)
        written.append(path)
    return written
