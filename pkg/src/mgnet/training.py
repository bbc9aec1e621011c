"""Loss composition, the optimization loop, and checkpoint persistence."""
from __future__ import annotations

import copy
import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from torch import Tensor

from .cvae import kl_divergence
from .data import StageGoalTargets, TrajectoryBatch, TrajectoryWindow, stage_times
from .goals import GoalSet
from .network import MGNet, ModelConfig, ModelOutput

CHECKPOINT_VERSION = 1

LOG_COLUMNS = ("epoch", "lr", "l_pred", "l_goals", "kld", "total", "val_total")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 128
    epochs: int = 100
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class LossReport:
    """The three loss terms and their unit-weight sum, graph-carrying."""

    l_pred: Tensor
    l_goals: Tensor
    kld: Tensor
    total: Tensor

    def __post_init__(self):
        with torch.no_grad():
            # summed in the terms' own dtype; a float64 recomputation would
            # disagree with a float32 total by far more than the tolerance
            parts = float(self.l_pred + self.l_goals + self.kld)
            total = float(self.total)
        # a diverged run (inf/nan terms) is reported by the training loop, not here
        if math.isfinite(parts) and abs(total - parts) > 1e-9 * max(1.0, abs(parts)):
            raise ValueError("total loss must equal the sum of its three terms")


@dataclass
class EpochStats:
    epoch: int
    lr: float
    l_pred: float
    l_goals: float
    kld: float
    total: float
    val_total: float


@dataclass
class TrainResult:
    history: list[EpochStats]
    best_epoch: int
    best_val_loss: float
    checkpoint_path: Path | None = None
    best_state: dict = field(default_factory=dict, repr=False)


def loss_pred(pred: Tensor, truth: Tensor) -> Tensor:
    """Mean over samples and steps of the squared L2 box difference."""
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != truth shape {tuple(truth.shape)}")
    return (pred - truth).square().sum(dim=-1).mean()


def loss_goals(goals: GoalSet, targets: StageGoalTargets) -> Tensor:
    """Mean over the k stage goals of the squared L2 row difference."""
    if goals.times != tuple(targets.times):
        raise ValueError(
            f"goal times {goals.times} misaligned with supervision times {tuple(targets.times)}"
        )
    target = torch.as_tensor(targets.goals, dtype=goals.goals.dtype, device=goals.goals.device)
    if goals.goals.shape != target.shape:
        raise ValueError(f"goal shape {tuple(goals.goals.shape)} != target shape {tuple(target.shape)}")
    return (goals.goals - target).square().sum(dim=-1).mean()


def total_loss(l_pred: Tensor, l_goals: Tensor, kld: Tensor) -> LossReport:
    return LossReport(l_pred=l_pred, l_goals=l_goals, kld=kld, total=l_pred + l_goals + kld)


def batch_goal_targets(future: Tensor, k: int) -> StageGoalTargets:
    """Stage supervision rows sliced out of a (batch, rho, 4) future tensor."""
    times = stage_times(future.shape[1], k)
    index = torch.tensor([t - 1 for t in times], device=future.device)
    return StageGoalTargets(k=k, goals=future.index_select(1, index), times=times)


def compute_losses(model: MGNet, output: ModelOutput, future: Tensor) -> LossReport:
    l_p = loss_pred(output.trajectory.boxes, future)
    l_g = loss_goals(output.goals, batch_goal_targets(future, model.config.goal_stages))
    if output.posterior is None:
        raise ValueError("loss computation needs the recognition posterior; pass the future in")
    kld = kl_divergence(output.posterior, output.prior).mean()
    return total_loss(l_p, l_g, kld)


def windows_to_tensors(windows: list[TrajectoryWindow]) -> tuple[Tensor, Tensor]:
    batch = TrajectoryBatch(windows)
    observed = torch.from_numpy(batch.observed_array()).to(torch.float32)
    future = torch.from_numpy(batch.future_array()).to(torch.float32)
    return observed, future


def _batch_slices(n: int, batch_size: int, generator: torch.Generator | None) -> list[Tensor]:
    order = torch.randperm(n, generator=generator) if generator is not None else torch.arange(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # batch norm cannot run on a single training sample; fold a trailing
    # singleton into the previous batch instead of dropping it
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2:] = [torch.cat(batches[-2:])]
    return batches


def _validation_loss(model: MGNet, observed: Tensor, future: Tensor, batch_size: int) -> float:
    model.eval()
    total = 0.0
    with torch.no_grad():
        for idx in _batch_slices(observed.shape[0], batch_size, generator=None):
            output = model(observed[idx], future[idx], latent_source="prior-mean")
            report = compute_losses(model, output, future[idx])
            total += float(report.total) * len(idx)
    return total / observed.shape[0]


def fit(
    model: MGNet,
    train_windows: list[TrajectoryWindow],
    val_windows: list[TrajectoryWindow],
    config: TrainConfig,
    out_dir: Path | None = None,
) -> TrainResult:
    """Optimize the model, tracking the best validation loss.

    Writes ``log.csv`` and ``checkpoint.pt`` under ``out_dir`` when given. The
    model is left holding the best-epoch weights.
    """
    if not train_windows or not val_windows:
        raise ValueError("training needs nonempty train and val window lists")
    train_obs, train_fut = windows_to_tensors(train_windows)
    val_obs, val_fut = windows_to_tensors(val_windows)

    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimizer, factor=config.plateau_factor, patience=config.plateau_patience
    )
    shuffle = torch.Generator().manual_seed(config.seed)

    history: list[EpochStats] = []
    best_val = float("inf")
    best_epoch = -1
    best_state: dict = {}

    for epoch in range(config.epochs):
        model.train()
        lr = optimizer.param_groups[0]["lr"]
        sums = {"l_pred": 0.0, "l_goals": 0.0, "kld": 0.0, "total": 0.0}
        for batch_no, idx in enumerate(_batch_slices(len(train_windows), config.batch_size, shuffle)):
            optimizer.zero_grad()
            output = model(train_obs[idx], train_fut[idx], latent_source="recognition")
            report = compute_losses(model, output, train_fut[idx])
            if not torch.isfinite(report.total):
                raise RuntimeError(
                    f"training diverged: non-finite loss at epoch {epoch}, batch {batch_no}"
                )
            report.total.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            weight = len(idx) / len(train_windows)
            for key in sums:
                sums[key] += float(getattr(report, key).detach()) * weight

        val_total = _validation_loss(model, val_obs, val_fut, config.batch_size)
        scheduler.step(val_total)
        history.append(
            EpochStats(
                epoch=epoch,
                lr=lr,
                l_pred=sums["l_pred"],
                l_goals=sums["l_goals"],
                kld=sums["kld"],
                total=sums["total"],
                val_total=val_total,
            )
        )
        if val_total < best_val:
            best_val = val_total
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    model.eval()

    checkpoint_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_log(out_dir / "log.csv", history)
        checkpoint_path = out_dir / "checkpoint.pt"
        save_checkpoint(checkpoint_path, model, epoch=best_epoch, val_loss=best_val, train_config=config)

    return TrainResult(
        history=history,
        best_epoch=best_epoch,
        best_val_loss=best_val,
        checkpoint_path=checkpoint_path,
        best_state=best_state,
    )


def train_model(
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_windows: list[TrajectoryWindow],
    val_windows: list[TrajectoryWindow],
    out_dir: Path | None = None,
) -> tuple[MGNet, TrainResult]:
    """Seeded build-and-fit: same configs and windows reproduce the same run."""
    torch.manual_seed(train_config.seed)
    model = MGNet(model_config)
    result = fit(model, train_windows, val_windows, train_config, out_dir=out_dir)
    return model, result


def _write_log(path: Path, history: list[EpochStats]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for row in history:
            writer.writerow([getattr(row, col) for col in LOG_COLUMNS])


def save_checkpoint(
    path: Path,
    model: MGNet,
    epoch: int,
    val_loss: float,
    train_config: TrainConfig | None = None,
) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(model.config),
        "train_config": asdict(train_config) if train_config is not None else None,
        "epoch": epoch,
        "val_loss": val_loss,
        "state_dict": model.state_dict(),
        "rng_state": torch.get_rng_state(),
    }
    torch.save(payload, path)


@dataclass
class LoadedCheckpoint:
    model: MGNet
    model_config: ModelConfig
    train_config: TrainConfig | None
    epoch: int
    val_loss: float
    rng_state: torch.Tensor
    version: int


def load_checkpoint(path: Path) -> LoadedCheckpoint:
    payload = torch.load(path, weights_only=True)
    if "version" not in payload:
        raise ValueError(f"checkpoint {path} has no version field")
    if payload["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload['version']}")
    model_config = ModelConfig(**payload["model_config"])
    model = MGNet(model_config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    train_config = TrainConfig(**payload["train_config"]) if payload["train_config"] else None
    return LoadedCheckpoint(
        model=model,
        model_config=model_config,
        train_config=train_config,
        epoch=payload["epoch"],
        val_loss=payload["val_loss"],
        rng_state=payload["rng_state"],
        version=payload["version"],
    )
