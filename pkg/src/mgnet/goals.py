"""Multi-stage goal evaluator.

Two reverse-running recurrences over the prediction horizon: a coarse layer
read out at 3 stage boundaries, and a fine layer read out at k boundaries,
where each fine readout is refined by the coarse feature of the stage that
covers its time. A linear head projects goal features to normalized stage-goal
boxes for supervision. k=1 skips all of this in favor of a single long-term
goal head.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch
from torch import Tensor, nn

from .data import ConfigurationError

VisitHook = Callable[[int], None]


def covering_index(position: int, total: int, stages: int) -> int:
    """1-based index of the stage (out of ``stages``) covering step ``position``.

    With total=45, stages=9: positions 1..5 map to 1, 6..10 to 2, and so on.
    Total, monotone, and the identity on boundary steps when stages == total.
    """
    if not 1 <= position <= total:
        raise ValueError(f"position {position} outside [1, {total}]")
    if stages < 1:
        raise ValueError("stages must be >= 1")
    return min(max(math.ceil(position * stages / total), 1), stages)


def stage_boundaries(rho: int, stages: int) -> tuple[int, ...]:
    """Step offsets (1-based) where each of ``stages`` stages ends.

    Even split when stages divides rho; otherwise ceiling-spaced with the tail
    clamped to rho, which can repeat boundaries at toy horizon sizes.
    """
    if rho < 1 or stages < 1:
        raise ConfigurationError("rho and stages must be >= 1")
    if rho % stages == 0:
        span = rho // stages
        return tuple(span * (j + 1) for j in range(stages))
    span = math.ceil(rho / stages)
    return tuple(min(span * (j + 1), rho) for j in range(stages))


@dataclass(frozen=True)
class EvaluatorConfig:
    k: int
    rho: int
    hidden_dim: int = 256
    coarse_stages: int = 3

    def __post_init__(self):
        if self.rho < 1:
            raise ConfigurationError("rho must be >= 1")
        if not 1 <= self.k <= self.rho:
            raise ConfigurationError(f"stage count k={self.k} must lie in [1, rho={self.rho}]")
        if self.rho % self.k != 0:
            raise ConfigurationError(f"stage count k={self.k} must divide rho={self.rho}")
        if self.hidden_dim < 1 or self.coarse_stages < 1:
            raise ConfigurationError("hidden_dim and coarse_stages must be >= 1")


@dataclass
class GoalFeatureSet:
    """Fine goal features, one (B, H) row block per stage boundary."""

    features: Tensor  # (B, k, H)
    times: tuple[int, ...]  # step offsets, strictly increasing

    def __post_init__(self):
        if self.features.ndim != 3 or self.features.shape[1] != len(self.times):
            raise ValueError("features must be (batch, k, dim) aligned with times")
        if any(b <= a for a, b in zip(self.times, self.times[1:])) or self.times[0] < 1:
            raise ValueError("goal times must be positive and strictly increasing")
        if not torch.isfinite(self.features).all():
            raise ValueError("goal features contain non-finite values")

    @property
    def k(self) -> int:
        return len(self.times)


@dataclass
class GoalSet:
    """Normalized stage-goal boxes aligned with a GoalFeatureSet."""

    goals: Tensor  # (B, k, 4)
    times: tuple[int, ...]

    def __post_init__(self):
        if self.goals.ndim != 3 or self.goals.shape[1] != len(self.times) or self.goals.shape[2] != 4:
            raise ValueError("goals must be (batch, k, 4) aligned with times")
        if not torch.isfinite(self.goals).all():
            raise ValueError("goals contain non-finite values")


class ReverseRecurrence(nn.Module):
    """GRU cell stepped from t+rho down to t+1, seeded and fed by one vector.

    The hidden state starts at the seed; every step consumes the same learned
    rectified projection of the seed. Hidden states are collected at the
    requested boundary steps and returned in the order given.
    """

    def __init__(self, hidden_dim: int):
        super().__init__()
        self.input_proj = nn.Linear(hidden_dim, hidden_dim)
        self.cell = nn.GRUCell(hidden_dim, hidden_dim)

    def forward(
        self,
        seed: Tensor,
        rho: int,
        readout_steps: tuple[int, ...],
        visit_hook: VisitHook | None = None,
    ) -> Tensor:
        if any(not 1 <= s <= rho for s in readout_steps):
            raise ValueError(f"readout steps {readout_steps} outside [1, {rho}]")
        step_input = torch.relu(self.input_proj(seed))
        hidden = seed
        collected: dict[int, Tensor] = {}
        wanted = set(readout_steps)
        for step in range(rho, 0, -1):
            hidden = self.cell(step_input, hidden)
            if visit_hook is not None:
                visit_hook(step)
            if step in wanted:
                collected[step] = hidden
        return torch.stack([collected[s] for s in readout_steps], dim=1)


class MultiStageGoalEvaluator(nn.Module):
    """Coarse-then-fine reverse recurrences plus the goal projection head."""

    def __init__(self, config: EvaluatorConfig):
        super().__init__()
        if config.k == 1:
            raise ConfigurationError("k=1 bypasses the evaluator; build a LongTermGoalHead instead")
        self.config = config
        hidden = config.hidden_dim
        self.coarse = ReverseRecurrence(hidden)
        self.fine = ReverseRecurrence(hidden)
        self.refine = nn.Linear(2 * hidden, hidden)
        self.project = nn.Linear(hidden, 4)
        self.coarse_times = stage_boundaries(config.rho, config.coarse_stages)
        self.fine_times = stage_boundaries(config.rho, config.k)

    def coarse_pass(self, h_g: Tensor, visit_hook: VisitHook | None = None) -> Tensor:
        # (B, H) -> (B, coarse_stages, H)
        return self.coarse(h_g, self.config.rho, self.coarse_times, visit_hook)

    def fine_pass(
        self, h_g: Tensor, coarse_features: Tensor, visit_hook: VisitHook | None = None
    ) -> GoalFeatureSet:
        if coarse_features.shape[1] != self.config.coarse_stages:
            raise ValueError(
                f"expected {self.config.coarse_stages} coarse features, got {coarse_features.shape[1]}"
            )
        hiddens = self.fine(h_g, self.config.rho, self.fine_times, visit_hook)
        rows = []
        for j in range(self.config.k):
            cover = covering_index(j + 1, self.config.k, self.config.coarse_stages)
            paired = torch.cat([hiddens[:, j], coarse_features[:, cover - 1]], dim=-1)
            rows.append(self.refine(paired))
        return GoalFeatureSet(features=torch.stack(rows, dim=1), times=self.fine_times)

    def project_goals(self, features: GoalFeatureSet) -> GoalSet:
        return GoalSet(goals=self.project(features.features), times=features.times)

    def forward(self, h_g: Tensor) -> tuple[GoalFeatureSet, GoalSet]:
        features = self.fine_pass(h_g, self.coarse_pass(h_g))
        return features, self.project_goals(features)


class LongTermGoalHead(nn.Module):
    """k=1 fallback: one fully connected goal feature at the horizon's end."""

    def __init__(self, rho: int, hidden_dim: int = 256):
        super().__init__()
        self.rho = rho
        self.feature = nn.Linear(hidden_dim, hidden_dim)
        self.project = nn.Linear(hidden_dim, 4)

    def forward(self, h_g: Tensor) -> tuple[GoalFeatureSet, GoalSet]:
        feature = self.feature(h_g).unsqueeze(1)
        features = GoalFeatureSet(features=feature, times=(self.rho,))
        return features, GoalSet(goals=self.project(feature), times=(self.rho,))


def make_goal_network(config: EvaluatorConfig) -> MultiStageGoalEvaluator | LongTermGoalHead:
    if config.k == 1:
        return LongTermGoalHead(config.rho, config.hidden_dim)
    return MultiStageGoalEvaluator(config)
