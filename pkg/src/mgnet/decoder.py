"""Forward recursive decoding of the future trajectory.

One GRU cell rolls the horizon out step by step. Each step consumes an
embedding of the previously predicted box together with the fine goal feature
whose stage covers the step, and emits a 4-dim box delta; deltas accumulate
from the anchor box to absolute normalized boxes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .cvae import LatentSample
from .data import NormTransform
from .goals import GoalFeatureSet, covering_index

BOX_DIM = 4


def _check_finite(name: str, x: Tensor) -> None:
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")


@dataclass
class DecoderState:
    """Rollout cursor: recurrent hidden, last absolute box, and the step clock."""

    hidden: Tensor  # (B, hidden_dim)
    prev_box: Tensor  # (B, 4), absolute normalized coordinates
    step: int  # next step to decode, 1-based
    rho: int

    def __post_init__(self):
        if not 1 <= self.step <= self.rho + 1:
            raise ValueError(f"step {self.step} outside [1, {self.rho + 1}]")


@dataclass
class PredictedTrajectory:
    """Absolute normalized box rows for every future step."""

    boxes: Tensor  # (B, rho, 4)

    def __post_init__(self):
        if self.boxes.ndim != 3 or self.boxes.shape[-1] != BOX_DIM:
            raise ValueError(f"expected (batch, steps, 4) boxes, got {tuple(self.boxes.shape)}")
        _check_finite("predicted boxes", self.boxes)

    @property
    def steps(self) -> int:
        return self.boxes.shape[1]

    def pixels(self, transform: NormTransform) -> np.ndarray:
        return transform.to_pixels(self.boxes.detach().cpu().numpy())


class RecursiveDecoder(nn.Module):
    """Goal-guided recurrent rollout over the prediction horizon."""

    def __init__(
        self,
        hidden_dim: int = 256,
        goal_dim: int = 256,
        box_embed_dim: int = 64,
        past_dim: int = 256,
        latent_dim: int = 32,
        attention_dim: int = 256,
    ):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.attention_dim = attention_dim
        self.init_proj = nn.Linear(past_dim + attention_dim + latent_dim, hidden_dim)
        self.box_embed = nn.Linear(BOX_DIM, box_embed_dim)
        self.cell = nn.GRUCell(box_embed_dim + goal_dim, hidden_dim)
        self.delta_head = nn.Linear(hidden_dim, BOX_DIM)

    def _latent_tensor(self, latent: LatentSample | Tensor) -> Tensor:
        return latent.z if isinstance(latent, LatentSample) else latent

    def initial_state(
        self,
        past_feature: Tensor,
        attention_feature: Tensor | None,
        latent: LatentSample | Tensor,
        rho: int,
        anchor: Tensor | None = None,
    ) -> DecoderState:
        z = self._latent_tensor(latent)
        _check_finite("past feature", past_feature)
        _check_finite("latent", z)
        parts = [past_feature, z]
        if self.attention_dim:
            if attention_feature is None:
                raise ValueError("this decoder was built to consume an attention feature")
            _check_finite("attention feature", attention_feature)
            parts = [past_feature, attention_feature, z]
        elif attention_feature is not None:
            raise ValueError("attention feature supplied to an attention-free decoder")
        hidden = self.init_proj(torch.cat(parts, dim=-1))
        if anchor is None:
            anchor = torch.zeros(past_feature.shape[0], BOX_DIM, dtype=hidden.dtype, device=hidden.device)
        return DecoderState(hidden=hidden, prev_box=anchor, step=1, rho=rho)

    def decode_step(self, state: DecoderState, goal_feature: Tensor) -> tuple[DecoderState, Tensor]:
        """Advance one step; returns the new state and the emitted box delta."""
        if state.step > state.rho:
            raise ValueError(f"decoder already consumed all {state.rho} steps")
        step_input = torch.cat([self.box_embed(state.prev_box), goal_feature], dim=-1)
        hidden = self.cell(step_input, state.hidden)
        delta = self.delta_head(hidden)
        next_state = DecoderState(
            hidden=hidden, prev_box=state.prev_box + delta, step=state.step + 1, rho=state.rho
        )
        return next_state, delta

    def decode_trajectory(
        self,
        past_feature: Tensor,
        attention_feature: Tensor | None,
        latent: LatentSample | Tensor,
        goal_features: GoalFeatureSet,
        anchor: Tensor | None = None,
    ) -> PredictedTrajectory:
        rho = goal_features.times[-1]
        k = goal_features.k
        if rho % k != 0:
            raise ValueError(f"goal features at times {goal_features.times} do not tile rho={rho}")
        state = self.initial_state(past_feature, attention_feature, latent, rho, anchor=anchor)
        boxes = []
        for step in range(1, rho + 1):
            feature = goal_features.features[:, covering_index(step, rho, k) - 1]
            state, _ = self.decode_step(state, feature)
            boxes.append(state.prev_box)
        return PredictedTrajectory(boxes=torch.stack(boxes, dim=1))
