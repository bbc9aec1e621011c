"""Full model assembly: encoders, latent networks, goal evaluator, decoder.

The training path encodes past and future, samples the latent from the
recognition posterior, and decodes under stage-goal guidance; the evaluation
path conditions on the past alone and decodes from the prior mean (or a prior
sample when stochastic rollouts are requested).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .cvae import (
    GenerationNetwork,
    LatentDistribution,
    LatentSample,
    PriorNetwork,
    RecognitionNetwork,
    prior_mean,
    reparameterize,
)
from .data import ConfigurationError
from .decoder import PredictedTrajectory, RecursiveDecoder
from .encoders import AttentionConfig, AttentionEncoder, EncodedFeatures, SequenceEncoder
from .goals import EvaluatorConfig, GoalFeatureSet, GoalSet, make_goal_network


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of the full network; defaults match the trained system."""

    tau: int = 15
    rho: int = 45
    goal_stages: int = 9
    hidden_dim: int = 256
    latent_dim: int = 32
    embed_dim: int = 32
    attention_heads: int = 8
    attention_layers: int = 1
    coarse_stages: int = 3
    box_embed_dim: int = 64
    use_attention: bool = True
    dropout: float = 0.1

    def __post_init__(self):
        if self.tau < 1:
            raise ConfigurationError("tau must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ConfigurationError("dropout must lie in [0, 1)")
        self.evaluator_config()  # fails fast on bad (k, rho) pairs

    def evaluator_config(self) -> EvaluatorConfig:
        return EvaluatorConfig(
            k=self.goal_stages,
            rho=self.rho,
            hidden_dim=self.hidden_dim,
            coarse_stages=self.coarse_stages,
        )

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(
            embed_dim=self.embed_dim,
            num_heads=self.attention_heads,
            num_layers=self.attention_layers,
            output_dim=self.hidden_dim,
            dropout=self.dropout,
        )

    @property
    def variant(self) -> str:
        """Ablation row label: attention and goal-evaluator flags over the baseline."""
        at = self.use_attention
        es = self.goal_stages > 1
        if at and es:
            return "+AT+ES"
        if at:
            return "+AT"
        if es:
            return "+ES"
        return "BL"


LATENT_SOURCES = ("recognition", "prior", "prior-mean")


@dataclass
class ModelOutput:
    """Everything one forward pass produces, for losses, metrics, and audits."""

    trajectory: PredictedTrajectory
    goals: GoalSet
    goal_features: GoalFeatureSet
    latent: LatentSample
    prior: LatentDistribution
    posterior: LatentDistribution | None
    features: EncodedFeatures = field(repr=False)


class MGNet(nn.Module):
    """Goal-conditioned CVAE trajectory predictor."""

    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        hidden = config.hidden_dim
        attention_dim = hidden if config.use_attention else 0

        self.past_encoder = SequenceEncoder(hidden)
        self.future_encoder = SequenceEncoder(hidden)
        self.attention_encoder = (
            AttentionEncoder(config.attention_config()) if config.use_attention else None
        )
        self.recognition = RecognitionNetwork(hidden, config.latent_dim, hidden)
        self.prior = PriorNetwork(hidden, config.latent_dim, hidden)
        self.generation = GenerationNetwork(
            hidden, config.latent_dim, attention_dim, hidden, out_dim=hidden
        )
        self.goal_net = make_goal_network(config.evaluator_config())
        self.decoder = RecursiveDecoder(
            hidden_dim=hidden,
            goal_dim=hidden,
            box_embed_dim=config.box_embed_dim,
            past_dim=hidden,
            latent_dim=config.latent_dim,
            attention_dim=attention_dim,
        )

    def encode(self, observed: Tensor, future: Tensor | None = None) -> EncodedFeatures:
        self._check_sequence("observed", observed, self.config.tau)
        if future is not None:
            self._check_sequence("future", future, self.config.rho)
        return EncodedFeatures(
            past=self.past_encoder(observed),
            future=self.future_encoder(future) if future is not None else None,
            attention=self.attention_encoder(observed) if self.attention_encoder else None,
        )

    def forward(
        self,
        observed: Tensor,
        future: Tensor | None = None,
        latent_source: str | None = None,
        generator: torch.Generator | None = None,
    ) -> ModelOutput:
        """Encode, draw the latent, and decode the full horizon.

        ``latent_source`` defaults to "recognition" in training mode and
        "prior-mean" in eval mode. ``generator`` seeds the latent draw for the
        stochastic sources.
        """
        if latent_source is None:
            latent_source = "recognition" if self.training else "prior-mean"
        if latent_source not in LATENT_SOURCES:
            raise ValueError(f"unknown latent source {latent_source!r}; expected one of {LATENT_SOURCES}")

        features = self.encode(observed, future)
        prior_dist = self.prior(features.past)
        posterior = (
            self.recognition(features.past, features.future) if features.future is not None else None
        )

        if latent_source == "recognition":
            if posterior is None:
                raise ValueError("latent source 'recognition' needs the future trajectory (training input)")
            latent = reparameterize(posterior, self._noise(posterior, generator), source="recognition")
        elif latent_source == "prior":
            latent = reparameterize(prior_dist, self._noise(prior_dist, generator), source="prior")
        else:
            latent = prior_mean(prior_dist)

        h_g = self.generation(features.past, latent, features.attention)
        goal_features, goals = self.goal_net(h_g)
        trajectory = self.decoder.decode_trajectory(
            features.past,
            features.attention,
            latent,
            goal_features,
            anchor=observed[:, -1, :],
        )
        return ModelOutput(
            trajectory=trajectory,
            goals=goals,
            goal_features=goal_features,
            latent=latent,
            prior=prior_dist,
            posterior=posterior,
            features=features,
        )

    def predict(
        self, observed: Tensor, sample: bool = False, generator: torch.Generator | None = None
    ) -> ModelOutput:
        """Inference rollout: deterministic prior mean unless a sample is requested."""
        source = "prior" if sample else "prior-mean"
        return self(observed, latent_source=source, generator=generator)

    @staticmethod
    def _noise(dist: LatentDistribution, generator: torch.Generator | None) -> Tensor:
        return torch.randn(
            dist.mu.shape, generator=generator, dtype=dist.mu.dtype, device=dist.mu.device
        )

    @staticmethod
    def _check_sequence(name: str, seq: Tensor, length: int) -> None:
        if seq.ndim != 3 or seq.shape[1] != length or seq.shape[2] != 4:
            raise ValueError(
                f"{name} must be (batch, {length}, 4), got {tuple(seq.shape)}"
            )
