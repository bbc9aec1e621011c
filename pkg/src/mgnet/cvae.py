"""Conditional variational model over future trajectories.

A recognition network (training) and a conditional prior network (inference)
each map encoder features to a diagonal-Gaussian latent; the generation
network turns (features, latent) into the 256-dim seed ``h_G`` consumed by the
goal evaluator and decoder.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

SIGMA_FLOOR = 1e-6

LATENT_SOURCES = ("recognition", "prior", "prior-mean")


def _check_finite(name: str, x: Tensor) -> None:
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")


@dataclass
class LatentDistribution:
    """Diagonal Gaussian: per-dimension mean and standard deviation."""

    mu: Tensor
    sigma: Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ValueError("mu and sigma shapes differ")
        _check_finite("latent mu", self.mu)
        _check_finite("latent sigma", self.sigma)
        if not (self.sigma > 0).all():
            raise ValueError("latent sigma must be strictly positive")

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]


@dataclass
class LatentSample:
    """A latent draw plus where it came from, so train/eval paths stay auditable."""

    z: Tensor
    source: str

    def __post_init__(self):
        if self.source not in LATENT_SOURCES:
            raise ValueError(f"unknown latent source {self.source!r}; expected one of {LATENT_SOURCES}")
        _check_finite("latent sample", self.z)


def _perceptron(in_dim: int, hidden_dim: int, out_dim: int) -> nn.Sequential:
    # Three affine layers, batch-normalized rectifier units between them.
    return nn.Sequential(
        nn.Linear(in_dim, hidden_dim),
        nn.BatchNorm1d(hidden_dim),
        nn.ReLU(),
        nn.Linear(hidden_dim, hidden_dim),
        nn.BatchNorm1d(hidden_dim),
        nn.ReLU(),
        nn.Linear(hidden_dim, out_dim),
    )


class _GaussianNetwork(nn.Module):
    """Perceptron emitting (mu, log sigma); sigma floored for numerical safety."""

    def __init__(self, in_dim: int, latent_dim: int, hidden_dim: int = 256):
        super().__init__()
        self.latent_dim = latent_dim
        self.net = _perceptron(in_dim, hidden_dim, 2 * latent_dim)

    def _distribution(self, features: Tensor) -> LatentDistribution:
        mu, log_sigma = self.net(features).chunk(2, dim=-1)
        sigma = torch.exp(log_sigma).clamp_min(SIGMA_FLOOR)
        return LatentDistribution(mu=mu, sigma=sigma)


class RecognitionNetwork(_GaussianNetwork):
    """Posterior over the latent given past and future encodings (training only)."""

    def __init__(self, feature_dim: int = 256, latent_dim: int = 32, hidden_dim: int = 256):
        super().__init__(2 * feature_dim, latent_dim, hidden_dim)

    def forward(self, past_feature: Tensor, future_feature: Tensor | None) -> LatentDistribution:
        if future_feature is None:
            raise ValueError("recognition needs the future encoding; use the prior at eval time")
        return self._distribution(torch.cat([past_feature, future_feature], dim=-1))


class PriorNetwork(_GaussianNetwork):
    """Conditional prior over the latent given the past encoding alone."""

    def __init__(self, feature_dim: int = 256, latent_dim: int = 32, hidden_dim: int = 256):
        super().__init__(feature_dim, latent_dim, hidden_dim)

    def forward(self, past_feature: Tensor) -> LatentDistribution:
        return self._distribution(past_feature)


class GenerationNetwork(nn.Module):
    """Maps (past encoding, latent, attention encoding) to the decoder seed h_G."""

    def __init__(
        self,
        feature_dim: int = 256,
        latent_dim: int = 32,
        attention_dim: int = 256,
        hidden_dim: int = 256,
        out_dim: int = 256,
    ):
        super().__init__()
        self.attention_dim = attention_dim
        self.net = _perceptron(feature_dim + latent_dim + attention_dim, hidden_dim, out_dim)

    def forward(
        self, past_feature: Tensor, latent: LatentSample | Tensor, attention_feature: Tensor | None = None
    ) -> Tensor:
        z = latent.z if isinstance(latent, LatentSample) else latent
        _check_finite("generation past feature", past_feature)
        _check_finite("generation latent", z)
        parts = [past_feature, z]
        if self.attention_dim:
            if attention_feature is None:
                raise ValueError("this generation network was built to consume an attention feature")
            _check_finite("generation attention feature", attention_feature)
            parts.append(attention_feature)
        elif attention_feature is not None:
            raise ValueError("attention feature supplied to an attention-free generation network")
        return self.net(torch.cat(parts, dim=-1))


def reparameterize(dist: LatentDistribution, eps: Tensor, source: str = "prior") -> LatentSample:
    """z = mu + sigma * eps with caller-supplied noise, so sampling stays seedable."""
    if eps.shape != dist.mu.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} does not match latent shape {tuple(dist.mu.shape)}")
    return LatentSample(z=dist.mu + dist.sigma * eps, source=source)


def prior_mean(dist: LatentDistribution) -> LatentSample:
    """Deterministic draw at the distribution mean, for reproducible evaluation."""
    return LatentSample(z=dist.mu, source="prior-mean")


def kl_divergence(q: LatentDistribution, p: LatentDistribution) -> Tensor:
    """KL(q || p) for diagonal Gaussians, summed over latent dims.

    Returns one value per batch row (a scalar for unbatched inputs). The
    log-ratio form makes KL(q, q) an exact 0.
    """
    if q.dim != p.dim:
        raise ValueError("latent dimensions differ")
    var_p = p.sigma.square()
    terms = (
        torch.log(p.sigma / q.sigma)
        + (q.sigma.square() + (q.mu - p.mu).square()) / (2 * var_p)
        - 0.5
    )
    return terms.sum(dim=-1)
