"""Sequence encoders: gated-recurrent past/future encoders and the temporal
multi-head self-attention encoder.

All encoders consume normalized (B, T, 4) box sequences and emit fixed-size
feature vectors: ``past_feature`` and ``future_feature`` from separate GRU
encoders, ``attention_feature`` from the transformer-style encoder stack.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

INPUT_DIM = 4  # (cx, cy, w, h)


@dataclass(frozen=True)
class AttentionConfig:
    """Geometry of the temporal attention encoder."""

    embed_dim: int = 32
    num_heads: int = 8
    num_layers: int = 1
    output_dim: int = 256
    ffn_dim: int | None = None  # defaults to 4 * embed_dim
    dropout: float = 0.1
    use_positions: bool = True

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} must be divisible by num_heads {self.num_heads}"
            )
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


@dataclass
class EncodedFeatures:
    """Hidden representations feeding the latent model and the decoder.

    ``future`` is populated only on training-mode passes; ``attention`` only
    when the attention encoder is enabled.
    """

    past: Tensor
    future: Tensor | None = None
    attention: Tensor | None = None


def _check_finite(name: str, x: Tensor) -> None:
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")


def sinusoidal_positions(length: int, dim: int, *, dtype=torch.float32, device=None) -> Tensor:
    """Fixed (length, dim) sine/cosine position table; dim must be even."""
    if dim % 2 != 0:
        raise ValueError("position table dimension must be even")
    position = torch.arange(length, dtype=dtype, device=device).unsqueeze(1)
    div = torch.exp(
        torch.arange(0, dim, 2, dtype=dtype, device=device) * (-math.log(10000.0) / dim)
    )
    table = torch.zeros(length, dim, dtype=dtype, device=device)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div)
    return table


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over the last two dims; leading dims broadcast.

    Each output row is a convex combination of V rows.
    """
    d_k = k.shape[-1]
    scores = q @ k.transpose(-2, -1) / math.sqrt(d_k)
    return torch.softmax(scores, dim=-1) @ v


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """The probability matrix used by scaled_dot_attention; rows sum to 1."""
    return torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(k.shape[-1]), dim=-1)


class TrajectoryEmbedding(nn.Module):
    """Linear coordinate embedding plus (optional) sinusoidal position signal."""

    def __init__(self, embed_dim: int, use_positions: bool = True, max_len: int = 512):
        super().__init__()
        self.proj = nn.Linear(INPUT_DIM, embed_dim)
        self.use_positions = use_positions
        self.register_buffer("positions", sinusoidal_positions(max_len, embed_dim), persistent=False)

    def forward(self, seq: Tensor) -> Tensor:
        # seq: (..., T, 4) -> (..., T, embed_dim)
        _check_finite("trajectory input", seq)
        out = self.proj(seq)
        if self.use_positions:
            out = out + self.positions[: seq.shape[-2]].to(out.dtype)
        return out


class MultiHeadAttention(nn.Module):
    """Parallel attention heads merged by an output projection."""

    def __init__(self, embed_dim: int, num_heads: int, dropout: float = 0.0):
        super().__init__()
        if embed_dim % num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        self.num_heads = num_heads
        self.head_dim = embed_dim // num_heads
        self.q_proj = nn.Linear(embed_dim, embed_dim)
        self.k_proj = nn.Linear(embed_dim, embed_dim)
        self.v_proj = nn.Linear(embed_dim, embed_dim)
        self.out_proj = nn.Linear(embed_dim, embed_dim)
        self.dropout = nn.Dropout(dropout)

    def _split_heads(self, x: Tensor) -> Tensor:
        # (B, T, E) -> (B, m, T, E/m)
        b, t, _ = x.shape
        return x.view(b, t, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, x: Tensor) -> Tensor:
        # x: (B, T, E) -> (B, T, E)
        q = self._split_heads(self.q_proj(x))
        k = self._split_heads(self.k_proj(x))
        v = self._split_heads(self.v_proj(x))
        weights = self.dropout(attention_weights(q, k))
        heads = weights @ v
        b, _, t, _ = heads.shape
        merged = heads.transpose(1, 2).reshape(b, t, self.num_heads * self.head_dim)
        return self.out_proj(merged)


class EncoderLayer(nn.Module):
    """Self-attention block with residuals, layer norm, and a feed-forward net."""

    def __init__(self, embed_dim: int, num_heads: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.attn = MultiHeadAttention(embed_dim, num_heads, dropout=dropout)
        self.norm1 = nn.LayerNorm(embed_dim)
        self.norm2 = nn.LayerNorm(embed_dim)
        self.ffn = nn.Sequential(
            nn.Linear(embed_dim, ffn_dim), nn.ReLU(), nn.Linear(ffn_dim, embed_dim)
        )

    def forward(self, x: Tensor) -> Tensor:
        x = self.norm1(x + self.attn(x))
        return self.norm2(x + self.ffn(x))


class AttentionEncoder(nn.Module):
    """Embed a box sequence, run the encoder stack, pool, and project.

    Pooling takes the final time-step output (mirroring recurrent final-state
    semantics) before the fully connected head.
    """

    def __init__(self, config: AttentionConfig = AttentionConfig()):
        super().__init__()
        self.config = config
        ffn_dim = config.ffn_dim or 4 * config.embed_dim
        self.embedding = TrajectoryEmbedding(config.embed_dim, use_positions=config.use_positions)
        self.layers = nn.ModuleList(
            EncoderLayer(config.embed_dim, config.num_heads, ffn_dim, config.dropout)
            for _ in range(config.num_layers)
        )
        self.out_dropout = nn.Dropout(config.dropout)
        self.head = nn.Linear(config.embed_dim, config.output_dim)

    def encode_sequence(self, seq: Tensor) -> Tensor:
        # (B, T, 4) -> (B, T, embed_dim), pre-pooling
        x = self.embedding(seq)
        for layer in self.layers:
            x = layer(x)
        return self.out_dropout(x)

    def forward(self, seq: Tensor) -> Tensor:
        # (B, T, 4) -> (B, output_dim)
        if seq.ndim != 3:
            raise ValueError(f"expected (B, T, 4) input, got shape {tuple(seq.shape)}")
        return self.head(self.encode_sequence(seq)[:, -1, :])


class SequenceEncoder(nn.Module):
    """Single-layer GRU over a box sequence; returns the final hidden state."""

    def __init__(self, hidden_dim: int = 256):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.gru = nn.GRU(INPUT_DIM, hidden_dim, batch_first=True)

    def forward(self, seq: Tensor) -> Tensor:
        # (B, T, 4) -> (B, hidden_dim)
        if seq.ndim != 3:
            raise ValueError(f"expected (B, T, 4) input, got shape {tuple(seq.shape)}")
        if seq.shape[1] < 1:
            raise ValueError("sequence length must be >= 1")
        _check_finite("sequence input", seq)
        _, final = self.gru(seq)
        return final.squeeze(0)
