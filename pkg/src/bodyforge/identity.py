"""Identity decoder: turns per-region image features into identity tokens.

Each of the five body regions owns a learnable bank of hidden tokens. A stack
of decoder layers refines all banks in parallel (regions never attend to each
other): cross-attention pulls appearance from that region's image features,
self-attention mixes within the bank, and an MLP finishes the layer. Present
regions are then concatenated along the token axis into one identity sequence
whose layout is reported as ``spans``.

Per layer, with LN applied to the hidden stream only for cross-attention and
to all three inputs for self-attention:

    h = CrossAtt(LN(h), f, f) + h
    h = SelfAtt(LN(h), LN(h), LN(h)) + h
    h = MLP(LN(h)) + h

The raw features ``f`` enter through learned key/value projections.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .regions import NUM_REGIONS, REGION_NAMES
from .tensor import Tensor, concat, take

__all__ = [
    "IdentityDecoderConfig",
    "DecoderLayer",
    "IdentityDecoder",
    "StackedIdentityEmbedding",
    "stack_embeddings",
]


@dataclass(frozen=True)
class IdentityDecoderConfig:
    num_regions: int = NUM_REGIONS
    token_len: int = 16
    dim: int = 32
    feature_dim: int = 32
    depth: int = 2
    num_heads: int = 4

    def __post_init__(self):
        if self.num_regions < 1:
            raise ValueError(f"num_regions must be positive, got {self.num_regions}")
        if self.token_len < 1:
            raise ValueError(f"token_len must be positive, got {self.token_len}")
        if self.depth < 1:
            raise ValueError(f"depth must be positive, got {self.depth}")
        if self.dim % self.num_heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.num_heads}")


class DecoderLayer(nn.Module):
    def __init__(self, cfg: IdentityDecoderConfig, rng: np.random.Generator, dtype):
        self.norm_cross = nn.LayerNorm(cfg.dim, dtype=dtype)
        self.cross = nn.MultiheadAttention(cfg.dim, cfg.feature_dim, cfg.dim, cfg.num_heads, rng, dtype=dtype)
        self.norm_self = nn.LayerNorm(cfg.dim, dtype=dtype)
        self.self_attn = nn.MultiheadAttention(cfg.dim, cfg.dim, cfg.dim, cfg.num_heads, rng, dtype=dtype)
        self.norm_mlp = nn.LayerNorm(cfg.dim, dtype=dtype)
        self.mlp = nn.FeedForward(cfg.dim, rng, dtype=dtype)

    def forward(self, hidden: Tensor, features: Tensor) -> Tensor:
        hidden = self.cross(self.norm_cross(hidden), features, features) + hidden
        normed = self.norm_self(hidden)
        hidden = self.self_attn(normed, normed, normed) + hidden
        return self.mlp(self.norm_mlp(hidden)) + hidden


class IdentityDecoder(nn.Module):
    """Refines the learnable hidden banks against per-region features.

    One layer stack serves every region (weights shared); regions stay
    independent because attention only ever runs within a region's tokens.
    """

    def __init__(self, config: IdentityDecoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.h_init = nn.Parameter(
            nn.normal_init(rng, (config.num_regions, config.token_len, config.dim), std=0.02, dtype=dtype)
        )
        self.layers = [DecoderLayer(config, rng, dtype) for _ in range(config.depth)]

    def forward(self, features: Tensor | np.ndarray) -> Tensor:
        """features: (N, T, d_F) or batched (B, N, T, d_F) -> matching hidden banks."""
        if not isinstance(features, Tensor):
            features = Tensor(features)
        cfg = self.config
        if features.ndim not in (3, 4) or features.shape[-3] != cfg.num_regions or features.shape[-1] != cfg.feature_dim:
            raise ValueError(
                f"features must be (..., {cfg.num_regions}, T, {cfg.feature_dim}), got {features.shape}"
            )
        hidden = self.h_init.tensor
        if features.ndim == 4:
            # broadcast the shared banks across the batch; gradient sums back
            lead = np.zeros((features.shape[0],) + self.h_init.shape, dtype=hidden.dtype)
            hidden = hidden + Tensor(lead)
        for layer in self.layers:
            hidden = layer(hidden, features)
        return hidden


@dataclass
class StackedIdentityEmbedding:
    """Present regions concatenated along the token axis.

    ``spans`` lists (region_name, start, end) half-open token ranges in
    canonical region order, covering the stacked sequence exactly.
    """

    tokens: Tensor
    spans: list[tuple[str, int, int]]
    present: np.ndarray

    @property
    def total_tokens(self) -> int:
        return self.tokens.shape[-2]


def stack_embeddings(hidden: Tensor, present) -> StackedIdentityEmbedding:
    """Concatenate present regions from (..., N, l_H, d_H) along tokens.

    Absent regions are dropped entirely (no padding); at least one region must
    be present.
    """
    present = np.asarray(present, dtype=bool)
    n = hidden.shape[-3]
    if present.shape != (n,):
        raise ValueError(f"present must have shape ({n},), got {present.shape}")
    if not present.any():
        raise ValueError("no regions present: nothing to condition on")
    if n != len(REGION_NAMES):
        names = tuple(f"region_{i}" for i in range(n))
    else:
        names = REGION_NAMES

    token_len = hidden.shape[-2]
    batched = hidden.ndim == 4
    pieces = []
    spans = []
    cursor = 0
    for i in range(n):
        if not present[i]:
            continue
        index = (slice(None), i) if batched else (i,)
        pieces.append(take(hidden, index))
        spans.append((names[i], cursor, cursor + token_len))
        cursor += token_len
    tokens = concat(pieces, axis=-2) if len(pieces) > 1 else pieces[0]
    return StackedIdentityEmbedding(tokens=tokens, spans=spans, present=present)
