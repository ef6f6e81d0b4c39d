"""Noise-prediction U-Net with decoupled text/identity cross-attention.

A compact pixel-space U-Net: residual blocks carry the image stream, and at
configured resolutions a transformer block runs self-attention plus a pair of
cross-attention branches that share one query projection and one output
projection. The text branch is always active; the identity branch reads the
stacked identity tokens through its own key/value projections, is scaled by a
per-call weight, and is skipped entirely at weight zero so a disabled branch
costs nothing and changes nothing.

Attention blocks are tagged by where they sit (``down``, ``mid``, ``up``) so
callers can gate the identity branch per stage, and each block passes its
softmax weights over text tokens to an optional probe (used to localize
people for multi-person masking).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .encoders import sinusoidal_embedding
from .tensor import Tensor, attention, concat, conv2d, group_norm, silu, upsample_nearest

__all__ = ["DenoiserConfig", "DecoupledAttentionBlock", "UNetDenoiser", "BLOCK_CATEGORIES"]

BLOCK_CATEGORIES = ("down", "mid", "up")


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 64
    in_channels: int = 3
    base_channels: int = 32
    channel_mults: tuple = (1, 2, 2)
    attn_resolutions: tuple = (16,)
    num_heads: int = 4
    text_dim: int = 32
    identity_dim: int = 32
    norm_groups: int = 8

    def __post_init__(self):
        if len(self.channel_mults) < 1:
            raise ValueError("channel_mults must be non-empty")
        side = self.image_size
        for level in range(len(self.channel_mults) - 1):
            if side % 2 != 0:
                raise ValueError(f"image size {self.image_size} cannot be halved {level + 1} times")
            side //= 2
        for mult in self.channel_mults:
            ch = self.base_channels * mult
            if ch % self.norm_groups != 0:
                raise ValueError(f"channels {ch} not divisible by norm groups {self.norm_groups}")
            if ch % self.num_heads != 0:
                raise ValueError(f"channels {ch} not divisible by heads {self.num_heads}")

    @property
    def level_resolutions(self) -> tuple[int, ...]:
        return tuple(self.image_size // (2 ** i) for i in range(len(self.channel_mults)))

    @property
    def time_dim(self) -> int:
        return 4 * self.base_channels


class _GroupNorm(nn.Module):
    def __init__(self, channels: int, groups: int, dtype):
        self.gain = nn.Parameter(np.ones(channels, dtype=dtype))
        self.bias = nn.Parameter(np.zeros(channels, dtype=dtype))
        self.groups = groups

    def forward(self, x: Tensor) -> Tensor:
        return group_norm(x, self.groups, self.gain.tensor, self.bias.tensor)


class _Conv(nn.Module):
    def __init__(self, cin: int, cout: int, rng, kernel: int = 3, stride: int = 1, dtype=np.float32):
        fan_in = cin * kernel * kernel
        std = 1.0 / np.sqrt(fan_in)
        self.weight = nn.Parameter((rng.standard_normal((cout, cin, kernel, kernel)) * std).astype(dtype))
        self.bias = nn.Parameter(np.zeros(cout, dtype=dtype))
        self.stride = stride
        self.padding = kernel // 2

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight.tensor, self.bias.tensor, stride=self.stride, padding=self.padding)


class _TimeEmbedding(nn.Module):
    def __init__(self, cfg: DenoiserConfig, rng, dtype):
        self.fc1 = nn.Linear(cfg.base_channels, cfg.time_dim, rng, dtype=dtype)
        self.fc2 = nn.Linear(cfg.time_dim, cfg.time_dim, rng, dtype=dtype)
        self.sin_dim = cfg.base_channels

    def forward(self, t: np.ndarray, dtype) -> Tensor:
        table = sinusoidal_embedding(np.asarray(t, dtype=np.float64), self.sin_dim).astype(dtype)
        return self.fc2(silu(self.fc1(Tensor(table))))


class _ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, cfg: DenoiserConfig, rng, dtype):
        self.norm1 = _GroupNorm(cin, min(cfg.norm_groups, cin), dtype)
        self.conv1 = _Conv(cin, cout, rng, dtype=dtype)
        self.time_proj = nn.Linear(cfg.time_dim, cout, rng, dtype=dtype)
        self.norm2 = _GroupNorm(cout, cfg.norm_groups, dtype)
        self.conv2 = _Conv(cout, cout, rng, dtype=dtype)
        self.skip = _Conv(cin, cout, rng, kernel=1, dtype=dtype) if cin != cout else None

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(silu(self.norm1(x)))
        shift = self.time_proj(silu(temb))
        b, c = shift.shape
        h = h + shift.reshape(b, c, 1, 1)
        h = self.conv2(silu(self.norm2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class DecoupledAttentionBlock(nn.Module):
    """Self-attention plus decoupled text/identity cross-attention over the
    flattened spatial tokens of one feature map."""

    def __init__(self, channels: int, cfg: DenoiserConfig, category: str, resolution: int, rng, dtype):
        if category not in BLOCK_CATEGORIES:
            raise ValueError(f"unknown block category {category!r}")
        self.category = category
        self.resolution = resolution
        self.num_heads = cfg.num_heads
        self.norm_self = nn.LayerNorm(channels, dtype=dtype)
        self.self_attn = nn.MultiheadAttention(channels, channels, channels, cfg.num_heads, rng, dtype=dtype)
        self.norm_cross = nn.LayerNorm(channels, dtype=dtype)
        self.to_q = nn.Linear(channels, channels, rng, bias=False, dtype=dtype)
        self.text_key = nn.Linear(cfg.text_dim, channels, rng, bias=False, dtype=dtype)
        self.text_value = nn.Linear(cfg.text_dim, channels, rng, bias=False, dtype=dtype)
        self.id_key = nn.Linear(cfg.identity_dim, channels, rng, bias=False, dtype=dtype)
        self.id_value = nn.Linear(cfg.identity_dim, channels, rng, bias=False, dtype=dtype)
        self.to_out = nn.Linear(channels, channels, rng, bias=False, dtype=dtype)
        self.norm_ff = nn.LayerNorm(channels, dtype=dtype)
        self.ff = nn.FeedForward(channels, rng, dtype=dtype)

    def decoupled_cross_attention(
        self,
        tokens: Tensor,
        text_tokens: Tensor,
        id_tokens: Tensor | None,
        id_weight: float,
        id_mask: np.ndarray | None = None,
        probe=None,
    ) -> Tensor:
        """One query stream, two key/value banks, one output projection.

        The identity branch is evaluated only when ``id_weight`` is nonzero
        and tokens exist, so a gated-off branch leaves the text path
        bit-identical to a model without identity conditioning.
        """
        q = self.to_q(tokens)
        text_out, text_weights = attention(
            q, self.text_key(text_tokens), self.text_value(text_tokens), self.num_heads, return_weights=True
        )
        if probe is not None:
            probe(self.category, self.resolution, text_weights.data)
        merged = text_out
        if id_tokens is not None and id_weight != 0.0:
            id_out = attention(q, self.id_key(id_tokens), self.id_value(id_tokens), self.num_heads, mask=id_mask)
            merged = text_out + id_out * float(id_weight)
        return self.to_out(merged)

    def forward(
        self,
        x: Tensor,
        text_tokens: Tensor,
        id_tokens: Tensor | None,
        id_weight: float,
        id_mask: np.ndarray | None = None,
        probe=None,
    ) -> Tensor:
        b, c, h, w = x.shape
        tokens = x.reshape(b, c, h * w).transpose(0, 2, 1)
        normed = self.norm_self(tokens)
        tokens = self.self_attn(normed, normed, normed) + tokens
        tokens = (
            self.decoupled_cross_attention(
                self.norm_cross(tokens), text_tokens, id_tokens, id_weight, id_mask, probe
            )
            + tokens
        )
        tokens = self.ff(self.norm_ff(tokens)) + tokens
        return tokens.transpose(0, 2, 1).reshape(b, c, h, w)


class UNetDenoiser(nn.Module):
    """Predicts the noise component of a diffused image batch."""

    def __init__(self, config: DenoiserConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        cfg = config
        self.time_embed = _TimeEmbedding(cfg, rng, dtype)
        self.conv_in = _Conv(cfg.in_channels, cfg.base_channels, rng, dtype=dtype)

        resolutions = cfg.level_resolutions
        channels = [cfg.base_channels * m for m in cfg.channel_mults]
        levels = len(channels)

        self.down_res = []
        self.down_attn = {}
        self.downsamples = []
        ch = cfg.base_channels
        for i in range(levels):
            self.down_res.append(_ResBlock(ch, channels[i], cfg, rng, dtype))
            ch = channels[i]
            if resolutions[i] in cfg.attn_resolutions:
                self.down_attn[str(i)] = DecoupledAttentionBlock(ch, cfg, "down", resolutions[i], rng, dtype)
            if i < levels - 1:
                self.downsamples.append(_Conv(ch, ch, rng, stride=2, dtype=dtype))

        self.mid_res1 = _ResBlock(ch, ch, cfg, rng, dtype)
        self.mid_attn = DecoupledAttentionBlock(ch, cfg, "mid", resolutions[-1], rng, dtype)
        self.mid_res2 = _ResBlock(ch, ch, cfg, rng, dtype)

        self.up_res = []
        self.up_attn = {}
        self.upsamples = []
        for i in reversed(range(levels)):
            self.up_res.append(_ResBlock(ch + channels[i], channels[i], cfg, rng, dtype))
            ch = channels[i]
            if resolutions[i] in cfg.attn_resolutions:
                self.up_attn[str(i)] = DecoupledAttentionBlock(ch, cfg, "up", resolutions[i], rng, dtype)
            if i > 0:
                self.upsamples.append(_Conv(ch, ch, rng, dtype=dtype))

        self.norm_out = _GroupNorm(ch, min(cfg.norm_groups, ch), dtype)
        self.conv_out = _Conv(ch, cfg.in_channels, rng, dtype=dtype)

    def attention_blocks(self) -> list[DecoupledAttentionBlock]:
        blocks = [self.down_attn[k] for k in sorted(self.down_attn)]
        blocks.append(self.mid_attn)
        blocks.extend(self.up_attn[k] for k in sorted(self.up_attn))
        return blocks

    def forward(
        self,
        x: Tensor | np.ndarray,
        t: np.ndarray,
        text_tokens: Tensor | np.ndarray,
        id_tokens: Tensor | None = None,
        id_weights: dict[str, float] | None = None,
        id_masks: dict[int, np.ndarray] | None = None,
        probe=None,
    ) -> Tensor:
        """x: (B, C, H, W) diffused batch; t: (B,) integer timesteps;
        text_tokens: (B, l_T, d_T) or (l_T, d_T) shared across the batch.

        ``id_weights`` maps block category to the identity-branch scale
        (missing categories read as 0); ``id_masks`` maps a spatial side
        length to an additive attention mask for identity tokens at that
        resolution.
        """
        cfg = self.config
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float32))
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected (B, {cfg.in_channels}, H, W) input, got {x.shape}")
        if x.shape[2] != cfg.image_size or x.shape[3] != cfg.image_size:
            raise ValueError(f"expected {cfg.image_size}px square input, got {x.shape[2]}x{x.shape[3]}")
        if not isinstance(text_tokens, Tensor):
            text_tokens = Tensor(np.asarray(text_tokens, dtype=x.dtype))
        if text_tokens.ndim == 2:
            text_tokens = text_tokens.reshape(1, *text_tokens.shape)
        weights = dict.fromkeys(BLOCK_CATEGORIES, 0.0)
        if id_weights:
            unknown = set(id_weights) - set(BLOCK_CATEGORIES)
            if unknown:
                raise ValueError(f"unknown block categories {sorted(unknown)}")
            weights.update(id_weights)
        masks = id_masks or {}

        def run_attn(block: DecoupledAttentionBlock, h: Tensor) -> Tensor:
            return block(
                h,
                text_tokens,
                id_tokens,
                weights[block.category],
                masks.get(block.resolution),
                probe,
            )

        temb = self.time_embed(t, x.dtype)
        h = self.conv_in(x)
        skips = []
        levels = len(cfg.channel_mults)
        for i in range(levels):
            h = self.down_res[i](h, temb)
            if str(i) in self.down_attn:
                h = run_attn(self.down_attn[str(i)], h)
            skips.append(h)
            if i < levels - 1:
                h = self.downsamples[i](h)

        h = self.mid_res1(h, temb)
        h = run_attn(self.mid_attn, h)
        h = self.mid_res2(h, temb)

        for pos, i in enumerate(reversed(range(levels))):
            h = concat([h, skips[i]], axis=1)
            h = self.up_res[pos](h, temb)
            if str(i) in self.up_attn:
                h = run_attn(self.up_attn[str(i)], h)
            if i > 0:
                h = self.upsamples[pos](upsample_nearest(h))

        return self.conv_out(silu(self.norm_out(h)))
