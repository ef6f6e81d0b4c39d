"""Frozen feature extractors: a small patch transformer for region images and
a deterministic hash-based text embedder.

Both stand in for large pretrained encoders. The patch encoder is a
pre-norm transformer over non-overlapping patches (no class token; the output
is the final-block token grid). The text embedder derives each token's vector
from a blake2b hash of the token string, so it needs no vocabulary file and
is bit-stable across runs; sinusoidal position terms are added to real tokens
only, and pad rows stay all-zero.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import nn
from .tensor import Tensor

__all__ = [
    "PatchEncoderConfig",
    "PatchEncoder",
    "TextEmbedderConfig",
    "TextEmbedding",
    "encode_text",
    "sinusoidal_embedding",
]


@dataclass(frozen=True)
class PatchEncoderConfig:
    image_size: int = 64
    patch_size: int = 16
    dim: int = 32
    depth: int = 2
    num_heads: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.dim % self.num_heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.num_heads}")

    @property
    def tokens_per_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.tokens_per_side ** 2


def sinusoidal_embedding(positions: np.ndarray, dim: int) -> np.ndarray:
    """Classic sin/cos position code, shape (len(positions), dim)."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / max(half, 1))
    angles = positions[:, None] * freqs[None, :]
    out = np.zeros((positions.size, dim), dtype=np.float32)
    out[:, :half] = np.sin(angles)
    out[:, half : 2 * half] = np.cos(angles)
    return out


class _EncoderBlock(nn.Module):
    def __init__(self, cfg: PatchEncoderConfig, rng: np.random.Generator, dtype):
        self.norm1 = nn.LayerNorm(cfg.dim, dtype=dtype)
        self.attn = nn.MultiheadAttention(cfg.dim, cfg.dim, cfg.dim, cfg.num_heads, rng, dtype=dtype)
        self.norm2 = nn.LayerNorm(cfg.dim, dtype=dtype)
        self.ff = nn.FeedForward(cfg.dim, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = self.attn(h, h, h) + x
        return self.ff(self.norm2(x)) + x


class PatchEncoder(nn.Module):
    """Patch-token transformer encoder, frozen at construction.

    Owners never train this: it plays the role of a fixed pretrained backbone,
    and freezing here keeps its parameters out of every optimizer by default.
    """

    def __init__(self, config: PatchEncoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        patch_dim = config.patch_size * config.patch_size * 3
        self.patch_proj = nn.Linear(patch_dim, config.dim, rng, dtype=dtype)
        self.pos = nn.Parameter(nn.normal_init(rng, (config.num_tokens, config.dim), dtype=dtype))
        self.blocks = [_EncoderBlock(config, rng, dtype) for _ in range(config.depth)]
        self.final_norm = nn.LayerNorm(config.dim, dtype=dtype)
        self.set_frozen(True)

    def patchify(self, images: np.ndarray) -> np.ndarray:
        """(B, H, W, 3) -> (B, tokens, patch*patch*3), patches in row-major order."""
        images = np.asarray(images, dtype=np.float32)
        if images.ndim == 3:
            images = images[None]
        b, h, w, c = images.shape
        p = self.config.patch_size
        if (h, w) != (self.config.image_size, self.config.image_size):
            raise ValueError(f"expected {self.config.image_size}px square images, got {h}x{w}")
        side = h // p
        x = images.reshape(b, side, p, side, p, c)
        x = x.transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(b, side * side, p * p * c)

    def forward(self, images: np.ndarray) -> Tensor:
        """Encode (B, H, W, 3) images to (B, tokens, dim) feature tokens."""
        tokens = Tensor(self.patchify(images))
        x = self.patch_proj(tokens) + self.pos.tensor
        for block in self.blocks:
            x = block(x)
        return self.final_norm(x)

    def encode(self, images: np.ndarray) -> np.ndarray:
        """Frozen-feature convenience: numpy in, numpy out."""
        return self.forward(images).data


@dataclass(frozen=True)
class TextEmbedderConfig:
    max_tokens: int = 16
    dim: int = 32

    def __post_init__(self):
        if self.max_tokens < 1 or self.dim < 2:
            raise ValueError(f"bad text embedder size: {self.max_tokens} tokens, dim {self.dim}")


@dataclass
class TextEmbedding:
    """Fixed-length token matrix for one prompt. Rows past ``num_tokens`` are
    zero pad."""

    vectors: np.ndarray
    prompt: str
    num_tokens: int


def _token_vector(token: str, dim: int) -> np.ndarray:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    seed = int.from_bytes(digest, "little")
    return np.random.default_rng(seed).standard_normal(dim).astype(np.float32)


def encode_text(prompt: str, config: TextEmbedderConfig) -> TextEmbedding:
    """Whitespace-tokenize and embed a prompt; truncates past ``max_tokens``."""
    tokens = prompt.split()[: config.max_tokens]
    vectors = np.zeros((config.max_tokens, config.dim), dtype=np.float32)
    if tokens:
        positions = sinusoidal_embedding(np.arange(len(tokens)), config.dim)
        for i, token in enumerate(tokens):
            vectors[i] = _token_vector(token, config.dim) + positions[i]
    return TextEmbedding(vectors=vectors, prompt=prompt, num_tokens=len(tokens))
