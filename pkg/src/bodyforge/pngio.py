"""PNG reading and writing for images, binary masks, and parse maps.

Images are float32 (H, W, 3) in [0, 1] in memory and 8-bit RGB on disk.
Parse maps are stored as 8-bit grayscale PNGs holding raw label integers.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

__all__ = ["read_image", "write_image", "read_mask", "write_mask", "read_parse_grid", "write_parse_grid"]


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        return np.asarray(rgb, dtype=np.float32) / 255.0


def write_image(path: str | Path, image: np.ndarray) -> None:
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {arr.shape}")
    quantized = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(quantized, mode="RGB").save(path, format="PNG")


def read_mask(path: str | Path) -> np.ndarray:
    """Binary (H, W) uint8 mask; any pixel above half intensity counts."""
    with Image.open(path) as im:
        gray = np.asarray(im.convert("L"))
    return (gray > 127).astype(np.uint8)


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    arr = (np.asarray(mask) > 0).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def read_parse_grid(path: str | Path) -> np.ndarray:
    """Label grid stored as raw 8-bit grayscale values."""
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            im = im.convert("L")
        return np.asarray(im, dtype=np.int32)


def write_parse_grid(path: str | Path, grid: np.ndarray) -> None:
    arr = np.asarray(grid)
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError(f"labels out of 8-bit range: [{arr.min()}, {arr.max()}]")
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path, format="PNG")
