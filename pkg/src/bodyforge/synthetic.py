"""Procedural figure dataset for desk-scale experiments.

Each identity is a stack of four colored rectangles (head, torso, legs,
shoes) whose colors are fixed per identity, rendered several times at
different horizontal positions against different solid backgrounds. Every
render ships with a ground-truth parse grid and foreground mask, and captions
are templated from the pose/background parameters only, so part colors can
reach a generator solely through the identity branch.

The module also carries the measurement side: recovering part colors from a
generated image by band-splitting its foreground rows (no parse map needed),
an identity proxy metric (mean per-part RGB error), and a caption-match proxy
(background + position recovered from pixels).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .curation import save_json
from .pngio import write_image, write_mask, write_parse_grid
from .regions import REGION_CATEGORIES

__all__ = [
    "SyntheticIdentitySpec",
    "render_figure",
    "gen_synthetic",
    "estimate_background",
    "estimate_part_colors",
    "identity_color_error",
    "caption_match",
]

LABEL_SCHEME = "synthetic5"

# Vertical band (start, end) per part as fractions of image height; the
# figure spans rows [0.05, 0.95) so jitter up to round(0.05 * size) pixels
# can never push a band off the canvas.
BAND_FRACS = {
    "face": (0.05, 0.25),
    "torso": (0.25, 0.55),
    "legs": (0.55, 0.85),
    "shoes": (0.85, 0.95),
}
WIDTH_FRACS = {"face": 0.20, "torso": 0.34, "legs": 0.20, "shoes": 0.26}
ANCHORS = {"left": 0.30, "center": 0.50, "right": 0.70}
POSITIONS = tuple(ANCHORS)

_FIG_TOP = BAND_FRACS["face"][0]
_FIG_SPAN = BAND_FRACS["shoes"][1] - _FIG_TOP


def _c(*values):
    return tuple(v / 255.0 for v in values)


DEFAULT_PART_PALETTES = {
    "face": (_c(204, 26, 26), _c(230, 115, 26), _c(128, 26, 179), _c(26, 153, 153), _c(26, 51, 153), _c(128, 128, 26)),
    "torso": (_c(26, 77, 204), _c(26, 153, 51), _c(179, 26, 51), _c(102, 26, 204), _c(128, 77, 26), _c(26, 26, 26)),
    "legs": (_c(26, 26, 102), _c(77, 77, 77), _c(26, 77, 26), _c(102, 26, 26), _c(51, 26, 128), _c(38, 38, 38)),
    "shoes": (_c(13, 13, 13), _c(153, 26, 26), _c(26, 26, 153), _c(102, 51, 26), _c(204, 204, 26)),
}

DEFAULT_BACKGROUNDS = (
    ("white", _c(240, 240, 240)),
    ("gray", _c(204, 204, 204)),
    ("sky", _c(191, 217, 242)),
    ("mint", _c(204, 230, 204)),
    ("sand", _c(230, 217, 191)),
)


@dataclass(frozen=True)
class SyntheticIdentitySpec:
    image_size: int = 32
    images_per_identity: int = 2
    jitter: int = 1
    palettes: dict = field(default_factory=lambda: dict(DEFAULT_PART_PALETTES))
    backgrounds: tuple = DEFAULT_BACKGROUNDS

    def __post_init__(self):
        if self.image_size < 16:
            raise ValueError(f"image_size must be >= 16, got {self.image_size}")
        limit = min(len(POSITIONS), len(self.backgrounds))
        if not 1 <= self.images_per_identity <= limit:
            raise ValueError(
                f"images_per_identity must be in [1, {limit}] so positions and "
                f"backgrounds can be drawn without replacement, got {self.images_per_identity}"
            )
        margin = int(np.rint(_FIG_TOP * self.image_size))
        if not 0 <= self.jitter <= margin:
            raise ValueError(f"jitter must be in [0, {margin}] at size {self.image_size}")
        missing = set(REGION_CATEGORIES) - set(self.palettes)
        if missing or any(not self.palettes[p] for p in REGION_CATEGORIES):
            raise ValueError(f"palettes must cover every part non-emptily, missing {sorted(missing)}")


def render_figure(
    spec: SyntheticIdentitySpec,
    part_colors: dict,
    position: str,
    background: tuple,
    jitter_xy: tuple = (0, 0),
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(image, parse grid, mask) for one pose of one identity."""
    size = spec.image_size
    dy, dx = jitter_xy
    image = np.empty((size, size, 3), dtype=np.float32)
    image[:] = np.asarray(background, dtype=np.float32)
    grid = np.zeros((size, size), dtype=np.int32)
    anchor = int(np.rint(ANCHORS[position] * size)) + int(dx)
    for label, part in enumerate(REGION_CATEGORIES, start=1):
        f0, f1 = BAND_FRACS[part]
        r0 = max(int(np.rint(f0 * size)) + int(dy), 0)
        r1 = min(int(np.rint(f1 * size)) + int(dy), size)
        width = max(int(np.rint(WIDTH_FRACS[part] * size)), 2)
        c0 = max(anchor - width // 2, 0)
        c1 = min(c0 + width, size)
        image[r0:r1, c0:c1] = np.asarray(part_colors[part], dtype=np.float32)
        grid[r0:r1, c0:c1] = label
    return image, grid, (grid > 0).astype(np.uint8)


def _face_embedding(part_colors: dict, rng: np.random.Generator) -> list:
    flat = np.array(
        list(part_colors["face"]) + list(part_colors["torso"])
        + [part_colors["legs"][0], part_colors["shoes"][0]],
        dtype=np.float64,
    )
    flat = flat + 0.01 * rng.standard_normal(flat.size)
    return (flat / np.linalg.norm(flat)).tolist()


def gen_synthetic(
    spec: SyntheticIdentitySpec,
    n_identities: int,
    seed: int,
    out_dir: str | Path,
) -> dict:
    """Render ``n_identities`` figures into ``out_dir`` and write
    ``manifest.json``. Identical inputs produce identical bytes."""
    if n_identities < 1:
        raise ValueError(f"need at least one identity, got {n_identities}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    individuals = []
    for i in range(n_identities):
        ident = f"identity{i:03d}"
        part_colors = {
            part: list(spec.palettes[part][int(rng.integers(len(spec.palettes[part])))])
            for part in REGION_CATEGORIES
        }
        positions = [POSITIONS[j] for j in rng.choice(len(POSITIONS), spec.images_per_identity, replace=False)]
        bg_picks = [spec.backgrounds[j] for j in rng.choice(len(spec.backgrounds), spec.images_per_identity, replace=False)]
        jitters = rng.integers(-spec.jitter, spec.jitter + 1, size=(spec.images_per_identity, 2))
        images = []
        for k in range(spec.images_per_identity):
            position, (bg_name, bg_rgb) = positions[k], bg_picks[k]
            image, grid, mask = render_figure(spec, part_colors, position, bg_rgb, tuple(jitters[k]))
            stem = f"{ident}_{k}"
            write_image(out_dir / f"{stem}.png", image)
            write_parse_grid(out_dir / f"{stem}_parse.png", grid)
            write_mask(out_dir / f"{stem}_mask.png", mask)
            images.append(
                {
                    "path": str(out_dir / f"{stem}.png"),
                    "parse_path": str(out_dir / f"{stem}_parse.png"),
                    "mask_path": str(out_dir / f"{stem}_mask.png"),
                    "width": spec.image_size,
                    "height": spec.image_size,
                    "label_scheme_id": LABEL_SCHEME,
                    "face_embedding": _face_embedding(part_colors, rng),
                    "caption": f"a person at the {position} of the frame in front of a {bg_name} background",
                    "caption_params": {"position": position, "background": bg_name},
                }
            )
        individuals.append({"id": ident, "part_colors": part_colors, "images": images})
    manifest = {
        "label_scheme_id": LABEL_SCHEME,
        "image_size": spec.image_size,
        "individuals": individuals,
    }
    save_json(out_dir / "manifest.json", manifest)
    return manifest


def estimate_background(image: np.ndarray) -> np.ndarray:
    """Median color of the one-pixel border ring."""
    image = np.asarray(image, dtype=np.float32)
    ring = np.concatenate(
        [image[0], image[-1], image[1:-1, 0], image[1:-1, -1]], axis=0
    )
    return np.median(ring, axis=0)


def _foreground(image: np.ndarray, bg: np.ndarray, threshold: float) -> np.ndarray:
    dist = np.linalg.norm(image - bg.reshape(1, 1, 3), axis=2)
    return dist > threshold


def estimate_part_colors(
    image: np.ndarray,
    fg_threshold: float = 0.2,
    trim: float = 0.15,
) -> dict:
    """Recover per-part mean colors from pixels alone.

    The foreground row extent is split into the generator's band proportions;
    ``trim`` shaves each band's edges before averaging so slightly blurry
    boundaries do not bleed between parts. Parts whose band holds no
    foreground fall back to the background estimate.
    """
    image = np.asarray(image, dtype=np.float32)
    bg = estimate_background(image)
    fg = _foreground(image, bg, fg_threshold)
    rows = np.where(fg.any(axis=1))[0]
    estimates = {"background": bg}
    if rows.size == 0:
        for part in REGION_CATEGORIES:
            estimates[part] = bg.copy()
        return estimates
    rmin, height = int(rows[0]), int(rows[-1]) + 1 - int(rows[0])
    for part in REGION_CATEGORIES:
        f0, f1 = BAND_FRACS[part]
        a = rmin + (f0 - _FIG_TOP) / _FIG_SPAN * height
        b = rmin + (f1 - _FIG_TOP) / _FIG_SPAN * height
        pad = trim * (b - a)
        for lo, hi in ((a + pad, b - pad), (a, b)):
            r0, r1 = int(math.ceil(lo)), int(math.floor(hi))
            band = fg[r0:r1]
            if band.any():
                estimates[part] = image[r0:r1][band].mean(axis=0)
                break
        else:
            estimates[part] = bg.copy()
    return estimates


def identity_color_error(image: np.ndarray, part_colors: dict, fg_threshold: float = 0.2) -> float:
    """Mean L2 distance between recovered and true part colors."""
    estimates = estimate_part_colors(image, fg_threshold=fg_threshold)
    errors = [
        float(np.linalg.norm(estimates[part] - np.asarray(part_colors[part], dtype=np.float32)))
        for part in REGION_CATEGORIES
    ]
    return float(np.mean(errors))


def caption_match(image: np.ndarray, caption_params: dict, spec: SyntheticIdentitySpec) -> float:
    """Fraction of caption parameters (background, position) the image
    realises; 0, 0.5, or 1."""
    image = np.asarray(image, dtype=np.float32)
    bg = estimate_background(image)
    names = [name for name, _ in spec.backgrounds]
    dists = [np.linalg.norm(bg - np.asarray(rgb)) for _, rgb in spec.backgrounds]
    bg_ok = names[int(np.argmin(dists))] == caption_params["background"]

    fg = _foreground(image, bg, 0.2)
    cols = np.where(fg.any(axis=0))[0]
    if cols.size == 0:
        return 0.5 if bg_ok else 0.0
    center = (int(cols[0]) + int(cols[-1]) + 1) / 2 / image.shape[1]
    nearest = min(ANCHORS, key=lambda name: abs(ANCHORS[name] - center))
    return (float(bg_ok) + float(nearest == caption_params["position"])) / 2
