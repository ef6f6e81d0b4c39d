"""Body-region decomposition.

A parsed person image is split into one foreground-masked full-body view plus
four part crops (face, torso, legs, shoes). Part membership comes from a
label-scheme-specific grouping table shipped as editable JSON, so new parse
vocabularies only need a data file. Crops are squared with symmetric zero
padding (any odd pixel trails) and bilinearly resized to a shared target size.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

__all__ = [
    "REGION_CATEGORIES",
    "REGION_NAMES",
    "NUM_REGIONS",
    "UnknownLabelError",
    "RegionGrouping",
    "ParseMap",
    "BodyRegionSet",
    "apply_foreground_mask",
    "region_bbox",
    "bilinear_resize",
    "crop_pad_resize",
    "decompose",
]

REGION_CATEGORIES = ("face", "torso", "legs", "shoes")
REGION_NAMES = ("full_body",) + REGION_CATEGORIES
NUM_REGIONS = len(REGION_NAMES)

_VALID_CATEGORIES = ("none",) + REGION_CATEGORIES


class UnknownLabelError(ValueError):
    """A parse map contains a label the grouping table does not cover."""


@dataclass(frozen=True)
class RegionGrouping:
    """Maps integer parse labels to part categories (or 'none' for background)."""

    label_scheme_id: str
    category_by_label: dict[int, str]
    name_by_label: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        for label, cat in self.category_by_label.items():
            if cat not in _VALID_CATEGORIES:
                raise ValueError(f"label {label}: unknown category {cat!r}")

    @classmethod
    def from_json(cls, path: str | Path) -> "RegionGrouping":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls._from_dict(raw, source=str(path))

    @classmethod
    def builtin(cls, label_scheme_id: str) -> "RegionGrouping":
        """Load one of the groupings shipped with the package."""
        ref = resources.files("bodyforge").joinpath(f"data/grouping_{label_scheme_id}.json")
        try:
            raw = json.loads(ref.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ValueError(f"no builtin grouping for label scheme {label_scheme_id!r}") from None
        return cls._from_dict(raw, source=str(ref))

    @classmethod
    def _from_dict(cls, raw: dict, source: str) -> "RegionGrouping":
        try:
            scheme = raw["label_scheme_id"]
            labels = raw["labels"]
        except (KeyError, TypeError) as err:
            raise ValueError(f"{source}: malformed grouping file: {err}") from err
        cats = {int(k): v["category"] for k, v in labels.items()}
        names = {int(k): v.get("name", "") for k, v in labels.items()}
        return cls(scheme, cats, names)

    def validate_grid(self, grid: np.ndarray) -> None:
        present = np.unique(grid)
        known = np.fromiter(self.category_by_label, dtype=np.int64) if self.category_by_label else np.empty(0, np.int64)
        unknown = sorted(set(present.tolist()) - set(known.tolist()))
        if unknown:
            raise UnknownLabelError(
                f"labels {unknown} not in grouping for scheme {self.label_scheme_id!r}"
            )

    def category_mask(self, grid: np.ndarray, category: str) -> np.ndarray:
        """Boolean mask of grid cells whose label belongs to ``category``."""
        if category not in REGION_CATEGORIES:
            raise ValueError(f"unknown part category {category!r}")
        self.validate_grid(grid)
        wanted = [label for label, cat in self.category_by_label.items() if cat == category]
        return np.isin(grid, wanted)


@dataclass
class ParseMap:
    """Per-pixel integer labels for one image."""

    grid: np.ndarray
    label_scheme_id: str

    def __post_init__(self):
        self.grid = np.asarray(self.grid)
        if self.grid.ndim != 2:
            raise ValueError(f"parse grid must be 2-D, got shape {self.grid.shape}")
        if not np.issubdtype(self.grid.dtype, np.integer):
            raise ValueError(f"parse grid must be integer, got {self.grid.dtype}")


@dataclass
class BodyRegionSet:
    """The decomposed views of one person image.

    ``regions[0]`` is the foreground-masked full image; the rest follow
    ``REGION_NAMES``. ``present[i]`` is False when a part had no foreground
    pixels (its slot is all zeros). ``bboxes`` holds half-open
    (x0, y0, x1, y1) source boxes, None for absent parts.
    """

    regions: np.ndarray
    present: np.ndarray
    bboxes: list

    region_names = REGION_NAMES

    def present_names(self) -> list[str]:
        return [name for name, ok in zip(REGION_NAMES, self.present) if ok]


def apply_foreground_mask(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero out background pixels. ``mask`` is (H, W) with nonzero = keep."""
    image = np.asarray(image, dtype=np.float32)
    mask = np.asarray(mask)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"image must be (H, W, 3), got {image.shape}")
    if mask.shape != image.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} != image plane {image.shape[:2]}")
    return image * (mask > 0).astype(np.float32)[:, :, None]


def _mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    rows = np.any(mask, axis=1)
    cols = np.any(mask, axis=0)
    if not rows.any():
        return None
    y_idx = np.nonzero(rows)[0]
    x_idx = np.nonzero(cols)[0]
    return int(x_idx[0]), int(y_idx[0]), int(x_idx[-1]) + 1, int(y_idx[-1]) + 1


def region_bbox(parse: ParseMap, grouping: RegionGrouping, category: str) -> tuple[int, int, int, int] | None:
    """Half-open (x0, y0, x1, y1) box around a part, None when absent."""
    if parse.label_scheme_id != grouping.label_scheme_id:
        raise ValueError(
            f"parse scheme {parse.label_scheme_id!r} != grouping scheme {grouping.label_scheme_id!r}"
        )
    return _mask_bbox(grouping.category_mask(parse.grid, category))


def bilinear_resize(image: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel-centered coordinates."""
    image = np.asarray(image, dtype=np.float32)
    h, w = image.shape[:2]
    if target_h < 1 or target_w < 1:
        raise ValueError(f"target size must be positive, got {target_h}x{target_w}")
    if (h, w) == (target_h, target_w):
        return image.copy()
    ys = (np.arange(target_h, dtype=np.float64) + 0.5) * (h / target_h) - 0.5
    xs = (np.arange(target_w, dtype=np.float64) + 0.5) * (w / target_w) - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).astype(np.float32)[:, None]
    fx = (xs - x0).astype(np.float32)[None, :]
    if image.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]
    top = image[y0][:, x0] * (1.0 - fx) + image[y0][:, x1] * fx
    bot = image[y1][:, x0] * (1.0 - fx) + image[y1][:, x1] * fx
    return (top * (1.0 - fy) + bot * fy).astype(np.float32)


def crop_pad_resize(image: np.ndarray, bbox: tuple[int, int, int, int], target_h: int, target_w: int) -> np.ndarray:
    """Crop a half-open box, zero-pad to square (odd pixel trails), resize."""
    x0, y0, x1, y1 = bbox
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"empty bbox {bbox}")
    crop = np.asarray(image, dtype=np.float32)[y0:y1, x0:x1]
    h, w = crop.shape[:2]
    side = max(h, w)
    pad_y = side - h
    pad_x = side - w
    pads = ((pad_y // 2, pad_y - pad_y // 2), (pad_x // 2, pad_x - pad_x // 2))
    if crop.ndim == 3:
        pads = pads + ((0, 0),)
    padded = np.pad(crop, pads)
    return bilinear_resize(padded, target_h, target_w)


def decompose(
    image: np.ndarray,
    parse: ParseMap,
    fg_mask: np.ndarray,
    grouping: RegionGrouping,
    target_size: tuple[int, int] = (64, 64),
) -> BodyRegionSet:
    """Produce the five-region view of one parsed image.

    Part crops are taken from the foreground-masked image inside the part's
    bounding box, so dropping the mask to all-zero blacks out every region
    and marks all parts absent.
    """
    image = np.asarray(image, dtype=np.float32)
    if parse.grid.shape != image.shape[:2]:
        raise ValueError(f"parse grid {parse.grid.shape} != image plane {image.shape[:2]}")
    grouping.validate_grid(parse.grid)
    th, tw = target_size
    masked = apply_foreground_mask(image, fg_mask)
    fg = np.asarray(fg_mask) > 0

    regions = np.zeros((NUM_REGIONS, th, tw, 3), dtype=np.float32)
    present = np.zeros(NUM_REGIONS, dtype=bool)
    h, w = image.shape[:2]
    full_box = (0, 0, w, h)
    bboxes: list = [full_box]
    regions[0] = crop_pad_resize(masked, full_box, th, tw)
    present[0] = bool(fg.any())

    for i, category in enumerate(REGION_CATEGORIES, start=1):
        part = grouping.category_mask(parse.grid, category) & fg
        box = _mask_bbox(part)
        bboxes.append(box)
        if box is None:
            continue
        regions[i] = crop_pad_resize(masked, box, th, tw)
        present[i] = True

    return BodyRegionSet(regions=regions, present=present, bboxes=bboxes)
