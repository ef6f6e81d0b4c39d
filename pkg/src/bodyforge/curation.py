"""Paired-identity dataset curation.

Takes a manifest of individuals (each with several candidate photos plus face
embeddings) and keeps only individuals whose photos clearly show one person in
one outfit: a resolution gate, duplicate removal, facial-similarity filtering
against an anchor image, a VLM outfit-consistency check (pair probe, then
sliding windows), and finally captioning of the survivors. Every drop is
recorded with a rule id, and the report tallies per-rule counts, an
images-per-individual histogram, and optional body-part presence counts.

External models (face embedder, VLM) stay behind client interfaces; the
pipeline itself is deterministic given a manifest and scripted clients.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clients import ModelClient, TransportError
from .pngio import read_image, read_mask, read_parse_grid
from .regions import (
    REGION_CATEGORIES,
    ParseMap,
    RegionGrouping,
    bilinear_resize,
    decompose,
)

__all__ = [
    "PAIR_CHECK_PROMPT",
    "CAPTION_PROMPT",
    "CurationThresholds",
    "face_similarity",
    "select_anchor",
    "filter_by_anchor",
    "sliding_window_sets",
    "consistency_check",
    "caption_image",
    "average_hash",
    "hamming_distance",
    "curate",
]

PAIR_CHECK_PROMPT = "Are they wearing exactly the same clothes?"
CAPTION_PROMPT = (
    "Describe the image in detail in one sentence, focusing on facial expression, "
    "pose, actions, and surroundings."
)


@dataclass(frozen=True)
class CurationThresholds:
    face_sim_min: float = 0.5
    min_short_side: int = 1024
    window: int = 3
    stride: int = 2

    def __post_init__(self):
        if not -1.0 <= self.face_sim_min <= 1.0:
            raise ValueError(f"face_sim_min must be in [-1, 1], got {self.face_sim_min}")
        if self.min_short_side < 1:
            raise ValueError(f"min_short_side must be positive, got {self.min_short_side}")
        if self.window < 2:
            raise ValueError(f"window must be >= 2, got {self.window}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")


def _unit(vector: np.ndarray, name: str) -> np.ndarray:
    v = np.asarray(vector, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ValueError(f"{name} has zero norm")
    return v / norm


def face_similarity(e1: np.ndarray, e2: np.ndarray) -> float:
    """Cosine similarity between two face embeddings (normalized defensively)."""
    return float(np.dot(_unit(e1, "e1"), _unit(e2, "e2")))


def select_anchor(embeddings: list) -> int:
    """Index with the highest mean similarity to all others; ties go to the
    lowest index."""
    if len(embeddings) < 2:
        raise ValueError(f"need at least 2 embeddings, got {len(embeddings)}")
    unit = np.stack([_unit(e, f"embedding {i}") for i, e in enumerate(embeddings)])
    sims = unit @ unit.T
    # Summing the row and subtracting the diagonal would let self-similarity
    # rounding break exact ties, so the diagonal is zeroed before the sum.
    np.fill_diagonal(sims, 0.0)
    means = sims.sum(axis=1) / (len(embeddings) - 1)
    return int(np.argmax(means))


def filter_by_anchor(embeddings: list, anchor: int, face_sim_min: float) -> list[int]:
    """Indices whose similarity to the anchor clears the threshold. The anchor
    itself is always kept."""
    kept = []
    for i, e in enumerate(embeddings):
        if i == anchor or face_similarity(e, embeddings[anchor]) >= face_sim_min:
            kept.append(i)
    return kept


def sliding_window_sets(k: int, window: int = 3, stride: int = 2) -> list[list[int]]:
    """Overlapping index windows over ``range(k)``.

    Windows start at multiples of ``stride``; the last window may be shorter
    but never holds a single index: a leftover singleton is merged into the
    previous window instead.
    """
    if k < 2:
        raise ValueError(f"need at least 2 items, got {k}")
    windows: list[list[int]] = []
    for start in range(0, k, stride):
        indices = list(range(start, min(start + window, k)))
        if len(indices) == 1 and windows:
            if indices[0] not in windows[-1]:
                windows[-1].append(indices[0])
            break
        windows.append(indices)
        if indices[-1] == k - 1:
            break
    return windows


def _is_positive(response: str) -> bool:
    """Case-insensitive leading yes/no, falling back to a substring scan;
    anything unparseable counts as negative."""
    lowered = response.strip().lower()
    if lowered.startswith("yes"):
        return True
    if lowered.startswith("no"):
        return False
    has_yes = "yes" in lowered
    has_no = "no" in lowered
    if has_yes and not has_no:
        return True
    return False


def _consistency_verdict(image_paths: list, vlm: ModelClient, thresholds: CurationThresholds) -> tuple[bool, str | None]:
    """(passed, failure reason). Raises TransportError if the VLM stays down."""
    if len(image_paths) < 2:
        raise ValueError(f"need at least 2 images, got {len(image_paths)}")
    if not _is_positive(vlm.ask(PAIR_CHECK_PROMPT, image_paths[:2])):
        return False, "pair_fail"
    for window in sliding_window_sets(len(image_paths), thresholds.window, thresholds.stride):
        imgs = [image_paths[i] for i in window]
        if not _is_positive(vlm.ask(PAIR_CHECK_PROMPT, imgs)):
            return False, f"window_fail:{window[0]}"
    return True, None


def consistency_check(image_paths: list, vlm: ModelClient, thresholds: CurationThresholds) -> bool:
    """True iff the pair probe and every sliding window answer positive."""
    passed, _ = _consistency_verdict(image_paths, vlm, thresholds)
    return passed


def caption_image(path: str | Path, vlm: ModelClient) -> str:
    """One-sentence caption; empty string when the transport stays down."""
    try:
        return vlm.ask(CAPTION_PROMPT, [path])
    except TransportError:
        return ""


def average_hash(image: np.ndarray) -> int:
    """64-bit perceptual hash: grayscale, 8x8 bilinear shrink, mean threshold."""
    gray = np.asarray(image, dtype=np.float32)
    if gray.ndim == 3:
        gray = gray.mean(axis=2)
    small = bilinear_resize(gray, 8, 8)
    bits = (small > small.mean()).reshape(-1)
    value = 0
    for bit in bits:
        value = (value << 1) | int(bit)
    return value


def hamming_distance(a: int, b: int) -> int:
    return int(bin(a ^ b).count("1"))


def _dedup_members(members: list[dict]) -> tuple[list[int], list[int]]:
    """(kept indices, dropped indices): exact byte duplicates, then perceptual
    near-duplicates (Hamming <= 4 on the 64-bit average hash). First
    occurrence in manifest order wins."""
    kept: list[int] = []
    dropped: list[int] = []
    seen_bytes: set[bytes] = set()
    seen_hashes: list[int] = []
    for i, member in enumerate(members):
        path = Path(member["path"])
        try:
            raw = path.read_bytes()
        except OSError:
            raw = b""
        digest = raw
        if digest and digest in seen_bytes:
            dropped.append(i)
            continue
        try:
            ahash = average_hash(read_image(path))
        except Exception:
            ahash = None
        if ahash is not None and any(hamming_distance(ahash, h) <= 4 for h in seen_hashes):
            dropped.append(i)
            continue
        if digest:
            seen_bytes.add(digest)
        if ahash is not None:
            seen_hashes.append(ahash)
        kept.append(i)
    return kept, dropped


def _part_presence(member: dict, grouping_cache: dict) -> list[str] | None:
    parse_path = member.get("parse_path")
    mask_path = member.get("mask_path")
    scheme = member.get("label_scheme_id")
    if not (parse_path and mask_path and scheme):
        return None
    if scheme not in grouping_cache:
        grouping_cache[scheme] = RegionGrouping.builtin(scheme)
    grouping = grouping_cache[scheme]
    image = read_image(member["path"])
    parse = ParseMap(read_parse_grid(parse_path), scheme)
    mask = read_mask(mask_path)
    target = min(image.shape[0], 64)
    rs = decompose(image, parse, mask, grouping, target_size=(target, target))
    return [name for name, ok in zip(rs.region_names, rs.present) if ok]


def curate(
    manifest: dict,
    thresholds: CurationThresholds,
    vlm: ModelClient,
    max_in_flight: int = 4,
) -> tuple[dict, dict]:
    """Run the full pipeline over a manifest dict.

    Returns (curated manifest, report). Rules applied per individual, in
    order: ``min_short_side``, ``duplicate``, ``too_few_members`` (< 2),
    ``face_sim`` (anchor + threshold, then < 2 re-check), outfit consistency
    (``pair_fail``/``window_fail:<start>``/``unverified``), then captioning of
    kept members. Individuals are processed concurrently but merged in
    manifest order, so output bytes are reproducible.
    """
    if not isinstance(manifest, dict) or not isinstance(manifest.get("individuals"), list):
        raise ValueError("malformed manifest: expected {'individuals': [...]}")

    def process(individual: dict) -> dict:
        if not isinstance(individual, dict) or "id" not in individual or "images" not in individual:
            raise ValueError("malformed manifest: individual needs 'id' and 'images'")
        members = list(individual["images"])
        record = {
            "id": individual["id"],
            "verdict": "dropped",
            "reasons": [],
            "images": [],
        }
        ok = [
            m
            for m in members
            if min(int(m["width"]), int(m["height"])) >= thresholds.min_short_side
        ]
        if len(ok) < len(members):
            record["reasons"].append("min_short_side")
        if len(ok) < 2:
            record["reasons"].append("too_few_members")
            return record

        kept_idx, dup_idx = _dedup_members(ok)
        if dup_idx:
            record["reasons"].append("duplicate")
        ok = [ok[i] for i in kept_idx]
        if len(ok) < 2:
            record["reasons"].append("too_few_members")
            return record

        embeddings = [np.asarray(m["face_embedding"], dtype=np.float64) for m in ok]
        anchor = select_anchor(embeddings)
        kept = filter_by_anchor(embeddings, anchor, thresholds.face_sim_min)
        if len(kept) < len(ok):
            record["reasons"].append("face_sim")
        ok = [ok[i] for i in kept]
        if len(ok) < 2:
            record["reasons"].append("too_few_members")
            return record

        paths = [m["path"] for m in ok]
        try:
            passed, reason = _consistency_verdict(paths, vlm, thresholds)
        except TransportError:
            record["reasons"].append("unverified")
            return record
        if not passed:
            record["reasons"].append(reason)
            return record

        for m in ok:
            entry = dict(m)
            entry["caption"] = caption_image(m["path"], vlm)
            if entry["caption"] == "":
                entry["caption_failed"] = True
            record["images"].append(entry)
        record["verdict"] = "kept"
        return record

    individuals = manifest["individuals"]
    if max_in_flight > 1 and len(individuals) > 1:
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            records = list(pool.map(process, individuals))
    else:
        records = [process(ind) for ind in individuals]

    kept_records = [r for r in records if r["verdict"] == "kept"]
    histogram: dict[str, int] = {}
    for r in kept_records:
        key = str(len(r["images"]))
        histogram[key] = histogram.get(key, 0) + 1

    # A rule is counted once per individual it dropped images (or the whole
    # individual) from, whatever the final verdict.
    drop_counts: dict[str, int] = {}
    for r in records:
        for reason in r["reasons"]:
            drop_counts[reason] = drop_counts.get(reason, 0) + 1

    grouping_cache: dict = {}
    part_counts = {name: 0 for name in ("full_body",) + REGION_CATEGORIES}
    parse_seen = False
    for r in kept_records:
        for m in r["images"]:
            names = _part_presence(m, grouping_cache)
            if names is None:
                continue
            parse_seen = True
            for name in names:
                part_counts[name] += 1

    report = {
        "total_individuals": len(individuals),
        "kept_individuals": len(kept_records),
        "kept_images": sum(len(r["images"]) for r in kept_records),
        "drop_counts": dict(sorted(drop_counts.items())),
        "images_per_individual": dict(sorted(histogram.items())),
        "part_presence": part_counts if parse_seen else None,
        "skipped_rules": ["watermark", "face_detectability"] + ([] if parse_seen else ["part_presence"]),
    }
    curated = {
        "label_scheme_id": manifest.get("label_scheme_id"),
        "individuals": records,
    }
    return curated, report


def load_manifest(path: str | Path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as err:
            raise ValueError(f"{path}: malformed manifest JSON: {err}") from err


def save_json(path: str | Path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
