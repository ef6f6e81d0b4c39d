"""Brute-force reference for the curation pipeline, plus a pool generator.

The reference re-derives every verdict from first principles: exhaustive
pairwise similarity averages for the anchor, a direct threshold scan, and a
window enumeration written as "all stride-aligned windows, drop those
contained in the previous one, merge a trailing singleton" rather than the
production early-exit loop. The generator fabricates individuals whose VLM
behaviour is scripted per member marker, so both pipelines face identical
inputs.
"""

from pathlib import Path

import numpy as np

CAPTION_TEXT = "A person standing."
YES_TEXT = "Yes, the outfits match."
NO_TEXT = "No, different outfits."


def ref_windows(k, window=3, stride=2):
    starts = list(range(0, k, stride))
    raw = [list(range(s, min(s + window, k))) for s in starts]
    out = []
    for w in raw:
        if out and set(w) <= set(out[-1]):
            continue
        out.append(w)
    merged = []
    for w in out:
        if len(w) == 1:
            merged[-1] = merged[-1] + w
        else:
            merged.append(w)
    return merged


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def ref_anchor(embeddings):
    unit = [_unit(e) for e in embeddings]
    n = len(unit)
    means = [
        float(np.mean([unit[i] @ unit[j] for j in range(n) if j != i]))
        for i in range(n)
    ]
    return int(np.argmax(means))


def build_pool(root, count, seed, min_side=64):
    """Write a synthetic manifest of ``count`` individuals under ``root``.

    Returns (manifest, script, behaviours). ``behaviours`` maps individual id
    to {"bad_path": path answering no, or None; "unverifiable": bool} and is
    what the reference pipeline consults instead of a VLM.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    rules = [{"prompt_contains": "Describe the image", "response": CAPTION_TEXT}]
    individuals = []
    behaviours = {}
    for i in range(count):
        ident = f"person{i:03d}"
        n = int(rng.integers(2, 7))
        base = _unit(rng.normal(size=8))
        roll = float(rng.random())
        unverifiable = roll < 0.05
        inconsistent = None if unverifiable else (int(rng.integers(0, n)) if roll < 0.35 else None)
        members = []
        for k in range(n):
            marker = f"|{ident}_m{k:02d}|"
            path = root / f"{ident}_m{k:02d}.img"
            path.write_bytes(f"synthetic image {marker} payload".encode())
            if unverifiable:
                emb, short = _unit(base + 0.1 * rng.normal(size=8)), min_side
            else:
                outlier = rng.random() < 0.2
                emb = _unit(rng.normal(size=8)) if outlier else _unit(base + 0.1 * rng.normal(size=8))
                short = int(rng.integers(1, min_side)) if rng.random() < 0.15 else min_side
            members.append(
                {
                    "path": str(path),
                    "width": int(short),
                    "height": int(2 * min_side),
                    "face_embedding": emb.tolist(),
                    "marker": marker,
                }
            )
        bad_path = None
        if unverifiable:
            rules.append(
                {"prompt_contains": "same clothes", "image_contains": members[0]["marker"], "fail": True}
            )
        elif inconsistent is not None:
            bad_path = members[inconsistent]["path"]
            rules.append(
                {
                    "prompt_contains": "same clothes",
                    "image_contains": members[inconsistent]["marker"],
                    "response": NO_TEXT,
                }
            )
        behaviours[ident] = {"bad_path": bad_path, "unverifiable": unverifiable}
        individuals.append({"id": ident, "images": members})
    manifest = {"individuals": individuals}
    script = {"rules": rules, "default": YES_TEXT}
    return manifest, script, behaviours


def reference_curate(manifest, thresholds, behaviours):
    """Independent re-derivation of curate()'s per-individual records."""
    records = []
    for ind in manifest["individuals"]:
        ident = ind["id"]
        reasons = []
        record = {"id": ident, "verdict": "dropped", "reasons": reasons, "images": []}
        records.append(record)
        ok = [
            m
            for m in ind["images"]
            if min(int(m["width"]), int(m["height"])) >= thresholds.min_short_side
        ]
        if len(ok) < len(ind["images"]):
            reasons.append("min_short_side")
        if len(ok) < 2:
            reasons.append("too_few_members")
            continue

        unit = [_unit(m["face_embedding"]) for m in ok]
        anchor = ref_anchor(unit)
        kept = [
            i
            for i in range(len(ok))
            if i == anchor or float(unit[i] @ unit[anchor]) >= thresholds.face_sim_min
        ]
        if len(kept) < len(ok):
            reasons.append("face_sim")
        ok = [ok[i] for i in kept]
        if len(ok) < 2:
            reasons.append("too_few_members")
            continue

        behaviour = behaviours[ident]
        if behaviour["unverifiable"]:
            reasons.append("unverified")
            continue
        paths = [m["path"] for m in ok]
        bad = behaviour["bad_path"]
        pos = paths.index(bad) if bad in paths else None
        if pos is not None and pos < 2:
            reasons.append("pair_fail")
            continue
        if pos is not None:
            failed = None
            for w in ref_windows(len(paths), thresholds.window, thresholds.stride):
                if pos in w:
                    failed = w[0]
                    break
            if failed is not None:
                reasons.append(f"window_fail:{failed}")
                continue

        record["verdict"] = "kept"
        for m in ok:
            entry = dict(m)
            entry["caption"] = CAPTION_TEXT
            record["images"].append(entry)
    return records
