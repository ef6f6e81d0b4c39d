"""Grading harness for generated images.

Two external-grader metrics (identity preservation and prompt alignment, each
an integer 0..9 parsed out of free-text replies), their per-sample harmonic
mean, and the human-study arithmetic (semantic consistency as a minimum,
overall as a geometric mean). ``evaluate_manifest`` drives a whole manifest
through a grader client and writes per-sample JSONL, an aggregate CSV, and
verbatim grader transcripts; rows are ordered by sample id so reruns are
byte-identical.
"""

from __future__ import annotations

import csv
import importlib.resources
import json
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .clients import ModelClient, TransportError, image_part_from_file, text_part

__all__ = [
    "ScoreTemplates",
    "SampleScore",
    "parse_score",
    "grade_identity",
    "grade_text",
    "harmonic_mean",
    "sc_combine",
    "overall",
    "aggregate",
    "evaluate_manifest",
]

PROMPT_SLOT = "{prompt}"
TEMPLATE_NAMES = ("identity_user", "identity_assistant", "text_user", "text_assistant")

# A score digit counts only when it is not part of a longer number ("10",
# "7.5"), so "Score: 9." parses and "rated 10/10" does not.
_SCORE_RE = re.compile(r"(?<![\d.])(\d)(?!\d|\.\d)")


@dataclass(frozen=True)
class ScoreTemplates:
    """The four editable prompt assets: a user + assistant pair per metric."""

    identity_user: str
    identity_assistant: str
    text_user: str
    text_assistant: str

    def __post_init__(self):
        if PROMPT_SLOT not in self.text_user:
            raise ValueError(f"text_user template must contain the {PROMPT_SLOT} slot")

    @classmethod
    def load(cls, directory: str | Path) -> "ScoreTemplates":
        directory = Path(directory)
        texts = {}
        for name in TEMPLATE_NAMES:
            path = directory / f"{name}.txt"
            if not path.is_file():
                raise FileNotFoundError(f"missing template {path}")
            texts[name] = path.read_text(encoding="utf-8")
        return cls(**texts)

    @classmethod
    def default(cls) -> "ScoreTemplates":
        root = importlib.resources.files("bodyforge") / "templates"
        texts = {name: (root / f"{name}.txt").read_text(encoding="utf-8") for name in TEMPLATE_NAMES}
        return cls(**texts)


def parse_score(response: str) -> int | None:
    """First standalone integer 0..9 in the response, or None."""
    match = _SCORE_RE.search(response)
    return int(match.group(1)) if match else None


def _grade(
    user_text: str,
    assistant_text: str,
    image_paths: list,
    grader: ModelClient,
) -> tuple[int | None, list[str]]:
    """(score, verbatim responses). One retry on an unparseable reply; a
    transport that stays down is recorded as a bracketed marker line."""
    content = [text_part(user_text)] + [image_part_from_file(p) for p in image_paths]
    messages = [
        {"role": "user", "content": content},
        {"role": "assistant", "content": [text_part(assistant_text)]},
    ]
    responses: list[str] = []
    for _ in range(2):
        try:
            reply = grader.ask_messages(messages)
        except TransportError as err:
            responses.append(f"[transport failure: {err}]")
            return None, responses
        responses.append(reply)
        score = parse_score(reply)
        if score is not None:
            return score, responses
    return None, responses


def grade_identity(
    input_path: str | Path,
    generated_path: str | Path,
    grader: ModelClient,
    templates: ScoreTemplates,
) -> tuple[int | None, list[str]]:
    """Score identity preservation of ``generated_path`` against the
    reference image."""
    return _grade(
        templates.identity_user,
        templates.identity_assistant,
        [input_path, generated_path],
        grader,
    )


def grade_text(
    prompt: str,
    generated_path: str | Path,
    grader: ModelClient,
    templates: ScoreTemplates,
) -> tuple[int | None, list[str]]:
    """Score prompt alignment of ``generated_path`` against ``prompt``."""
    return _grade(
        templates.text_user.replace(PROMPT_SLOT, prompt),
        templates.text_assistant,
        [generated_path],
        grader,
    )


def harmonic_mean(d_i: float, d_t: float) -> float:
    if d_i < 0 or d_t < 0:
        raise ValueError(f"scores must be non-negative, got ({d_i}, {d_t})")
    if d_i == 0 and d_t == 0:
        return 0.0
    return 2.0 * d_i * d_t / (d_i + d_t)


_LEVELS = (0.0, 0.5, 1.0)


def _check_level(value: float, name: str) -> float:
    if value not in _LEVELS:
        raise ValueError(f"{name} must be one of {_LEVELS}, got {value}")
    return float(value)


def sc_combine(identity_alignment: float, text_alignment: float) -> float:
    """Semantic consistency: the lower of the two condition ratings."""
    return min(_check_level(identity_alignment, "identity_alignment"),
               _check_level(text_alignment, "text_alignment"))


def overall(sc: float, pq: float) -> float:
    """Geometric mean of semantic consistency and perceptual quality."""
    return math.sqrt(_check_level(sc, "sc") * _check_level(pq, "pq"))


@dataclass(frozen=True)
class SampleScore:
    sample_id: str
    d_i: int | None
    d_t: int | None
    transcripts: dict
    flagged: bool

    @classmethod
    def from_grades(
        cls,
        sample_id: str,
        identity: tuple[int | None, list[str]],
        text: tuple[int | None, list[str]],
    ) -> "SampleScore":
        d_i, identity_log = identity
        d_t, text_log = text
        return cls(
            sample_id=sample_id,
            d_i=d_i,
            d_t=d_t,
            transcripts={"identity": identity_log, "text": text_log},
            flagged=d_i is None or d_t is None,
        )

    @property
    def d_h(self) -> float | None:
        if self.flagged:
            return None
        return harmonic_mean(self.d_i, self.d_t)


def aggregate(scores: list) -> dict:
    """Arithmetic means over unflagged samples; the harmonic mean is averaged
    per sample, never taken of the means."""
    valid = [s for s in scores if not s.flagged]
    if not valid:
        raise ValueError("every sample is flagged; nothing to aggregate")
    n = len(valid)
    return {
        "n": n,
        "excluded": len(scores) - n,
        "d_i_mean": sum(s.d_i for s in valid) / n,
        "d_t_mean": sum(s.d_t for s in valid) / n,
        "d_h_mean": sum(s.d_h for s in valid) / n,
    }


def evaluate_manifest(
    manifest: dict,
    grader: ModelClient,
    templates: ScoreTemplates,
    out_dir: str | Path,
    max_in_flight: int = 4,
) -> tuple[list, dict]:
    """Grade every sample, then write ``samples.jsonl``, ``aggregate.csv``,
    and one transcript JSON per sample under ``transcripts/``.

    Manifest shape: ``{"samples": [{"id", "input_path", "prompt",
    "generated_path"}, ...]}``. Samples are graded concurrently but emitted
    sorted by id. Returns (sample scores sorted by id, aggregate row).
    """
    if not isinstance(manifest, dict) or not isinstance(manifest.get("samples"), list):
        raise ValueError("malformed manifest: expected {'samples': [...]}")
    samples = manifest["samples"]
    for s in samples:
        missing = {"id", "input_path", "prompt", "generated_path"} - set(s)
        if missing:
            raise ValueError(f"sample {s.get('id')!r} missing fields {sorted(missing)}")
    ids = [s["id"] for s in samples]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate sample ids in manifest")

    def grade(sample: dict) -> SampleScore:
        return SampleScore.from_grades(
            sample["id"],
            grade_identity(sample["input_path"], sample["generated_path"], grader, templates),
            grade_text(sample["prompt"], sample["generated_path"], grader, templates),
        )

    if max_in_flight > 1 and len(samples) > 1:
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            scores = list(pool.map(grade, samples))
    else:
        scores = [grade(s) for s in samples]
    scores.sort(key=lambda s: s.sample_id)

    out_dir = Path(out_dir)
    transcripts_dir = out_dir / "transcripts"
    transcripts_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for score in scores:
        transcript_name = f"transcripts/{score.sample_id}.json"
        with open(out_dir / transcript_name, "w", encoding="utf-8") as fh:
            json.dump(score.transcripts, fh, indent=2, sort_keys=True)
            fh.write("\n")
        rows.append(
            {
                "id": score.sample_id,
                "d_i": score.d_i,
                "d_t": score.d_t,
                "d_h": score.d_h,
                "flagged": score.flagged,
                "transcript": transcript_name,
            }
        )
    with open(out_dir / "samples.jsonl", "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    summary = aggregate(scores)
    with open(out_dir / "aggregate.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n", "excluded", "d_i_mean", "d_t_mean", "d_h_mean"])
        writer.writerow(
            [summary["n"], summary["excluded"], repr(summary["d_i_mean"]),
             repr(summary["d_t_mean"]), repr(summary["d_h_mean"])]
        )
    return scores, summary
