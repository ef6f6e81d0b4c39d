"""Phased training over decomposed person images.

``build_dataset`` does the one-time work per image: decompose it into body
regions, push the regions through the frozen patch encoder, and embed the
caption. ``Trainer`` then runs a list of phases over the cached entries:

- ``base``: text-to-image pretraining; the identity branch stays frozen.
- ``reconstruction``: identity conditioning comes from the target image itself.
- ``paired``: identity conditioning comes from a different image of the same
  person, so the model cannot shortcut by copying pixels.

Training checkpoints carry the model weights, the optimizer moments, and the
sampler RNG state; resuming one against the same dataset reproduces the loss
sequence of an uninterrupted run exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import nn
from .checkpoint import load_checkpoint, save_checkpoint
from .diffusion import NoiseSchedule, base_training_step, training_step
from .encoders import encode_text
from .model import PersonaConfig, PersonaModel, config_hash
from .pngio import read_image, read_mask, read_parse_grid
from .regions import ParseMap, RegionGrouping, decompose

__all__ = ["PHASE_NAMES", "PhaseSpec", "DatasetEntry", "TrainingDataset", "build_dataset", "Trainer"]

PHASE_NAMES = ("base", "reconstruction", "paired")

# Prefix separating optimizer moments from model weights inside a checkpoint.
_OPT_PREFIX = "__trainer__/"

_ENCODE_CHUNK = 16


@dataclass(frozen=True)
class PhaseSpec:
    name: str
    steps: int
    batch_size: int = 8
    learning_rate: float = 1e-3
    identity_scale: float = 1.0
    text_dropout: float = 0.0

    def __post_init__(self):
        if self.name not in PHASE_NAMES:
            raise ValueError(f"unknown phase {self.name!r}, expected one of {PHASE_NAMES}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.identity_scale < 0:
            raise ValueError(f"identity_scale must be >= 0, got {self.identity_scale}")
        if not 0.0 <= self.text_dropout < 1.0:
            raise ValueError(f"text_dropout must be in [0, 1), got {self.text_dropout}")


@dataclass
class DatasetEntry:
    identity: str
    image: np.ndarray
    text_tokens: np.ndarray
    features: np.ndarray
    present: np.ndarray


class TrainingDataset:
    """Cached entries, grouped by region-presence pattern.

    A batch must share one presence pattern (the stacked identity tokens in a
    batch must agree in length), so sampling first picks a pattern group
    weighted by its size, then entries within it. ``pairable`` indexes, per
    pattern, the identities that have at least two entries to pair.
    """

    def __init__(self, entries: list):
        if not entries:
            raise ValueError("dataset has no entries")
        self.entries = list(entries)
        self.groups: dict[bytes, list[int]] = {}
        for i, entry in enumerate(self.entries):
            self.groups.setdefault(np.asarray(entry.present, dtype=bool).tobytes(), []).append(i)
        self.group_keys = list(self.groups)
        sizes = np.array([len(self.groups[k]) for k in self.group_keys], dtype=np.float64)
        self.group_weights = sizes / sizes.sum()

        self.pairable: dict[bytes, dict[str, list[int]]] = {}
        for key, indices in self.groups.items():
            by_identity: dict[str, list[int]] = {}
            for i in indices:
                by_identity.setdefault(self.entries[i].identity, []).append(i)
            eligible = {ident: ii for ident, ii in by_identity.items() if len(ii) >= 2}
            if eligible:
                self.pairable[key] = eligible
        self.pair_keys = list(self.pairable)
        if self.pair_keys:
            pair_sizes = np.array(
                [sum(len(ii) for ii in self.pairable[k].values()) for k in self.pair_keys],
                dtype=np.float64,
            )
            self.pair_weights = pair_sizes / pair_sizes.sum()
        else:
            self.pair_weights = np.zeros(0)

    def __len__(self) -> int:
        return len(self.entries)

    def supports_pairing(self) -> bool:
        return bool(self.pairable)


def build_dataset(
    manifest: dict,
    model: PersonaModel,
    grouping: RegionGrouping | None = None,
) -> TrainingDataset:
    """Precompute every entry the trainer needs from a dataset manifest.

    Works on generator manifests and on curation output alike (individuals
    with a ``dropped`` verdict are skipped). Every image needs ``parse_path``
    and ``mask_path``; images must already be the denoiser's size, resampling
    them here would silently change what the model is scored against.
    """
    individuals = manifest.get("individuals")
    if not isinstance(individuals, list):
        raise ValueError("manifest needs an 'individuals' list")
    size = model.config.image_size
    region = model.config.region_size
    default_scheme = manifest.get("label_scheme_id")
    cache: dict[str, RegionGrouping] = {}

    metas = []
    region_sets = []
    for person in individuals:
        if person.get("verdict") == "dropped":
            continue
        ident = person.get("id")
        if not ident:
            raise ValueError("individual without an id")
        for member in person.get("images", []):
            path = member.get("path")
            parse_path = member.get("parse_path")
            mask_path = member.get("mask_path")
            if not (path and parse_path and mask_path):
                raise ValueError(f"{ident}: training needs path, parse_path, and mask_path per image")
            scheme = member.get("label_scheme_id") or default_scheme
            if not scheme:
                raise ValueError(f"{path}: no label scheme for the parse grid")
            image = read_image(path)
            if image.shape[:2] != (size, size):
                raise ValueError(f"{path}: image is {image.shape[:2]}, model expects {(size, size)}")
            if grouping is not None:
                group = grouping
            else:
                if scheme not in cache:
                    cache[scheme] = RegionGrouping.builtin(scheme)
                group = cache[scheme]
            parse = ParseMap(read_parse_grid(parse_path), scheme)
            rs = decompose(image, parse, read_mask(mask_path), group, target_size=(region, region))
            text = encode_text(member.get("caption", ""), model.config.text).vectors
            metas.append((ident, image, text, rs.present.copy()))
            region_sets.append(rs)

    entries = []
    for start in range(0, len(region_sets), _ENCODE_CHUNK):
        chunk = region_sets[start : start + _ENCODE_CHUNK]
        features = model.region_features(chunk)
        for offset, feats in enumerate(features):
            ident, image, text, present = metas[start + offset]
            entries.append(
                DatasetEntry(
                    identity=ident, image=image, text_tokens=text, features=feats, present=present
                )
            )
    return TrainingDataset(entries)


class Trainer:
    """Runs the configured phases and owns everything a resume needs.

    The checkpoint stores the model, the optimizer moments, the RNG state, and
    the phase cursor; the dataset itself is not serialized. Resuming against a
    dataset built from the same manifest and model reproduces the loss
    sequence of the uninterrupted run bit for bit.
    """

    def __init__(
        self,
        model: PersonaModel,
        dataset: TrainingDataset,
        phases: list,
        schedule: NoiseSchedule,
        seed: int = 0,
        log_path=None,
    ):
        if not phases:
            raise ValueError("need at least one phase")
        needs_pairs = any(p.name == "paired" and p.steps > 0 for p in phases)
        if needs_pairs and not dataset.supports_pairing():
            raise ValueError(
                "paired training needs an identity with at least two images sharing a presence pattern"
            )
        self.model = model
        self.dataset = dataset
        self.phases = list(phases)
        self.schedule = schedule
        self.rng = np.random.default_rng(seed)
        self.log_path = Path(log_path) if log_path is not None else None
        self.phase_index = 0
        self.phase_step = 0
        self.optimizer = None

    # -- batch sampling ----------------------------------------------------

    def _base_batch(self, phase: PhaseSpec) -> dict:
        picks = self.rng.integers(0, len(self.dataset.entries), size=phase.batch_size)
        chosen = [self.dataset.entries[i] for i in picks]
        return {
            "images": np.stack([e.image for e in chosen]),
            "text_tokens": self._drop_text(np.stack([e.text_tokens for e in chosen]), phase),
        }

    def _drop_text(self, text_tokens: np.ndarray, phase: PhaseSpec) -> np.ndarray:
        """Blank whole captions at the phase's dropout rate so the denoiser
        also learns the unconditional distribution (the branch classifier-free
        guidance extrapolates from)."""
        if phase.text_dropout <= 0.0:
            return text_tokens
        dropped = self.rng.random(text_tokens.shape[0]) < phase.text_dropout
        if dropped.any():
            text_tokens = text_tokens.copy()
            text_tokens[dropped] = 0.0
        return text_tokens

    def _persona_batch(self, phase: PhaseSpec) -> dict:
        ds = self.dataset
        if phase.name == "reconstruction":
            key = ds.group_keys[self.rng.choice(len(ds.group_keys), p=ds.group_weights)]
            group = ds.groups[key]
            picks = self.rng.integers(0, len(group), size=phase.batch_size)
            targets = [ds.entries[group[i]] for i in picks]
            sources = targets
        else:
            key = ds.pair_keys[self.rng.choice(len(ds.pair_keys), p=ds.pair_weights)]
            eligible = ds.pairable[key]
            idents = list(eligible)
            targets, sources = [], []
            for pick in self.rng.integers(0, len(idents), size=phase.batch_size):
                indices = eligible[idents[pick]]
                pair = self.rng.choice(len(indices), size=2, replace=False)
                targets.append(ds.entries[indices[pair[0]]])
                sources.append(ds.entries[indices[pair[1]]])
        return {
            "images": np.stack([e.image for e in targets]),
            "text_tokens": self._drop_text(np.stack([e.text_tokens for e in targets]), phase),
            "features": np.stack([e.features for e in sources]),
            "present": np.frombuffer(key, dtype=bool).copy(),
        }

    # -- the run loop --------------------------------------------------------

    def _enter_phase(self, phase: PhaseSpec) -> None:
        if phase.name == "base":
            self.model.freeze_for_base_training()
        else:
            self.model.freeze_for_persona_training()
        self.optimizer = nn.Adam(self.model.trainable_parameters(), lr=phase.learning_rate)

    def _train_one(self, phase: PhaseSpec) -> float:
        if phase.name == "base":
            return base_training_step(
                self.model.denoiser, self._base_batch(phase), self.optimizer, self.schedule, self.rng
            )
        return training_step(
            self.model.denoiser,
            self.model.identity_decoder,
            self._persona_batch(phase),
            self.optimizer,
            self.schedule,
            self.rng,
            identity_scale=phase.identity_scale,
        )

    def _append_log(self, phase: PhaseSpec, loss: float) -> None:
        if self.log_path is None:
            return
        line = json.dumps(
            {"loss": loss, "phase": phase.name, "step": self.phase_step}, sort_keys=True
        )
        with open(self.log_path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")

    def run(self, checkpoint_every: int = 0, checkpoint_path=None, max_steps: int | None = None):
        """Train until the phases finish (or ``max_steps`` for this call).

        Returns the losses of the steps this call executed, in order.
        """
        losses: list[float] = []
        budget = max_steps if max_steps is not None else -1
        while self.phase_index < len(self.phases):
            phase = self.phases[self.phase_index]
            if self.optimizer is None:
                self._enter_phase(phase)
            while self.phase_step < phase.steps:
                if budget == 0:
                    return losses
                loss = self._train_one(phase)
                self.phase_step += 1
                budget -= 1
                losses.append(loss)
                self._append_log(phase, loss)
                if checkpoint_path is not None and checkpoint_every and self.phase_step % checkpoint_every == 0:
                    self.save(checkpoint_path)
            self.optimizer = None
            self.phase_index += 1
            self.phase_step = 0
        return losses

    # -- checkpointing -------------------------------------------------------

    def save(self, path) -> None:
        arrays = dict(self.model.state_dict())
        if self.optimizer is not None:
            for key, moment in self.optimizer.state_arrays().items():
                arrays[_OPT_PREFIX + key] = moment
        trainer_state = {
            "phases": [asdict(p) for p in self.phases],
            "phase_index": self.phase_index,
            "phase_step": self.phase_step,
            "rng_state": self.rng.bit_generator.state,
            "has_optimizer": self.optimizer is not None,
            "optimizer_steps": self.optimizer.step_count if self.optimizer is not None else 0,
        }
        extra = {"persona_config": asdict(self.model.config), "trainer": trainer_state}
        save_checkpoint(path, arrays, config_hash(self.model.config), extra)

    @classmethod
    def resume(cls, path, dataset: TrainingDataset, schedule: NoiseSchedule, log_path=None) -> "Trainer":
        """Rebuild a trainer from a training checkpoint.

        The caller supplies the dataset (rebuilt from the same manifest; the
        frozen encoder makes that reconstruction deterministic)."""
        arrays, header = load_checkpoint(path)
        extra = header.get("extra", {})
        state = extra.get("trainer")
        if state is None:
            raise ValueError(f"{path}: not a training checkpoint")
        stored = extra["persona_config"]
        config = PersonaConfig(
            **{k: tuple(v) if isinstance(v, list) else v for k, v in stored.items()}
        )
        model = PersonaModel(config)
        model.load_state_dict({k: v for k, v in arrays.items() if not k.startswith(_OPT_PREFIX)})

        phases = [PhaseSpec(**p) for p in state["phases"]]
        trainer = cls(model, dataset, phases, schedule, log_path=log_path)
        trainer.phase_index = state["phase_index"]
        trainer.phase_step = state["phase_step"]
        trainer.rng.bit_generator.state = state["rng_state"]
        if state["has_optimizer"] and trainer.phase_index < len(phases):
            trainer._enter_phase(phases[trainer.phase_index])
            moments = {
                key[len(_OPT_PREFIX):]: value
                for key, value in arrays.items()
                if key.startswith(_OPT_PREFIX)
            }
            trainer.optimizer.load_state_arrays(moments, state["optimizer_steps"])
        return trainer
