"""Run configuration: one JSON-loadable dataclass tree covering model dims,
the noise schedule, the training phases, sampling, and curation thresholds.

Loading is strict about key names (an unknown key is an error, not a silent
no-op) but lenient about coverage: any omitted key keeps its default, so a
config file states only what it changes. ``run_config_hash`` fingerprints the
fully resolved tree; every CLI output carries it in a sidecar.

The schedule shipped as defaults here is the desk-scale one (2,000
reconstruction plus 2,000 paired steps, batch 8, lr 1e-3 then 1e-4);
``full_scale_config`` loads the packaged large-run schedule instead.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .diffusion import DEFAULT_NEGATIVE_PROMPT, GatingConfig, NoiseSchedule
from .model import PersonaConfig
from .training import PhaseSpec

__all__ = [
    "ScheduleConfig",
    "PhaseConfig",
    "TrainingSection",
    "SamplingConfig",
    "CurationSection",
    "RunConfig",
    "load_run_config",
    "run_config_json",
    "run_config_hash",
    "full_scale_config",
]


@dataclass(frozen=True)
class ScheduleConfig:
    num_timesteps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def build(self) -> NoiseSchedule:
        return NoiseSchedule.linear(self.num_timesteps, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class PhaseConfig:
    steps: int
    batch_size: int = 8
    learning_rate: float = 1e-3
    identity_scale: float = 1.0
    text_dropout: float = 0.0


@dataclass(frozen=True)
class TrainingSection:
    """Phase order is fixed: base, then reconstruction, then paired. A phase
    with zero steps is skipped."""

    base: PhaseConfig = field(default_factory=lambda: PhaseConfig(steps=0))
    reconstruction: PhaseConfig = field(default_factory=lambda: PhaseConfig(steps=2000, learning_rate=1e-3))
    paired: PhaseConfig = field(default_factory=lambda: PhaseConfig(steps=2000, learning_rate=1e-4))
    checkpoint_every: int = 500

    def phase_specs(self) -> list[PhaseSpec]:
        specs = []
        for name in ("base", "reconstruction", "paired"):
            cfg: PhaseConfig = getattr(self, name)
            if cfg.steps == 0:
                continue
            specs.append(
                PhaseSpec(
                    name=name,
                    steps=cfg.steps,
                    batch_size=cfg.batch_size,
                    learning_rate=cfg.learning_rate,
                    identity_scale=cfg.identity_scale,
                    text_dropout=cfg.text_dropout,
                )
            )
        return specs


@dataclass(frozen=True)
class SamplingConfig:
    steps: int = 50
    guidance_scale: float = 1.0
    identity_scale: float = 0.7
    active_blocks: tuple = ("down", "mid", "up")
    active_steps: tuple | None = None
    negative_prompt: str = DEFAULT_NEGATIVE_PROMPT

    def gating(self) -> GatingConfig:
        return GatingConfig(
            identity_scale=self.identity_scale,
            active_blocks=frozenset(self.active_blocks),
            active_steps=self.active_steps,
        )


@dataclass(frozen=True)
class CurationSection:
    face_sim_min: float = 0.5
    min_short_side: int = 1024
    window: int = 3
    stride: int = 2
    max_in_flight: int = 4


@dataclass(frozen=True)
class RunConfig:
    model: PersonaConfig = field(default_factory=PersonaConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    training: TrainingSection = field(default_factory=TrainingSection)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    curation: CurationSection = field(default_factory=CurationSection)
    seed: int = 0


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _merge(defaults, data, where: str):
    """Overlay a (possibly partial) dict onto a default dataclass instance."""
    if not isinstance(data, dict):
        raise ValueError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(defaults)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValueError(f"{where}: unknown keys {unknown}; valid keys are {sorted(names)}")
    kwargs = {}
    for name, value in data.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _merge(current, value, f"{where}.{name}")
        else:
            kwargs[name] = _tuplify(value)
    try:
        return dataclasses.replace(defaults, **kwargs)
    except (TypeError, ValueError) as err:
        raise ValueError(f"{where}: {err}") from err


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ValueError(f"{path}: not valid JSON: {err}") from err
    return _merge(RunConfig(), raw, path.name)


def run_config_json(config: RunConfig) -> str:
    """The fully resolved config as formatted JSON (the --print-config dump)."""
    return json.dumps(dataclasses.asdict(config), indent=2, sort_keys=True) + "\n"


def run_config_hash(config: RunConfig) -> str:
    payload = json.dumps(dataclasses.asdict(config), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def full_scale_config() -> RunConfig:
    """The packaged large-run schedule (kept as reference defaults, not meant
    to be executed on a desk)."""
    ref = resources.files("bodyforge").joinpath("data/full_scale.json")
    raw = json.loads(ref.read_text(encoding="utf-8"))
    return _merge(RunConfig(), raw, "full_scale.json")
