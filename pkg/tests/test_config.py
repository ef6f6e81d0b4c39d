"""Run-config tests: defaults, strict JSON loading, partial overrides, the
resolved-config dump, hashing, and the packaged large-run schedule."""

import json
from dataclasses import replace

import pytest

from bodyforge.config import (
    RunConfig,
    full_scale_config,
    load_run_config,
    run_config_hash,
    run_config_json,
)
from bodyforge.diffusion import GatingConfig


def write(tmp_path, payload):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


def test_desk_scale_defaults():
    cfg = RunConfig()
    assert cfg.training.base.steps == 0
    assert (cfg.training.reconstruction.steps, cfg.training.reconstruction.batch_size) == (2000, 8)
    assert cfg.training.reconstruction.learning_rate == 1e-3
    assert (cfg.training.paired.steps, cfg.training.paired.batch_size) == (2000, 8)
    assert cfg.training.paired.learning_rate == 1e-4
    assert cfg.sampling.identity_scale == 0.7
    assert cfg.sampling.steps == 50
    assert cfg.schedule.num_timesteps == 200
    assert cfg.model.image_size == 64
    assert cfg.curation.min_short_side == 1024


def test_dump_then_load_roundtrips(tmp_path):
    cfg = RunConfig()
    path = tmp_path / "dump.json"
    path.write_text(run_config_json(cfg), encoding="utf-8")
    assert load_run_config(path) == cfg


def test_partial_override_keeps_other_defaults(tmp_path):
    path = write(tmp_path, {"training": {"paired": {"steps": 5}}, "seed": 3})
    cfg = load_run_config(path)
    assert cfg.training.paired.steps == 5
    assert cfg.training.paired.learning_rate == 1e-4
    assert cfg.training.reconstruction.steps == 2000
    assert cfg.seed == 3


def test_unknown_top_level_key_is_an_error(tmp_path):
    path = write(tmp_path, {"trainign": {}})
    with pytest.raises(ValueError, match="trainign"):
        load_run_config(path)


def test_unknown_nested_key_names_its_location(tmp_path):
    path = write(tmp_path, {"sampling": {"step": 10}})
    with pytest.raises(ValueError, match=r"sampling.*'step'"):
        load_run_config(path)


def test_malformed_json_is_an_error(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ValueError, match="bad.json"):
        load_run_config(path)


def test_non_object_section_is_an_error(tmp_path):
    path = write(tmp_path, {"schedule": [1, 2]})
    with pytest.raises(ValueError, match="expected an object"):
        load_run_config(path)


def test_lists_become_tuples(tmp_path):
    path = write(
        tmp_path,
        {
            "model": {"channel_mults": [1, 2, 2], "attn_resolutions": [16, 8]},
            "sampling": {"active_blocks": ["down"], "active_steps": [0, 10]},
        },
    )
    cfg = load_run_config(path)
    assert cfg.model.channel_mults == (1, 2, 2)
    assert cfg.model.attn_resolutions == (16, 8)
    assert cfg.sampling.active_blocks == ("down",)
    assert cfg.sampling.active_steps == (0, 10)


def test_invalid_field_value_is_reported_with_location(tmp_path):
    path = write(tmp_path, {"training": {"paired": {"steps": 1, "batch_size": "eight"}}})
    # dataclass construction accepts it; phase_specs validation rejects it
    cfg = load_run_config(path)
    with pytest.raises(TypeError):
        cfg.training.phase_specs()


def test_phase_specs_skip_zero_step_phases():
    cfg = RunConfig()
    specs = cfg.training.phase_specs()
    assert [s.name for s in specs] == ["reconstruction", "paired"]
    assert [s.steps for s in specs] == [2000, 2000]
    assert [s.learning_rate for s in specs] == [1e-3, 1e-4]

    with_base = replace(
        cfg, training=replace(cfg.training, base=replace(cfg.training.base, steps=7))
    )
    assert [s.name for s in with_base.training.phase_specs()] == [
        "base",
        "reconstruction",
        "paired",
    ]


def test_sampling_gating_construction():
    cfg = RunConfig()
    gating = cfg.sampling.gating()
    assert isinstance(gating, GatingConfig)
    assert gating.identity_scale == 0.7
    assert gating.active_blocks == frozenset({"down", "mid", "up"})
    assert gating.active_steps is None

    narrowed = replace(cfg.sampling, active_blocks=("down",), active_steps=(0, 10))
    gating = narrowed.gating()
    assert gating.active_blocks == frozenset({"down"})
    assert gating.active_steps == (0, 10)

    with pytest.raises(ValueError, match="block"):
        replace(cfg.sampling, active_blocks=("sideways",)).gating()


def test_schedule_build():
    schedule = RunConfig().schedule.build()
    assert schedule.num_timesteps == 200
    assert schedule.betas[0] == pytest.approx(1e-4)
    assert schedule.betas[-1] == pytest.approx(0.02)


def test_config_hash_is_stable_and_sensitive():
    cfg = RunConfig()
    assert run_config_hash(cfg) == run_config_hash(RunConfig())
    assert run_config_hash(cfg) != run_config_hash(replace(cfg, seed=1))


def test_full_scale_schedule_is_preserved():
    cfg = full_scale_config()
    assert cfg.training.reconstruction.steps == 35000
    assert cfg.training.reconstruction.batch_size == 32
    assert cfg.training.reconstruction.learning_rate == 1e-4
    assert cfg.training.paired.steps == 35000
    assert cfg.training.paired.batch_size == 8
    assert cfg.training.paired.learning_rate == 5e-6
    assert cfg.model.image_size == 1024
    assert cfg.sampling.identity_scale == 0.7
    # the recorded dims must at least be mutually consistent
    assert set(cfg.model.attn_resolutions) <= set(cfg.model.denoiser.level_resolutions)
