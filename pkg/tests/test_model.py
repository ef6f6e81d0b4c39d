"""Assembled-model tests: config wiring, the two-phase freeze discipline, the
frozen-weights fingerprint, conditioning shapes, and checkpoint round-trips."""

from dataclasses import asdict, replace

import numpy as np
import pytest

from bodyforge.checkpoint import save_checkpoint
from bodyforge.diffusion import GatingConfig, NoiseSchedule, base_training_step, training_step
from bodyforge.model import PersonaConfig, PersonaModel, config_hash, load_model, save_model
from bodyforge.nn import Adam
from bodyforge.regions import NUM_REGIONS, REGION_NAMES, BodyRegionSet

SMALL = PersonaConfig(
    region_size=16,
    patch_size=8,
    feature_dim=8,
    encoder_depth=1,
    encoder_heads=2,
    token_len=4,
    identity_dim=8,
    decoder_depth=1,
    decoder_heads=2,
    text_tokens=4,
    text_dim=8,
    image_size=8,
    base_channels=8,
    channel_mults=(1, 2),
    attn_resolutions=(4,),
    denoiser_heads=2,
    norm_groups=4,
)


def make_region_set(rng, size=16, present=None):
    flags = np.ones(NUM_REGIONS, dtype=bool) if present is None else np.asarray(present, dtype=bool)
    regions = rng.random((NUM_REGIONS, size, size, 3)).astype(np.float32)
    regions[~flags] = 0.0
    return BodyRegionSet(regions=regions, present=flags, bboxes=[None] * NUM_REGIONS)


def make_batch(model, rng, batch_size=2):
    sets = [make_region_set(rng, model.config.region_size) for _ in range(batch_size)]
    return {
        "images": rng.random((batch_size, model.config.image_size, model.config.image_size, 3)).astype(
            np.float32
        ),
        "text_tokens": rng.standard_normal(
            (batch_size, model.config.text_tokens, model.config.text_dim)
        ).astype(np.float32),
        "features": model.region_features(sets),
        "present": np.ones(NUM_REGIONS, dtype=bool),
    }


# -- configuration ---------------------------------------------------------


def test_config_properties_share_dims():
    cfg = SMALL
    assert cfg.encoder.dim == cfg.decoder.feature_dim
    assert cfg.decoder.dim == cfg.denoiser.identity_dim
    assert cfg.text.dim == cfg.denoiser.text_dim
    assert cfg.text.max_tokens == cfg.text_tokens
    assert cfg.decoder.num_regions == NUM_REGIONS
    assert cfg.encoder.image_size == cfg.region_size


def test_config_hash_is_stable_and_field_sensitive():
    assert config_hash(SMALL) == config_hash(SMALL)
    assert config_hash(SMALL) != config_hash(replace(SMALL, token_len=8))
    assert config_hash(SMALL) != config_hash(replace(SMALL, channel_mults=(1, 2, 2)))


# -- freeze discipline -----------------------------------------------------


def trainable_names(model):
    return {name for name, p in model.named_parameters() if not p.frozen}


def test_base_mode_trains_denoiser_minus_identity_branch():
    model = PersonaModel(SMALL, seed=1)
    model.freeze_for_base_training()
    names = trainable_names(model)
    assert names, "base mode must leave something trainable"
    for name in names:
        assert name.startswith("denoiser/")
        assert "/id_key/" not in name and "/id_value/" not in name
    frozen = {name for name, p in model.named_parameters() if p.frozen}
    assert any("/id_key/" in n for n in frozen)
    assert any("/id_value/" in n for n in frozen)
    assert all(not n.startswith("encoder/") for n in names)
    assert all(not n.startswith("identity_decoder/") for n in names)


def test_persona_mode_trains_decoder_and_identity_projections_only():
    model = PersonaModel(SMALL, seed=1)
    model.freeze_for_persona_training()
    names = trainable_names(model)
    decoder = {n for n in names if n.startswith("identity_decoder/")}
    projections = names - decoder
    assert decoder
    assert projections
    for name in projections:
        assert name.startswith("denoiser/")
        assert "/id_key/" in name or "/id_value/" in name


def test_modes_partition_the_tunable_surface():
    model = PersonaModel(SMALL, seed=1)
    model.freeze_for_base_training()
    base = trainable_names(model)
    model.freeze_for_persona_training()
    persona = trainable_names(model)
    assert not base & persona
    denoiser_names = {f"denoiser/{n}" for n, _ in model.denoiser.named_parameters()}
    decoder_names = {f"identity_decoder/{n}" for n, _ in model.identity_decoder.named_parameters()}
    assert base | persona == denoiser_names | decoder_names


def test_encoder_is_frozen_at_construction():
    model = PersonaModel(SMALL, seed=1)
    assert all(p.frozen for _, p in model.encoder.named_parameters())


# -- frozen fingerprint ----------------------------------------------------


def test_frozen_hash_ignores_the_trainable_persona_surface():
    model = PersonaModel(SMALL, seed=2)
    before = model.frozen_bytes_hash()
    for name, param in model.named_parameters():
        if name.startswith("identity_decoder/") or "/id_key/" in name or "/id_value/" in name:
            param.data = param.data + 1.0
    assert model.frozen_bytes_hash() == before


def test_frozen_hash_detects_base_denoiser_drift():
    model = PersonaModel(SMALL, seed=2)
    before = model.frozen_bytes_hash()
    name, param = next(
        (n, p)
        for n, p in model.denoiser.named_parameters()
        if "/id_key/" not in n and "/id_value/" not in n
    )
    param.data = param.data + 1e-3
    assert model.frozen_bytes_hash() != before, f"perturbing {name} must change the fingerprint"


def test_frozen_hash_detects_encoder_drift():
    model = PersonaModel(SMALL, seed=2)
    before = model.frozen_bytes_hash()
    param = model.encoder.parameters()[0]
    param.data = param.data + 1e-3
    assert model.frozen_bytes_hash() != before


def test_persona_training_leaves_fingerprint_intact():
    model = PersonaModel(SMALL, seed=3)
    model.freeze_for_persona_training()
    fingerprint = model.frozen_bytes_hash()
    decoder_before = model.identity_decoder.parameters()[0].data.copy()
    id_param = next(p for n, p in model.denoiser.named_parameters() if "/id_key/" in n)
    id_before = id_param.data.copy()

    schedule = NoiseSchedule.linear(num_timesteps=20)
    optimizer = Adam(model.trainable_parameters(), lr=1e-2)
    rng = np.random.default_rng(0)
    for _ in range(2):
        loss = training_step(
            model.denoiser, model.identity_decoder, make_batch(model, rng), optimizer, schedule, rng
        )
        assert np.isfinite(loss)

    assert model.frozen_bytes_hash() == fingerprint
    assert not np.array_equal(model.identity_decoder.parameters()[0].data, decoder_before)
    assert not np.array_equal(id_param.data, id_before)


def test_base_training_moves_only_the_fingerprinted_surface():
    model = PersonaModel(SMALL, seed=3)
    model.freeze_for_base_training()
    fingerprint = model.frozen_bytes_hash()
    id_params = [
        (p, p.data.copy())
        for n, p in model.denoiser.named_parameters()
        if "/id_key/" in n or "/id_value/" in n
    ]

    schedule = NoiseSchedule.linear(num_timesteps=20)
    optimizer = Adam(model.trainable_parameters(), lr=1e-2)
    rng = np.random.default_rng(0)
    loss = base_training_step(model.denoiser, make_batch(model, rng), optimizer, schedule, rng)
    assert np.isfinite(loss)

    assert model.frozen_bytes_hash() != fingerprint
    for param, before in id_params:
        np.testing.assert_array_equal(param.data, before)


# -- conditioning ----------------------------------------------------------


def test_region_features_shape():
    model = PersonaModel(SMALL, seed=4)
    rng = np.random.default_rng(1)
    sets = [make_region_set(rng) for _ in range(3)]
    features = model.region_features(sets)
    tokens = model.config.encoder.num_tokens
    assert features.shape == (3, NUM_REGIONS, tokens, SMALL.feature_dim)
    assert features.dtype == np.float32


def test_identity_tokens_full_presence_spans():
    model = PersonaModel(SMALL, seed=4)
    rng = np.random.default_rng(2)
    stacked = model.identity_tokens([make_region_set(rng), make_region_set(rng)])
    assert stacked.tokens.shape == (2, NUM_REGIONS * SMALL.token_len, SMALL.identity_dim)
    assert [name for name, _, _ in stacked.spans] == list(REGION_NAMES)
    assert stacked.spans[0][1] == 0
    assert stacked.spans[-1][2] == NUM_REGIONS * SMALL.token_len


def test_identity_tokens_dropped_regions_shrink_the_stack():
    model = PersonaModel(SMALL, seed=4)
    rng = np.random.default_rng(2)
    present = np.array([True, True, False, True, False])
    stacked = model.identity_tokens([make_region_set(rng, present=present)])
    assert stacked.tokens.shape == (1, 3 * SMALL.token_len, SMALL.identity_dim)
    kept = [name for name, flag in zip(REGION_NAMES, present) if flag]
    assert [name for name, _, _ in stacked.spans] == kept


def test_identity_tokens_rejects_mixed_presence():
    model = PersonaModel(SMALL, seed=4)
    rng = np.random.default_rng(2)
    a = make_region_set(rng)
    b = make_region_set(rng, present=np.array([True, True, True, True, False]))
    with pytest.raises(ValueError, match="presence"):
        model.identity_tokens([a, b])


def test_identity_tokens_rejects_empty_batch():
    model = PersonaModel(SMALL, seed=4)
    with pytest.raises(ValueError, match="at least one"):
        model.identity_tokens([])


def test_prompt_tokens_shape_and_determinism():
    model = PersonaModel(SMALL, seed=4)
    tokens = model.prompt_tokens("a person on a beach")
    assert tokens.shape == (1, SMALL.text_tokens, SMALL.text_dim)
    np.testing.assert_array_equal(tokens, model.prompt_tokens("a person on a beach"))
    assert not np.array_equal(tokens, model.prompt_tokens("a person in a forest"))


# -- generation ------------------------------------------------------------


def test_generate_is_deterministic_per_seed():
    model = PersonaModel(SMALL, seed=5)
    schedule = NoiseSchedule.linear(num_timesteps=20)
    rng = np.random.default_rng(3)
    rs = make_region_set(rng)
    first = model.generate(schedule, "a person", region_set=rs, seed=11, steps=4)
    second = model.generate(schedule, "a person", region_set=rs, seed=11, steps=4)
    assert first.shape == (SMALL.image_size, SMALL.image_size, 3)
    assert first.min() >= 0.0 and first.max() <= 1.0
    np.testing.assert_array_equal(first, second)
    third = model.generate(schedule, "a person", region_set=rs, seed=12, steps=4)
    assert not np.array_equal(first, third)


def test_generate_gated_off_matches_unconditioned():
    model = PersonaModel(SMALL, seed=5)
    schedule = NoiseSchedule.linear(num_timesteps=20)
    rng = np.random.default_rng(3)
    rs = make_region_set(rng)
    off = model.generate(
        schedule, "a person", region_set=rs, gating=GatingConfig(identity_scale=0.0), seed=7, steps=4
    )
    bare = model.generate(schedule, "a person", region_set=None, seed=7, steps=4)
    np.testing.assert_array_equal(off, bare)


# -- checkpointing ---------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    model = PersonaModel(SMALL, seed=6)
    path = tmp_path / "model.bfck"
    save_model(path, model, extra={"phase": "persona", "step": 17})
    loaded, extra = load_model(path)
    assert loaded.config == SMALL
    assert extra["phase"] == "persona"
    assert extra["step"] == 17
    original = model.state_dict()
    restored = loaded.state_dict()
    assert sorted(original) == sorted(restored)
    for name in original:
        np.testing.assert_array_equal(original[name], restored[name])
    assert loaded.frozen_bytes_hash() == model.frozen_bytes_hash()


def test_load_rejects_checkpoint_without_config_record(tmp_path):
    model = PersonaModel(SMALL, seed=6)
    path = tmp_path / "bare.bfck"
    save_checkpoint(path, model.state_dict(), config_hash(SMALL), extra={})
    with pytest.raises(ValueError, match="persona_config"):
        load_model(path)


def test_load_rejects_mismatched_config_hash(tmp_path):
    model = PersonaModel(SMALL, seed=6)
    path = tmp_path / "tampered.bfck"
    other = replace(SMALL, token_len=8)
    save_checkpoint(
        path, model.state_dict(), config_hash(other), extra={"persona_config": asdict(SMALL)}
    )
    with pytest.raises(ValueError, match="hash"):
        load_model(path)
