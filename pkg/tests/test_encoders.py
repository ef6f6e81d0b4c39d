import numpy as np
import pytest

from bodyforge.encoders import (
    PatchEncoder,
    PatchEncoderConfig,
    TextEmbedderConfig,
    encode_text,
    sinusoidal_embedding,
)


@pytest.fixture
def small_cfg():
    return PatchEncoderConfig(image_size=8, patch_size=4, dim=16, depth=2, num_heads=4)


def test_config_validation():
    with pytest.raises(ValueError):
        PatchEncoderConfig(image_size=10, patch_size=4)
    with pytest.raises(ValueError):
        PatchEncoderConfig(dim=30, num_heads=4)


def test_patchify_row_major(small_cfg, rng):
    enc = PatchEncoder(small_cfg, rng)
    image = np.arange(8 * 8 * 3, dtype=np.float32).reshape(8, 8, 3) / 200.0
    tokens = enc.patchify(image)
    assert tokens.shape == (1, 4, 48)
    np.testing.assert_array_equal(tokens[0, 0], image[0:4, 0:4].reshape(-1))
    np.testing.assert_array_equal(tokens[0, 1], image[0:4, 4:8].reshape(-1))
    np.testing.assert_array_equal(tokens[0, 2], image[4:8, 0:4].reshape(-1))
    np.testing.assert_array_equal(tokens[0, 3], image[4:8, 4:8].reshape(-1))


def test_encoder_shape_and_determinism(small_cfg, rng):
    enc = PatchEncoder(small_cfg, rng)
    batch = np.random.default_rng(7).random((3, 8, 8, 3)).astype(np.float32)
    f1 = enc.encode(batch)
    f2 = enc.encode(batch)
    assert f1.shape == (3, 4, 16)
    assert f1.tobytes() == f2.tobytes()


def test_encoder_frozen_by_default(small_cfg, rng):
    enc = PatchEncoder(small_cfg, rng)
    assert all(p.frozen for _, p in enc.named_parameters())
    out = enc.forward(np.zeros((1, 8, 8, 3), dtype=np.float32))
    assert not out.requires_grad  # frozen encoder builds no tape


def test_encoder_zero_weights_collapse_tokens(small_cfg, rng):
    enc = PatchEncoder(small_cfg, rng)
    enc.load_state_dict({k: np.zeros_like(v) for k, v in enc.state_dict().items()})
    # gain zeroed too, so normalization cannot reintroduce differences
    f = enc.encode(np.random.default_rng(3).random((1, 8, 8, 3)).astype(np.float32))
    np.testing.assert_array_equal(f[0], np.broadcast_to(f[0, 0], f[0].shape))


def test_encoder_rejects_wrong_size(small_cfg, rng):
    enc = PatchEncoder(small_cfg, rng)
    with pytest.raises(ValueError):
        enc.encode(np.zeros((1, 16, 16, 3), dtype=np.float32))


def test_sinusoidal_embedding_basics():
    table = sinusoidal_embedding(np.arange(4), 8)
    assert table.shape == (4, 8)
    np.testing.assert_allclose(table[0, :4], 0.0, atol=1e-7)  # sin(0)
    np.testing.assert_allclose(table[0, 4:], 1.0, atol=1e-7)  # cos(0)
    assert not np.allclose(table[1], table[2])


def test_text_embedding_determinism_and_padding():
    cfg = TextEmbedderConfig(max_tokens=6, dim=16)
    e1 = encode_text("a red coat", cfg)
    e2 = encode_text("a red coat", cfg)
    assert e1.vectors.tobytes() == e2.vectors.tobytes()
    assert e1.num_tokens == 3
    np.testing.assert_array_equal(e1.vectors[3:], 0.0)
    assert e1.vectors[:3].any(axis=1).all()


def test_text_embedding_empty_prompt_all_pad():
    cfg = TextEmbedderConfig(max_tokens=4, dim=8)
    e = encode_text("", cfg)
    assert e.num_tokens == 0
    np.testing.assert_array_equal(e.vectors, 0.0)


def test_text_embedding_truncates():
    cfg = TextEmbedderConfig(max_tokens=3, dim=8)
    e = encode_text("one two three four five", cfg)
    assert e.num_tokens == 3
    assert e.vectors.shape == (3, 8)


def test_text_embedding_position_term_separates_repeats():
    cfg = TextEmbedderConfig(max_tokens=4, dim=16)
    e = encode_text("walk walk", cfg)
    positions = sinusoidal_embedding(np.arange(2), 16)
    np.testing.assert_allclose(
        e.vectors[0] - positions[0], e.vectors[1] - positions[1], atol=1e-6
    )
    assert not np.allclose(e.vectors[0], e.vectors[1])


def test_text_embedding_distinct_tokens_differ():
    cfg = TextEmbedderConfig(max_tokens=2, dim=16)
    a = encode_text("crimson", cfg).vectors[0]
    b = encode_text("teal", cfg).vectors[0]
    assert not np.allclose(a, b)
