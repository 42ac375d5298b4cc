"""Tests for the frozen multi-channel encoder."""

import itertools
from dataclasses import replace

import numpy as np
import pytest

from mci_probe.config import EncoderConfig
from mci_probe.encoder import encode, encode_ife, encode_jfe, encode_many, init_encoder, tokenize
from mci_probe.errors import ConfigError, ShapeError


def test_tokenize_shares_projection_and_positions(small_weights, rng):
    image = rng.random((3, 16, 16))
    image[2] = image[0]
    batch = tokenize(image, small_weights)
    assert batch.tokens.shape == (3, 16, 16)
    # identical channels give identical tokens: no channel embedding
    np.testing.assert_allclose(batch.tokens[0], batch.tokens[2], atol=1e-12, rtol=0)


def test_tokenize_rejects_wrong_size(small_weights):
    with pytest.raises(ShapeError):
        tokenize(np.zeros((2, 8, 8)), small_weights)
    with pytest.raises(ShapeError):
        tokenize(np.zeros((16, 16)), small_weights)


def test_single_channel_jfe_equals_ife(small_weights, rng):
    for _ in range(100):
        image = rng.random((1, 16, 16))
        jfe = encode(image, small_weights, "jfe")
        ife = encode(image, small_weights, "ife")
        np.testing.assert_allclose(jfe.patches, ife.patches, atol=1e-9, rtol=0)
        np.testing.assert_allclose(jfe.cls, ife.cls, atol=1e-9, rtol=0)


def test_feature_shapes_per_mode(small_weights, rng):
    image = rng.random((3, 16, 16))
    jfe = encode(image, small_weights, "jfe")
    ife = encode(image, small_weights, "ife")
    assert jfe.patches.shape == ife.patches.shape == (3, 16, 16)
    assert jfe.cls.shape == (1, 16)
    assert ife.cls.shape == (3, 16)


def test_ife_channels_are_independent(small_weights, rng):
    image = rng.random((3, 16, 16))
    changed = image.copy()
    changed[1] = rng.random((16, 16))
    a = encode(image, small_weights, "ife")
    b = encode(changed, small_weights, "ife")
    np.testing.assert_array_equal(a.patches[0], b.patches[0])
    np.testing.assert_array_equal(a.patches[2], b.patches[2])
    np.testing.assert_array_equal(a.cls[0], b.cls[0])
    assert not np.array_equal(a.patches[1], b.patches[1])


def test_jfe_channels_attend_to_each_other(small_weights, rng):
    image = rng.random((2, 16, 16))
    changed = image.copy()
    changed[1] = rng.random((16, 16))
    a = encode(image, small_weights, "jfe")
    b = encode(changed, small_weights, "jfe")
    assert not np.allclose(a.patches[0], b.patches[0])


def test_ife_commutes_with_channel_permutation(small_weights, rng):
    image = rng.random((3, 16, 16))
    order = [2, 0, 1]
    a = encode(image, small_weights, "ife")
    b = encode(image[order], small_weights, "ife")
    np.testing.assert_allclose(a.patches[order], b.patches, atol=1e-12, rtol=0)


def test_jfe_sequence_limit(small_encoder_config, rng):
    weights = init_encoder(replace(small_encoder_config, max_sequence=33))
    batch = tokenize(rng.random((2, 16, 16)), weights)
    assert encode_jfe(batch, weights).patches.shape == (2, 16, 16)
    with pytest.raises(ShapeError, match="max_sequence"):
        encode_jfe(tokenize(rng.random((3, 16, 16)), weights), weights)
    # IFE is bounded per channel only
    assert encode_ife(tokenize(rng.random((3, 16, 16)), weights), weights).channels == 3


def test_unknown_mode_is_rejected(small_weights):
    with pytest.raises(ConfigError):
        encode(np.zeros((1, 16, 16)), small_weights, "joint")


def test_init_is_deterministic_and_frozen(small_encoder_config):
    a, b = init_encoder(small_encoder_config), init_encoder(small_encoder_config)
    assert a.checksum() == b.checksum()
    other = init_encoder(replace(small_encoder_config, init_seed=1))
    assert other.checksum() != a.checksum()
    with pytest.raises(ValueError):
        a.patch_w[0, 0] = 1.0


def test_encoding_leaves_weights_untouched(small_weights, rng):
    before = small_weights.checksum()
    encode(rng.random((3, 16, 16)), small_weights, "jfe")
    encode(rng.random((3, 16, 16)), small_weights, "ife")
    assert small_weights.checksum() == before


@pytest.mark.asyncio
async def test_encode_many_matches_sequential_for_any_job_count(small_weights, rng):
    images = [rng.random((2, 16, 16)) for _ in range(6)]
    expected = [encode(image, small_weights, "ife") for image in images]
    for jobs in (1, 3):
        got = await encode_many(images, small_weights, "ife", jobs=jobs)
        for e, g in zip(expected, got):
            np.testing.assert_array_equal(e.patches, g.patches)
            np.testing.assert_array_equal(e.cls, g.cls)


def test_jfe_is_channel_equivariant(small_weights, rng):
    image = rng.random((3, 16, 16))
    order = [1, 2, 0]
    a = encode(image, small_weights, "jfe")
    b = encode(image[order], small_weights, "jfe")
    np.testing.assert_allclose(a.patches[order], b.patches, atol=1e-10, rtol=0)
    # one cls token for the whole set
    np.testing.assert_allclose(a.cls, b.cls, atol=1e-10, rtol=0)


def test_jfe_equivariance_over_every_permutation(rng):
    weights = init_encoder(EncoderConfig(image_size=8, patch_size=4, embed_dim=8, depth=1, heads=2))
    image = rng.random((3, 8, 8))
    base = encode(image, weights, "jfe")
    assert base.patches.shape == (3, 4, 8)
    for order in itertools.permutations(range(3)):
        order = list(order)
        permuted = encode(image[order], weights, "jfe")
        np.testing.assert_allclose(base.patches[order], permuted.patches, atol=1e-10, rtol=0)
        np.testing.assert_allclose(base.cls, permuted.cls, atol=1e-10, rtol=0)


def test_every_channel_shares_position_embedding(small_weights):
    # blank pixels leave only the bias and the position term
    batch = tokenize(np.zeros((3, 16, 16)), small_weights)
    expected = small_weights.patch_b + small_weights.pos_embed[1:]
    for channel in range(3):
        np.testing.assert_allclose(batch.tokens[channel], expected, atol=1e-12, rtol=0)
