"""Tests for set poolers and the JAP / DCP wrappers."""

import math

import numpy as np
import pytest

from mci_probe.config import ARCHS
from mci_probe.encoder import encode
from mci_probe.errors import NonFiniteError, ShapeError, UnknownArchError
from mci_probe.numerics import gradient_check
from mci_probe.pooling import (
    PoolingWrapper,
    dcp_forward,
    init_pooler,
    jap_forward,
    param_count,
    pool,
    pooler_param_count,
)


def _perturbed(arch, dim, rng, seed=0):
    """A pooler whose weights are far enough from init for attention to be non-uniform."""
    pooler = init_pooler(arch, dim, seed)
    for p in pooler.parameters():
        p.data = p.data + 0.3 * rng.normal(size=p.shape)
    return pooler


def test_mean_pooler_example():
    out = pool(init_pooler("mean", 1), np.array([[1.0], [3.0]]))
    np.testing.assert_allclose(out.data, [2.0])


def test_abmilp_singleton_returns_the_row(rng):
    row = rng.normal(size=(1, 8))
    out = pool(_perturbed("abmilp", 8, rng), row)
    np.testing.assert_array_equal(out.data, row[0])


def test_simpool_hand_computed_attention():
    pooler = init_pooler("simpool", 2)
    pooler.params["q_w"].data = np.eye(2)
    pooler.params["k_w"].data = np.eye(2)
    rows = np.array([[2.0, 0.0], [0.0, 1.0]])
    # query = row mean = (1, 0.5); scores = q . x_i / sqrt(2)
    s1, s2 = 2.0 / math.sqrt(2), 0.5 / math.sqrt(2)
    w1 = math.exp(s1) / (math.exp(s1) + math.exp(s2))
    expected = w1 * rows[0] + (1 - w1) * rows[1]
    np.testing.assert_allclose(pool(pooler, rows).data, expected, atol=1e-12)


@pytest.mark.parametrize("arch", ARCHS)
def test_row_permutation_invariance(arch, rng):
    pooler = _perturbed(arch, 8, rng)
    rows = rng.normal(size=(7, 8))
    perm = rng.permutation(7)
    np.testing.assert_allclose(pool(pooler, rows).data, pool(pooler, rows[perm]).data, atol=1e-9, rtol=0)


@pytest.mark.parametrize("arch", ARCHS)
def test_leading_batch_dims(arch, rng):
    pooler = _perturbed(arch, 8, rng)
    rows = rng.normal(size=(2, 3, 5, 8))
    batched = pool(pooler, rows).data
    assert batched.shape == (2, 3, 8)
    np.testing.assert_allclose(batched[1, 2], pool(pooler, rows[1, 2]).data, atol=1e-12)


@pytest.mark.parametrize("arch", ["mean", "simpool", "abmilp"])
def test_weight_only_poolers_stay_in_convex_hull(arch, rng):
    rows = rng.normal(size=(6, 4))
    out = pool(_perturbed(arch, 4, rng), rows).data
    assert np.all(out >= rows.min(axis=0) - 1e-12)
    assert np.all(out <= rows.max(axis=0) + 1e-12)


@pytest.mark.parametrize("arch", ["mean", "simpool", "abmilp"])
def test_all_equal_rows_return_the_row(arch, rng):
    row = rng.normal(size=4)
    out = pool(_perturbed(arch, 4, rng), np.tile(row, (5, 1))).data
    np.testing.assert_allclose(out, row, atol=1e-12)


def test_pool_rejects_bad_input():
    pooler = init_pooler("mhca", 8)
    with pytest.raises(ShapeError):
        pool(pooler, np.zeros((0, 8)))
    with pytest.raises(ShapeError):
        pool(pooler, np.zeros((3, 4)))
    with pytest.raises(NonFiniteError):
        pool(pooler, np.full((2, 8), np.nan))


def test_wrappers_on_hand_example():
    x = np.array([[[1.0], [3.0]], [[5.0], [7.0]]])  # C=2, N=2, D=1
    mean = init_pooler("mean", 1)
    np.testing.assert_allclose(jap_forward(PoolingWrapper("jap", mean), x).data, [4.0])
    np.testing.assert_allclose(dcp_forward(PoolingWrapper("dcp", mean), x).data, [4.0])


def test_mean_pooler_dcp_equals_jap(rng):
    mean = init_pooler("mean", 6)
    x = rng.normal(size=(1000, 4, 5, 6))
    jap = PoolingWrapper("jap", mean)(x).data
    dcp = PoolingWrapper("dcp", mean)(x).data
    np.testing.assert_allclose(dcp, jap, atol=1e-12, rtol=0)


@pytest.mark.parametrize("arch", ARCHS)
def test_single_channel_jap_equals_pool(arch, rng):
    pooler = _perturbed(arch, 8, rng)
    x = rng.normal(size=(1, 6, 8))
    np.testing.assert_allclose(jap_forward(PoolingWrapper("jap", pooler), x).data, pool(pooler, x[0]).data)


def test_single_channel_dcp_with_abmilp_equals_jap(rng):
    pooler = _perturbed("abmilp", 8, rng)
    x = rng.normal(size=(1, 6, 8))
    np.testing.assert_allclose(
        dcp_forward(PoolingWrapper("dcp", pooler), x).data,
        jap_forward(PoolingWrapper("jap", pooler), x).data,
        atol=1e-12,
        rtol=0,
    )


@pytest.mark.parametrize("arch", ARCHS)
def test_dcp_channel_permutation_invariance(arch, rng):
    wrapper = PoolingWrapper("dcp", _perturbed(arch, 8, rng))
    x = rng.normal(size=(4, 5, 8))
    np.testing.assert_allclose(wrapper(x).data, wrapper(x[[3, 1, 0, 2]]).data, atol=1e-9, rtol=0)


def test_cap_output_ignores_channel_order(small_weights, rng):
    wrapper = PoolingWrapper("dcp", _perturbed("mhca", 16, rng))
    image = rng.random((3, 16, 16))
    a = wrapper(encode(image, small_weights, "ife").patches).data
    b = wrapper(encode(image[[1, 2, 0]], small_weights, "ife").patches).data
    np.testing.assert_allclose(a, b, atol=1e-9, rtol=0)


@pytest.mark.parametrize("arch", ARCHS)
def test_parameter_parity(arch):
    pooler = init_pooler(arch, 16)
    jap, dcp = PoolingWrapper("jap", pooler), PoolingWrapper("dcp", pooler)
    assert param_count(jap) == param_count(dcp) == param_count(pooler)
    assert param_count(pooler) == pooler_param_count(arch, 16)


def test_param_counts():
    assert param_count(init_pooler("mean", 64)) == 0
    assert param_count(init_pooler("mhca", 64)) == 3 * 64**2 + 4 * 64 == 12544


def test_init_pooler_is_seeded():
    a, b = init_pooler("protobin", 64, seed=3), init_pooler("protobin", 64, seed=3)
    assert a.params["prototypes"].shape == (8, 64)
    np.testing.assert_array_equal(a.params["prototypes"].data, b.params["prototypes"].data)
    c = init_pooler("protobin", 64, seed=4)
    assert not np.array_equal(a.params["prototypes"].data, c.params["prototypes"].data)
    assert init_pooler("mean", 4, seed=1).params == {}


def test_init_pooler_options_and_errors():
    assert init_pooler("ep", 8, queries=2).params["queries"].shape == (2, 8)
    assert init_pooler("mhca", 8).options["heads"] == 4
    with pytest.raises(UnknownArchError):
        init_pooler("gem", 8)
    with pytest.raises(ShapeError):
        init_pooler("mab", 10, heads=4)
    with pytest.raises(ShapeError):
        PoolingWrapper("both", init_pooler("mean", 4))


@pytest.mark.parametrize("arch", [a for a in ARCHS if a != "mean"])
@pytest.mark.parametrize("strategy", ["jap", "dcp"])
def test_pooler_gradients_match_finite_differences(arch, strategy, rng):
    pooler = _perturbed(arch, 8, rng)
    wrapper = PoolingWrapper(strategy, pooler)
    x = rng.normal(size=(2, 3, 4, 8))
    weights = rng.normal(size=(2, 8))

    def loss():
        return (wrapper(x) * weights).sum()

    assert gradient_check(loss, pooler.parameters(), n_coords=20, h=1e-3) < 1e-4
