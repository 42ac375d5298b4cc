"""Tests for diversity metrics and the analytic cost models."""

import math

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from mci_probe.analysis import (
    ENCODER_COLUMNS,
    CLS_DIVERSITY_COLUMNS,
    PATCH_DIVERSITY_COLUMNS,
    POOLER_FLOPS_COLUMNS,
    DiversityReport,
    diversity_report,
    emit_figures,
    encoder_flops,
    flops_sweep,
    instance_diversity,
    mean_pairwise_channel_cosine,
    pooler_flops,
    position_similarity,
    relative_difference,
)
from mci_probe.config import ARCHS, EncoderConfig, GeneratorConfig
from mci_probe.encoder import FeatureMap, encode
from mci_probe.errors import ConfigError, ModeMismatchError, ShapeError
from mci_probe.synthdata import generate_dataset

VIT_S = EncoderConfig(image_size=224, patch_size=16, embed_dim=384, depth=12, heads=6)


@pytest.mark.parametrize(
    "vectors, expected",
    [
        ([[1.0, 0.0], [2.0, 0.0]], 1.0),
        ([[1.0, 0.0], [0.0, 1.0]], 0.0),
        ([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], math.sqrt(2) / 3),
    ],
)
def test_mean_pairwise_cosine_examples(vectors, expected):
    assert mean_pairwise_channel_cosine(np.array(vectors)) == pytest.approx(expected)


def test_cosine_rejects_degenerate_input():
    with pytest.raises(ShapeError):
        mean_pairwise_channel_cosine(np.ones((1, 4)))
    with pytest.raises(ShapeError):
        mean_pairwise_channel_cosine(np.array([[1.0, 0.0], [0.0, 0.0]]))


def _rotating_patches(n=16):
    """C=2: channel 1 at position k is rotated so that its cosine with channel 0 is sims[k]."""
    sims = np.linspace(-0.5, 1.0, n)
    theta = np.arccos(sims)
    patches = np.zeros((2, n, 2))
    patches[0, :, 0] = 1.0
    patches[1, :, 0] = np.cos(theta)
    patches[1, :, 1] = np.sin(theta)
    return patches, sims


def test_position_similarity():
    patches, sims = _rotating_patches()
    np.testing.assert_allclose(position_similarity(patches), sims, atol=1e-12)


def test_filter_keeps_least_similar_positions():
    patches, sims = _rotating_patches(16)
    fm = FeatureMap("jfe", patches, np.ones((1, 2)))
    # floor(16 * 0.75) = 12 dropped, the 4 least similar remain
    assert instance_diversity(fm, "patch", 0.75) == pytest.approx(np.sort(sims)[:4].mean())
    assert instance_diversity(fm, "patch", 0.0) == pytest.approx(sims.mean())
    with pytest.raises(ConfigError):
        instance_diversity(fm, "patch", 1.0)
    with pytest.raises(ConfigError):
        instance_diversity(fm, "patch", 1.5)


def test_cls_variant_needs_per_channel_cls():
    patches, _ = _rotating_patches(4)
    with pytest.raises(ModeMismatchError):
        instance_diversity(FeatureMap("jfe", patches, np.ones((1, 2))), "cls")
    ife = FeatureMap("ife", patches, np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert instance_diversity(ife, "cls") == pytest.approx(0.0)
    with pytest.raises(ConfigError):
        instance_diversity(ife, "pixels")


@pytest.mark.parametrize("mode", ["ife", "jfe"])
def test_redundant_channels_are_less_diverse(small_weights, mode):
    def mean_sim(rho):
        cfg = GeneratorConfig(channels=3, image_size=16, redundancy=rho, n_train=12, n_val=0, n_test=0)
        dataset = generate_dataset(cfg)
        maps = [encode(image, small_weights, mode) for image in dataset.iter_split("train")]
        return diversity_report(maps, "synthetic", "patch", 0.75).mean_sim

    identical = mean_sim(1.0)
    assert identical > 0.95
    assert mean_sim(0.0) < identical


@pytest.mark.parametrize("mode", ["ife", "jfe"])
def test_feature_similarity_rises_with_redundancy(small_weights, mode):
    levels = [0.0, 0.25, 0.5, 0.75, 1.0]
    sims = []
    for rho in levels:
        cfg = GeneratorConfig(channels=3, image_size=16, redundancy=rho, n_train=30, n_val=0, n_test=0)
        maps = [encode(image, small_weights, mode) for image in generate_dataset(cfg).iter_split("train")]
        sims.append(diversity_report(maps, f"rho{rho}", "patch", 0.0).mean_sim)
    assert stats.spearmanr(levels, sims)[0] >= 0.9


def test_independent_encoding_keeps_channels_more_diverse(small_weights):
    cfg = GeneratorConfig(channels=3, image_size=16, redundancy=0.0, n_train=20, n_val=0, n_test=0)
    images = list(generate_dataset(cfg).iter_split("train"))
    ife = diversity_report([encode(image, small_weights, "ife") for image in images], "rho0", "patch")
    jfe = diversity_report([encode(image, small_weights, "jfe") for image in images], "rho0", "patch")
    assert ife.mean_sim < jfe.mean_sim


def test_diversity_report_fields(small_weights, rng):
    maps = [encode(rng.random((3, 16, 16)), small_weights, "ife") for _ in range(3)]
    report = diversity_report(maps, "toy", "cls")
    assert report.n_instances == 3
    assert report.encoding == "ife"
    assert report.filter_fraction == 0.0
    assert -1.0 <= report.mean_sim <= 1.0
    with pytest.raises(ShapeError):
        diversity_report([], "toy")


def test_single_channel_encoder_costs_match():
    jfe, ife = encoder_flops(VIT_S, 1, "jfe"), encoder_flops(VIT_S, 1, "ife")
    assert jfe.flops == ife.flops
    assert jfe.attention_flops == ife.attention_flops
    assert jfe.N == 196


@pytest.mark.parametrize("channels", [2, 4, 8, 16])
def test_joint_attention_costs_about_c_times_more(channels):
    jfe = encoder_flops(VIT_S, channels, "jfe")
    ife = encoder_flops(VIT_S, channels, "ife")
    assert jfe.attention_flops / ife.attention_flops == pytest.approx(channels, rel=0.01)


def test_joint_attention_is_quadratic_in_tokens():
    small = encoder_flops(EncoderConfig(image_size=112, patch_size=8, embed_dim=384, heads=6), 8, "jfe")
    large = encoder_flops(EncoderConfig(image_size=224, patch_size=16, embed_dim=384, heads=6), 8, "jfe")
    assert small.N == large.N == 196
    doubled = encoder_flops(EncoderConfig(image_size=160, patch_size=8, embed_dim=384, heads=6), 8, "jfe")
    assert doubled.N == 400
    assert doubled.attention_flops / small.attention_flops == pytest.approx((1 + 8 * 400) ** 2 / (1 + 8 * 196) ** 2)
    assert doubled.attention_flops / small.attention_flops == pytest.approx(4.0, rel=0.05)


def test_encoder_cost_ratio_grows_with_channels():
    ratios = [
        encoder_flops(VIT_S, c, "jfe").flops / encoder_flops(VIT_S, c, "ife").flops for c in (1, 2, 4, 8, 16)
    ]
    assert ratios[0] == 1.0
    assert all(b > a for a, b in zip(ratios, ratios[1:]))


def test_encoder_cost_rejects_bad_input():
    with pytest.raises(ConfigError):
        encoder_flops(VIT_S, 0, "ife")
    with pytest.raises(ConfigError):
        encoder_flops(VIT_S, 2, "both")


@pytest.mark.parametrize("arch", ARCHS)
def test_pooler_cost_parity(arch):
    jap = pooler_flops(arch, "jap", 8, 196, 384)
    dcp = pooler_flops(arch, "dcp", 8, 196, 384)
    assert relative_difference(jap, dcp) <= 0.02
    assert jap.params == dcp.params


def test_mean_pooler_dcp_overhead_is_one_over_n():
    for tokens in (16, 196):
        jap = pooler_flops("mean", "jap", 8, tokens, 384)
        dcp = pooler_flops("mean", "dcp", 8, tokens, 384)
        assert dcp.flops / jap.flops == pytest.approx(1 + 1 / tokens)


def test_pooler_cost_rejects_unknown_strategy():
    with pytest.raises(ConfigError):
        pooler_flops("mean", "both", 2, 4, 8)


def test_flops_sweep_covers_grid():
    reports = flops_sweep(["mean", "mhca"], [2, 4], [16, 64], 384)
    assert len(reports) == 2 * 2 * 2 * 2
    assert {r.strategy for r in reports} == {"jap", "dcp"}
    assert all(r.arch in ("mean", "mhca") for r in reports)


def test_emit_figures_writes_tables(tmp_path):
    diversity = [
        DiversityReport("b", "ife", "patch", 0.4, 10, 0.75),
        DiversityReport("a", "jfe", "patch", 0.9, 10, 0.75),
        DiversityReport("a", "ife", "cls", 0.2, 10, 0.0),
    ]
    costs = [encoder_flops(VIT_S, 4, "jfe"), *flops_sweep(["mean"], [4], [196], 384)]
    paths = emit_figures(diversity, costs, tmp_path / "figs")

    cls_table = pd.read_csv(paths["cls_diversity"])
    assert list(cls_table.columns) == CLS_DIVERSITY_COLUMNS
    assert len(cls_table) == 1
    patch_table = pd.read_csv(paths["patch_diversity"])
    assert list(patch_table.columns) == PATCH_DIVERSITY_COLUMNS
    assert list(patch_table["dataset"]) == ["a", "b"]
    pooler_table = pd.read_csv(paths["pooler_flops_sweep"])
    assert list(pooler_table.columns) == POOLER_FLOPS_COLUMNS
    assert set(pooler_table["strategy"]) == {"jap", "dcp"}
    encoder = pd.read_csv(paths["encoder_flops"])
    assert list(encoder.columns) == ENCODER_COLUMNS
    assert encoder.loc[0, "component"] == "encoder-jfe"


def test_emit_figures_empty_inputs_give_headers(tmp_path):
    paths = emit_figures([], [], tmp_path)
    for name, columns in (
        ("cls_diversity", CLS_DIVERSITY_COLUMNS),
        ("patch_diversity", PATCH_DIVERSITY_COLUMNS),
        ("pooler_flops_sweep", POOLER_FLOPS_COLUMNS),
        ("encoder_flops", ENCODER_COLUMNS),
    ):
        assert paths[name].read_text(encoding="utf-8").strip() == ",".join(columns)
