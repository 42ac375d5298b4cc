"""Inter-channel diversity and analytic cost models.

Costs are model counts, not measurements: a multiply-accumulate is 2 FLOPs.
The encoder model charges each transformer layer over a sequence of S
tokens ``4*S*D^2 + 2*S^2*D`` MACs for attention and ``2*S*D*(r*D)`` MACs
for the MLP, plus the patch embedding.
"""

import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .config import EncoderConfig
from .encoder import FeatureMap
from .errors import ConfigError, ModeMismatchError, ShapeError
from .pooling import pooler_class, pooler_param_count

logger = logging.getLogger(__name__)

TOKEN_SOURCES = ("patch", "cls")
CLS_DIVERSITY_COLUMNS = ["dataset", "encoding", "mean_sim", "n_instances"]
PATCH_DIVERSITY_COLUMNS = ["dataset", "encoding", "filter_fraction", "mean_sim", "n_instances"]
POOLER_FLOPS_COLUMNS = ["arch", "strategy", "C", "N", "flops"]
ENCODER_COLUMNS = ["component", "C", "N", "D", "depth", "heads", "flops", "attention_flops", "params"]


@dataclass(frozen=True)
class DiversityReport:
    dataset: str
    encoding: str
    token_source: str
    mean_sim: float  # mean over instances, in [-1, 1]
    n_instances: int
    filter_fraction: float


@dataclass(frozen=True)
class CostReport:
    component: str  # encoder-jfe | encoder-ife | pooler-jap | pooler-dcp
    C: int
    N: int
    D: int
    flops: int
    params: int
    arch: str = ""
    depth: int = 0
    heads: int = 0
    attention_flops: int = 0  # encoder only: the S^2 terms

    @property
    def strategy(self) -> str:
        return self.component.removeprefix("pooler-") if self.component.startswith("pooler-") else ""


def _unit_rows(vectors: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ShapeError(f"{what}: zero vector has no direction (cosine undefined)")
    return vectors / norms


def mean_pairwise_channel_cosine(vectors: np.ndarray) -> float:
    """Average cos(v_i, v_j) over all channel pairs i < j of a (C, D) array."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] < 2:
        raise ShapeError(f"need (C>=2, D) vectors, got {vectors.shape}")
    unit = _unit_rows(vectors, "mean_pairwise_channel_cosine")
    gram = unit @ unit.T
    upper = np.triu_indices(len(unit), k=1)
    return float(np.clip(gram[upper].mean(), -1.0, 1.0))


def position_similarity(patches: np.ndarray) -> np.ndarray:
    """Mean pairwise inter-channel cosine at each spatial position: (C, N, D) -> (N,)."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 3 or patches.shape[0] < 2:
        raise ShapeError(f"need (C>=2, N, D) patch features, got {patches.shape}")
    unit = _unit_rows(patches, "position_similarity")
    gram = np.einsum("cnd,end->nce", unit, unit)
    i, j = np.triu_indices(patches.shape[0], k=1)
    return np.clip(gram[:, i, j].mean(axis=-1), -1.0, 1.0)


def instance_diversity(
    features: FeatureMap, token_source: str = "patch", filter_fraction: float = 0.75
) -> float:
    """Inter-channel similarity of one instance.

    ``patch``: positions are ranked by their inter-channel similarity, the
    most similar ``floor(N * filter_fraction)`` are dropped and the rest are
    averaged. ``cls``: similarity of the per-channel cls vectors, IFE only.
    """
    if token_source == "cls":
        if features.mode != "ife":
            raise ModeMismatchError("the cls variant needs one cls vector per channel (IFE features)")
        return mean_pairwise_channel_cosine(features.cls)
    if token_source != "patch":
        raise ConfigError(f"unknown token source: {token_source}")
    if not 0.0 <= filter_fraction <= 1.0:
        raise ConfigError(f"filter_fraction must lie in [0, 1], got {filter_fraction}")

    sims = position_similarity(features.patches)
    keep = len(sims) - math.floor(len(sims) * filter_fraction)
    if keep <= 0:
        raise ConfigError(f"filter_fraction {filter_fraction} removes all {len(sims)} positions")
    return float(np.sort(sims, kind="stable")[:keep].mean())


def diversity_report(
    features: Iterable[FeatureMap],
    dataset: str,
    token_source: str = "patch",
    filter_fraction: float = 0.75,
) -> DiversityReport:
    values = []
    encoding = ""
    for fm in features:
        encoding = fm.mode
        values.append(instance_diversity(fm, token_source, filter_fraction))
    if not values:
        raise ShapeError("diversity report needs at least one instance")
    logger.info("%s %s/%s: mean similarity %.4f over %d instances",
                dataset, encoding, token_source, np.mean(values), len(values))
    return DiversityReport(
        dataset=dataset,
        encoding=encoding,
        token_source=token_source,
        mean_sim=float(np.mean(values)),
        n_instances=len(values),
        filter_fraction=filter_fraction if token_source == "patch" else 0.0,
    )


def encoder_param_count(cfg: EncoderConfig) -> int:
    d, hidden, n = cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio, cfg.num_patches
    per_block = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (d * hidden + hidden) + (hidden * d + d)
    return cfg.patch_size**2 * d + d + (n + 1) * d + d + cfg.depth * per_block + 2 * d


def _layer_macs(seq: int, cfg: EncoderConfig) -> tuple[int, int]:
    """(total, attention-score) MACs of one layer over ``seq`` tokens."""
    d = cfg.embed_dim
    scores = 2 * seq * seq * d
    return 4 * seq * d * d + scores + 2 * seq * d * (cfg.mlp_ratio * d), scores


def encoder_flops(cfg: EncoderConfig, channels: int, mode: str) -> CostReport:
    """Analytic encoder cost for one C-channel image.

    JFE runs one pass over S = 1 + C*N tokens; IFE runs C passes over
    S = 1 + N tokens each.
    """
    if channels < 1:
        raise ConfigError(f"channels must be >= 1, got {channels}")
    n, d = cfg.num_patches, cfg.embed_dim
    if mode == "jfe":
        passes, seq = 1, 1 + channels * n
    elif mode == "ife":
        passes, seq = channels, 1 + n
    else:
        raise ConfigError(f"unknown encoding mode: {mode}")
    layer, scores = _layer_macs(seq, cfg)
    patch_embed = channels * n * cfg.patch_size**2 * d
    return CostReport(
        component=f"encoder-{mode}",
        C=channels,
        N=n,
        D=d,
        flops=2 * (patch_embed + passes * cfg.depth * layer),
        params=encoder_param_count(cfg),
        depth=cfg.depth,
        heads=cfg.heads,
        attention_flops=2 * passes * cfg.depth * scores,
    )


def pooler_flops(arch: str, strategy: str, channels: int, tokens: int, dim: int, **options: int) -> CostReport:
    """JAP = cost_g(C*N); DCP = C * cost_g(N) + cost_g(C)."""
    cls = pooler_class(arch)
    opts = {**cls.DEFAULTS, **options}
    if strategy == "jap":
        flops = cls.flops(channels * tokens, dim, opts)
    elif strategy == "dcp":
        flops = channels * cls.flops(tokens, dim, opts) + cls.flops(channels, dim, opts)
    else:
        raise ConfigError(f"unknown pooling strategy: {strategy}")
    return CostReport(
        component=f"pooler-{strategy}",
        C=channels,
        N=tokens,
        D=dim,
        flops=int(flops),
        params=pooler_param_count(arch, dim, **opts),
        arch=arch,
        heads=opts.get("heads", 0),
    )


def flops_sweep(
    archs: Sequence[str], channels: Sequence[int], tokens: Sequence[int], dim: int
) -> list[CostReport]:
    """JAP and DCP reports for every arch over the C x N grid."""
    return [
        pooler_flops(arch, strategy, c, n, dim)
        for arch in archs
        for c in channels
        for n in tokens
        for strategy in ("jap", "dcp")
    ]


def relative_difference(jap: CostReport, dcp: CostReport) -> float:
    return abs(dcp.flops - jap.flops) / jap.flops


def _frame(rows: list[dict], columns: list[str], keys: list[str]) -> pd.DataFrame:
    frame = pd.DataFrame(rows, columns=columns)
    return frame.sort_values(keys, kind="stable").reset_index(drop=True) if rows else frame


def emit_figures(
    diversity: Sequence[DiversityReport],
    costs: Sequence[CostReport],
    out_dir: str | Path,
    plots: bool = False,
) -> dict[str, Path]:
    """Write one CSV per results table into ``out_dir``.

    - ``cls_diversity.csv``: cls-variant reports
    - ``patch_diversity.csv``: patch-variant reports
    - ``pooler_flops_sweep.csv``: pooler cost reports
    - ``encoder_flops.csv``: encoder cost reports

    Empty inputs give header-only files. With ``plots`` an SVG is rendered
    next to each non-empty CSV.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    tables = {
        "cls_diversity": _frame(
            [asdict(r) for r in diversity if r.token_source == "cls"],
            CLS_DIVERSITY_COLUMNS, ["dataset", "encoding"],
        ),
        "patch_diversity": _frame(
            [asdict(r) for r in diversity if r.token_source == "patch"],
            PATCH_DIVERSITY_COLUMNS, ["dataset", "encoding", "filter_fraction"],
        ),
        "pooler_flops_sweep": _frame(
            [{**asdict(r), "strategy": r.strategy} for r in costs if r.component.startswith("pooler-")],
            POOLER_FLOPS_COLUMNS, ["arch", "strategy", "C", "N"],
        ),
        "encoder_flops": _frame(
            [asdict(r) for r in costs if r.component.startswith("encoder-")],
            ENCODER_COLUMNS, ["component", "C", "N"],
        ),
    }
    paths = {}
    for name, frame in tables.items():
        path = out_dir / f"{name}.csv"
        frame.to_csv(path, index=False)
        paths[name] = path
    logger.info("Wrote %d result tables to %s", len(paths), out_dir)

    if plots:
        from .plots import render_svgs

        paths.update(render_svgs(tables, out_dir))
    return paths
