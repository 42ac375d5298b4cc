"""Static SVG charts for the result tables. Needs the ``plots`` extra."""

import logging
from collections.abc import Mapping
from pathlib import Path

import pandas as pd

from .errors import ConfigError

logger = logging.getLogger(__name__)


def _pyplot():
    try:
        import matplotlib
    except ImportError as exc:
        raise ConfigError("plotting needs matplotlib: install mci-probe[plots]") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # fixed hash salt keeps repeated renders byte-identical
    plt.rcParams["svg.hashsalt"] = "mci-probe"
    return plt


def _bar(plt, frame: pd.DataFrame, label_cols: list[str], value: str, title: str, path: Path) -> None:
    labels = frame[label_cols].astype(str).agg(" ".join, axis=1)
    fig, ax = plt.subplots(figsize=(max(4.0, 0.5 * len(frame)), 3.5))
    ax.bar(range(len(frame)), frame[value])
    ax.set_xticks(range(len(frame)), labels, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel(value)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _flop_lines(plt, frame: pd.DataFrame, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    sweep = "C" if frame["C"].nunique() >= frame["N"].nunique() else "N"
    for (arch, strategy), group in frame.groupby(["arch", "strategy"], sort=True):
        group = group.sort_values(sweep)
        ax.plot(group[sweep], group["flops"], marker="o", linestyle="-" if strategy == "jap" else "--",
                label=f"{arch} {strategy}")
    ax.set_xlabel(sweep)
    ax.set_ylabel("FLOPs")
    ax.set_yscale("log")
    ax.legend(fontsize=6, ncol=2)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def render_svgs(tables: Mapping[str, pd.DataFrame], out_dir: Path) -> dict[str, Path]:
    """Render every non-empty known table; returns name -> SVG path."""
    plt = _pyplot()
    paths: dict[str, Path] = {}
    for name, frame in tables.items():
        if frame.empty:
            continue
        path = out_dir / f"{name}.svg"
        if name == "pooler_flops_sweep":
            _flop_lines(plt, frame, path)
        elif name in ("cls_diversity", "patch_diversity"):
            _bar(plt, frame, ["dataset", "encoding"], "mean_sim", "inter-channel similarity", path)
        elif name == "encoder_flops":
            _bar(plt, frame, ["component", "C"], "flops", "encoder FLOPs", path)
        elif name == "ablation":
            melted = frame.melt(id_vars=["dataset", "arch"], var_name="method", value_name="delta")
            _bar(plt, melted.dropna(), ["dataset", "arch", "method"], "delta", "delta vs JFE+JAP", path)
        else:
            continue
        paths[f"{name}_svg"] = path
    logger.info("Rendered %d SVG charts into %s", len(paths), out_dir)
    return paths
