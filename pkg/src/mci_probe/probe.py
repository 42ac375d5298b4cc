"""Probe training over frozen, precomputed features.

A probe is one shared pooler (wrapped as JAP or DCP) followed by a linear
head. Only the probe is trained; encoder outputs are read from feature
files and never modified.
"""

import asyncio
import logging
import math
import threading
import time
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .config import ENCODINGS, STRATEGIES, LRSearchConfig, ProbeConfig
from .errors import EmptySplitError, HashMismatchError, ModeMismatchError
from .numerics import Tensor, cross_entropy, linear, parameter
from .optim import AdamW
from .pooling import PoolingWrapper, init_pooler
from .rng import RngStream
from .store import FeatureFile, FeatureSet, read_features
from .synthdata import read_manifest

logger = logging.getLogger(__name__)

EVAL_BATCH = 512
RESULT_COLUMNS = [
    "dataset", "encoding", "strategy", "arch", "seed",
    "lr", "lr_source", "val_acc", "test_acc", "status",
]
CELL_KEYS = ["dataset", "encoding", "strategy", "arch"]
METHODS = {
    ("jfe", "jap"): "JFE+JAP",
    ("ife", "jap"): "IFE+JAP",
    ("jfe", "dcp"): "JFE+DCP",
    ("ife", "dcp"): "CAP",
}


@dataclass
class ProbeModel:
    """Pooling wrapper plus a linear head (D -> K)."""

    wrapper: PoolingWrapper
    head_w: Tensor
    head_b: Tensor

    def logits(self, patches: "Tensor | np.ndarray") -> Tensor:
        return linear(self.wrapper(patches), self.head_w, self.head_b)

    def parameters(self) -> list[Tensor]:
        return [*self.wrapper.parameters(), self.head_w, self.head_b]

    def snapshot(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def restore(self, arrays: Sequence[np.ndarray]) -> None:
        for p, data in zip(self.parameters(), arrays):
            p.data = data.copy()

    def predict(self, patches: np.ndarray) -> np.ndarray:
        """Argmax class per sample, computed in fixed-size batches."""
        out = [
            np.argmax(self.logits(patches[i : i + EVAL_BATCH]).data, axis=-1)
            for i in range(0, len(patches), EVAL_BATCH)
        ]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def init_probe(cfg: ProbeConfig, dim: int, num_classes: int) -> ProbeModel:
    pooler = init_pooler(cfg.arch, dim, cfg.seed, **cfg.pooler_options)
    head = RngStream(cfg.seed).child("probe", "head").trunc_normal((dim, num_classes), std=0.02)
    return ProbeModel(
        PoolingWrapper(cfg.strategy, pooler),
        parameter(head),
        parameter(np.zeros(num_classes)),
    )


@dataclass
class ProbeRun:
    config: ProbeConfig
    train_acc: float
    val_acc: float
    test_acc: float | None
    loss_curve: list[float]
    val_curve: list[float]
    elapsed: float  # seconds
    lr_source: str  # coarse | fine | fixed | chosen
    best_epoch: int
    model: ProbeModel = field(repr=False, compare=False)

    def metrics(self) -> dict[str, object]:
        """Everything except wall-clock time."""
        return {
            "train_acc": self.train_acc,
            "val_acc": self.val_acc,
            "test_acc": self.test_acc,
            "loss_curve": list(self.loss_curve),
            "val_curve": list(self.val_curve),
            "best_epoch": self.best_epoch,
        }


def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise EmptySplitError("cannot compute accuracy on an empty split")
    return float(np.mean(np.asarray(predictions) == np.asarray(labels)))


def evaluate(run: ProbeRun | ProbeModel, split: FeatureSet) -> float:
    """Argmax-of-logits accuracy of a trained probe on ``split``."""
    if len(split) == 0:
        raise EmptySplitError("cannot evaluate on an empty split")
    model = run.model if isinstance(run, ProbeRun) else run
    return accuracy(model.predict(split.patches), split.labels)


def _check_mode(cfg: ProbeConfig, split: FeatureSet | None, name: str) -> None:
    if split is not None and split.mode != cfg.encoding:
        raise ModeMismatchError(f"{name} features are {split.mode}, probe expects {cfg.encoding}")


def train_probe(
    cfg: ProbeConfig,
    train: FeatureSet,
    val: FeatureSet,
    test: FeatureSet | None = None,
    num_classes: int | None = None,
    lr_source: str = "fixed",
) -> ProbeRun:
    """Train pooler + head by minibatch cross-entropy with AdamW.

    The parameters from the epoch with the best validation accuracy are
    kept (epoch 0 is the initialization; ties keep the earlier epoch).

    Args:
        cfg: probe configuration; ``cfg.encoding`` must match the features
        train, val, test: feature splits of shape (S, C, N, D)
        num_classes: K; inferred from the labels when omitted
        lr_source: provenance recorded on the run

    Returns:
        The trained run with accuracies and curves
    """
    for split, name in ((train, "train"), (val, "val"), (test, "test")):
        _check_mode(cfg, split, name)
    if len(train) == 0:
        raise EmptySplitError("training split is empty")
    if len(val) == 0:
        raise EmptySplitError("validation split is empty")

    started = time.perf_counter()
    if num_classes is None:
        num_classes = int(max(train.labels.max(), val.labels.max())) + 1
    model = init_probe(cfg, train.patches.shape[-1], num_classes)
    optimizer = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    shuffle = RngStream(cfg.seed).child("probe", "shuffle")

    best_acc = evaluate(model, val)
    best_epoch, best_params = 0, model.snapshot()
    loss_curve: list[float] = []
    val_curve: list[float] = [best_acc]

    for epoch in range(1, cfg.epochs + 1):
        order = shuffle.child(epoch).generator().permutation(len(train))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            optimizer.zero_grad()
            loss = cross_entropy(model.logits(train.patches[batch]), train.labels[batch])
            loss.backward()
            optimizer.step()
            total += loss.item() * len(batch)
        loss_curve.append(total / len(train))

        val_acc = evaluate(model, val)
        val_curve.append(val_acc)
        logger.debug("%s seed=%d lr=%.2e epoch %d: loss=%.4f val=%.4f",
                     cfg.cell, cfg.seed, cfg.lr, epoch, loss_curve[-1], val_acc)
        if val_acc > best_acc:
            best_acc, best_epoch, best_params = val_acc, epoch, model.snapshot()

    model.restore(best_params)
    run = ProbeRun(
        config=cfg,
        train_acc=evaluate(model, train),
        val_acc=best_acc,
        test_acc=None if test is None or len(test) == 0 else evaluate(model, test),
        loss_curve=loss_curve,
        val_curve=val_curve,
        elapsed=time.perf_counter() - started,
        lr_source=lr_source,
        best_epoch=best_epoch,
        model=model,
    )
    logger.debug("%s seed=%d lr=%.2e: best epoch %d val=%.4f",
                 cfg.cell, cfg.seed, cfg.lr, best_epoch, best_acc)
    return run


@dataclass
class LRSearchResult:
    lr: float
    source: str  # stage that produced the incumbent: coarse | fine
    best: ProbeRun
    trials: list[ProbeRun]


def coarse_lrs(search: LRSearchConfig) -> np.ndarray:
    """``coarse_draws`` log-uniform draws in [low, high] from the search seed."""
    exponents = RngStream(search.seed).child("lr-search").uniform(
        math.log10(search.low), math.log10(search.high), search.coarse_draws
    )
    return np.clip(10.0**exponents, search.low, search.high)


def lr_resolution(lr: float) -> float:
    """10**p for the decade p of ``lr``, with p clamped to [-5, -2]."""
    p = min(max(math.floor(math.log10(lr)), -5), -2)
    return 10.0**p


def lr_search(
    search: LRSearchConfig,
    template: ProbeConfig,
    train: FeatureSet,
    val: FeatureSet,
    test: FeatureSet | None = None,
    num_classes: int | None = None,
) -> LRSearchResult:
    """Coarse log-uniform draws, then a local search at the incumbent's decade.

    All trials run at ``search.seed``. The fine stage tries ``lr -/+ 10**p``
    and moves only on strictly better validation accuracy; it stops when no
    neighbour improves or after ``search.max_fine_steps`` moves.
    """
    if len(val) == 0:
        raise EmptySplitError("LR search needs a non-empty validation split")
    base = replace(template, seed=search.seed)
    trials: list[ProbeRun] = []

    def trial(lr: float, source: str) -> ProbeRun:
        run = train_probe(replace(base, lr=float(lr)), train, val, test, num_classes, lr_source=source)
        trials.append(run)
        return run

    best = None
    for lr in coarse_lrs(search):
        run = trial(lr, "coarse")
        if best is None or run.val_acc > best.val_acc:
            best = run
    logger.debug("%s coarse incumbent lr=%.3e val=%.4f", base.cell, best.config.lr, best.val_acc)

    visited = {round(r.config.lr, 15) for r in trials}
    for _ in range(search.max_fine_steps):
        lr = best.config.lr
        step = lr_resolution(lr)
        improved = None
        for candidate in (lr - step, lr + step):
            if not search.low <= candidate <= search.high or round(candidate, 15) in visited:
                continue
            visited.add(round(candidate, 15))
            run = trial(candidate, "fine")
            if run.val_acc > best.val_acc and (improved is None or run.val_acc > improved.val_acc):
                improved = run
        if improved is None:
            break
        best = improved

    logger.info("%s chose lr=%.3e (%s) val=%.4f after %d trials",
                base.cell, best.config.lr, best.lr_source, best.val_acc, len(trials))
    return LRSearchResult(best.config.lr, best.lr_source, best, trials)


@dataclass
class ProbeData:
    """Features of one dataset (one frozen encoder) for every available encoding.

    ``sources`` map an encoding to a feature file or in-memory set holding
    every sample in global index order; ``splits`` select records from it.
    """

    name: str
    sources: Mapping[str, FeatureFile | FeatureSet]
    splits: Mapping[str, np.ndarray]
    num_classes: int
    weight_decay: float = 0.01
    _cache: dict[tuple[str, str], FeatureSet] = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def has(self, encoding: str) -> bool:
        return encoding in self.sources

    def split(self, encoding: str, name: str) -> FeatureSet:
        key = (encoding, name)
        with self._lock:
            if key not in self._cache:
                self._cache[key] = self.sources[encoding].load(self.splits[name])
            return self._cache[key]

    @classmethod
    def open(
        cls,
        data_dir: str | Path,
        features_dir: str | Path | None = None,
        name: str | None = None,
        weight_decay: float = 0.01,
    ) -> "ProbeData":
        """Open ``<features_dir>/<jfe|ife>.mcif`` next to a saved dataset.

        Missing encodings are left out. Files of one set must come from the
        same encoder.
        """
        data_dir = Path(data_dir)
        features_dir = Path(features_dir) if features_dir is not None else data_dir / "features"
        gen_cfg, splits, _ = read_manifest(data_dir)
        sources: dict[str, FeatureFile] = {}
        for encoding in ENCODINGS:
            path = features_dir / f"{encoding}.mcif"
            if path.is_file():
                sources[encoding] = read_features(path, expect_mode=encoding)
        hashes = {f.header.encoder_hash for f in sources.values()}
        if len(hashes) > 1:
            raise HashMismatchError(f"{features_dir}: jfe and ife files come from different encoders")
        if not sources:
            logger.warning("No feature files under %s", features_dir)
        return cls(name or data_dir.name, sources, splits, gen_cfg.num_classes, weight_decay)


def _absent_rows(data: ProbeData, encoding: str, strategy: str, arch: str, seeds: Iterable[int]) -> list[dict]:
    return [
        {
            "dataset": data.name, "encoding": encoding, "strategy": strategy, "arch": arch,
            "seed": seed, "lr": math.nan, "lr_source": "", "val_acc": math.nan,
            "test_acc": math.nan, "status": "absent",
        }
        for seed in seeds
    ]


def run_cell(
    data: ProbeData,
    encoding: str,
    strategy: str,
    arch: str,
    seeds: Sequence[int],
    template: ProbeConfig,
    search: LRSearchConfig,
    lr: float | None = None,
) -> list[dict]:
    """Result rows of one grid cell, one per seed.

    Without a fixed ``lr`` the LR is searched at ``search.seed`` and that
    trial's run is reused for the matching seed.
    """
    if not data.has(encoding):
        logger.warning("%s: no %s features, cell %s-%s-%s marked absent",
                       data.name, encoding, encoding, strategy, arch)
        return _absent_rows(data, encoding, strategy, arch, seeds)

    train, val, test = (data.split(encoding, s) for s in ("train", "val", "test"))
    cfg = replace(template, encoding=encoding, strategy=strategy, arch=arch,
                  weight_decay=data.weight_decay)
    runs: dict[int, ProbeRun] = {}
    if lr is None:
        found = lr_search(search, cfg, train, val, test, data.num_classes)
        lr, source = found.lr, "chosen"
        runs[search.seed] = found.best
    else:
        source = "fixed"

    rows = []
    for seed in seeds:
        run = runs.get(seed) or train_probe(
            replace(cfg, lr=lr, seed=seed), train, val, test, data.num_classes, lr_source=source
        )
        rows.append(
            {
                "dataset": data.name, "encoding": encoding, "strategy": strategy, "arch": arch,
                "seed": seed, "lr": lr, "lr_source": run.lr_source, "val_acc": run.val_acc,
                "test_acc": run.test_acc, "status": "ok",
            }
        )
    return rows


async def run_matrix(
    datasets: Sequence[ProbeData],
    archs: Sequence[str],
    seeds: Sequence[int] = (42, 43, 44, 45, 46),
    template: ProbeConfig | None = None,
    search: LRSearchConfig | None = None,
    lr: float | None = None,
    encodings: Sequence[str] = ENCODINGS,
    strategies: Sequence[str] = STRATEGIES,
    jobs: int = 1,
) -> pd.DataFrame:
    """Run every dataset x encoding x strategy x arch cell over ``seeds``.

    Cells run on up to ``jobs`` worker threads. Rows are sorted by cell key
    and seed, so the table does not depend on ``jobs``.
    """
    template = template or ProbeConfig()
    search = search or LRSearchConfig()
    loop = asyncio.get_running_loop()
    cells = [
        (data, encoding, strategy, arch)
        for data in datasets
        for encoding in encodings
        for strategy in strategies
        for arch in archs
    ]
    logger.info("Running %d cells x %d seeds on %d workers", len(cells), len(seeds), jobs)

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [
            loop.run_in_executor(pool, run_cell, data, encoding, strategy, arch,
                                 list(seeds), template, search, lr)
            for data, encoding, strategy, arch in cells
        ]
        results = await asyncio.gather(*futures)

    rows = [row for cell_rows in results for row in cell_rows]
    frame = pd.DataFrame(rows, columns=RESULT_COLUMNS)
    return frame.sort_values(CELL_KEYS + ["seed"], kind="stable").reset_index(drop=True)


def summarize(results: pd.DataFrame) -> pd.DataFrame:
    """Mean and sample std over seeds per cell, with deltas over JFE+JAP.

    ``delta_vs_baseline`` is set on every cell whose baseline exists;
    ``delta_cap`` only on CAP (IFE+DCP) rows.
    """
    ok = results[results["status"] == "ok"]
    stats = ok.groupby(CELL_KEYS, sort=True).agg(
        lr=("lr", "first"),
        n_seeds=("seed", "count"),
        val_mean=("val_acc", "mean"),
        test_mean=("test_acc", "mean"),
        test_std=("test_acc", "std"),
    )
    cells = results[CELL_KEYS].drop_duplicates().set_index(CELL_KEYS)
    summary = cells.join(stats).reset_index()
    summary["n_seeds"] = summary["n_seeds"].fillna(0).astype(int)
    summary["status"] = np.where(summary["n_seeds"] > 0, "ok", "absent")
    summary["method"] = [METHODS[(e, s)] for e, s in zip(summary["encoding"], summary["strategy"])]

    baseline = summary.loc[summary["method"] == "JFE+JAP", ["dataset", "arch", "test_mean"]]
    summary = summary.merge(
        baseline.rename(columns={"test_mean": "baseline_mean"}), on=["dataset", "arch"], how="left"
    )
    summary["delta_vs_baseline"] = summary["test_mean"] - summary["baseline_mean"]
    summary["delta_cap"] = summary["delta_vs_baseline"].where(summary["method"] == "CAP")
    summary = summary.drop(columns="baseline_mean")
    return summary.sort_values(CELL_KEYS, kind="stable").reset_index(drop=True)


def ablation(summary: pd.DataFrame) -> pd.DataFrame:
    """One row per dataset and arch; one delta column per non-baseline method."""
    others = summary[summary["method"] != "JFE+JAP"]
    if others.empty:
        return pd.DataFrame(columns=["dataset", "arch", "IFE+JAP", "JFE+DCP", "CAP"])
    deltas = others.pivot_table(
        index=["dataset", "arch"], columns="method", values="delta_vs_baseline", dropna=False
    )
    ordered = [m for m in ("IFE+JAP", "JFE+DCP", "CAP") if m in deltas.columns]
    return deltas[ordered].reset_index().rename_axis(columns=None)
