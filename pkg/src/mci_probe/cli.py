"""Command-line entry point: mci-probe <command> [options]."""

import argparse
import asyncio
import json
import logging
import sys
import time
import uuid
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from itertools import batched
from pathlib import Path

import numpy as np
import pandas as pd

from .analysis import (
    diversity_report,
    emit_figures,
    encoder_flops,
    flops_sweep,
)
from .config import (
    ARCHS,
    ENCODINGS,
    ATTENTION_ARCHS,
    STRATEGIES,
    EncoderConfig,
    GeneratorConfig,
    LRSearchConfig,
    ProbeConfig,
    RunConfig,
    load_config_file,
)
from .encoder import encode_many, init_encoder
from .errors import ConfigError, MciProbeError
from .probe import ProbeData, ablation, lr_search, run_matrix, summarize, train_probe
from .rng import RngStream
from .store import FeatureFileHeader, FeatureWriter
from .synthdata import generate_dataset, load_dataset, save_dataset

logger = logging.getLogger(__name__)

PACKAGE_LOGGER = "mci_probe"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
RUN_MANIFEST = "run_manifest.json"
GRIDS = {
    "default": (ATTENTION_ARCHS, (42, 43, 44, 45, 46)),
    "quick": (("mean", "mhca"), (42, 43, 44)),
}
REQUIRED = {
    "gen-data": ("out",),
    "extract": ("data", "mode"),
    "train": ("data", "out"),
    "sweep": ("data", "out"),
    "diversity": ("data", "out"),
    "flops": ("out",),
    "report": ("results",),
}


@dataclass
class RunManifest:
    """Provenance of one command; written next to what it produced."""

    command: str
    output_dir: str
    config_file: str | None
    resolved: dict[str, object]
    seeds: list[int] = field(default_factory=list)
    started: str = ""
    finished: str = ""
    timings: dict[str, float] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    extra: dict[str, object] = field(default_factory=dict)

    def write(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _manifest(args: argparse.Namespace, output_dir: Path, seeds: Sequence[int] = ()) -> RunManifest:
    resolved = {k: v for k, v in vars(args).items() if k != "handler"}
    return RunManifest(
        command=args.command,
        output_dir=str(output_dir),
        config_file=args.config,
        resolved=resolved,
        seeds=list(seeds),
        started=_now(),
    )


def configure_logging(config: RunConfig, command: str) -> Path | None:
    """Log to stderr and, with ``config.log_dir``, to a real-time file in it.

    The file is named ``mci_probe_<command>_<run_id>.log``.
    """
    log_dir = config.log_dir
    if log_dir is not None and not Path(log_dir).is_dir():
        raise ConfigError(f"Log directory does not exist: {log_dir}")

    root = logging.getLogger(PACKAGE_LOGGER)
    _close_handlers(root)
    root.setLevel(config.log_level)
    root.propagate = False
    formatter = logging.Formatter(LOG_FORMAT)

    stream = logging.StreamHandler(sys.stderr)
    stream.setFormatter(formatter)
    root.addHandler(stream)

    if log_dir is None:
        return None
    run_id = uuid.uuid4().hex[:12]
    path = Path(log_dir) / f"mci_probe_{command}_{run_id}.log"
    file_handler = logging.FileHandler(path, encoding="utf-8")
    file_handler.setFormatter(formatter)
    root.addHandler(file_handler)
    return path


def _close_handlers(root: logging.Logger) -> None:
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()


# argument types

def _int_list(text: str) -> list[int]:
    return [int(part) for part in text.replace(",", " ").split()]


def _str_list(text: str) -> list[str]:
    return [part for part in text.replace(",", " ").split()]


def _named(values: Sequence[str] | None) -> list[tuple[str | None, str]]:
    """``ID=VALUE`` or bare ``VALUE`` items."""
    pairs = []
    for item in values or ():
        name, sep, value = item.partition("=")
        pairs.append((name, value) if sep else (None, item))
    return pairs


def _open_datasets(args: argparse.Namespace) -> list[ProbeData]:
    features = dict(_named(args.features))  # a bare DIR applies to every dataset
    decays = {name: float(value) for name, value in _named(getattr(args, "dataset_weight_decay", None))}
    datasets = []
    for name, path in _named(args.data):
        name = name or Path(path).name
        datasets.append(
            ProbeData.open(
                path,
                features.get(name, features.get(None)),
                name=name,
                weight_decay=decays.get(name, getattr(args, "weight_decay", 0.01)),
            )
        )
    names = [d.name for d in datasets]
    if len(set(names)) != len(names):
        raise ConfigError(f"dataset ids must be unique, got {names}")
    return datasets


# commands

async def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = GeneratorConfig(
        channels=args.channels,
        image_size=args.image_size,
        num_classes=args.num_classes,
        redundancy=args.redundancy,
        minority_channel=args.minority_channel,
        noise=args.noise,
        seed=args.seed,
        n_train=args.n_train,
        n_val=args.n_val,
        n_test=args.n_test,
    )
    out = Path(args.out)
    manifest = _manifest(args, out, [cfg.seed])
    started = time.perf_counter()
    dataset_manifest = save_dataset(generate_dataset(cfg), out)
    manifest.timings["generate"] = time.perf_counter() - started
    manifest.outputs = [str(dataset_manifest)]
    manifest.finished = _now()
    manifest.write(out / RUN_MANIFEST)
    return 0


async def cmd_extract(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.data)
    enc_cfg = EncoderConfig(
        image_size=dataset.config.image_size,
        patch_size=args.patch_size,
        embed_dim=args.embed_dim,
        depth=args.depth,
        heads=args.heads,
        mlp_ratio=args.mlp_ratio,
        init_seed=args.init_seed,
        max_sequence=args.max_sequence,
    )
    out = Path(args.out) if args.out else Path(args.data) / "features" / f"{args.mode}.mcif"
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest = _manifest(args, out.parent, [enc_cfg.init_seed])
    started = time.perf_counter()

    weights = init_encoder(enc_cfg)
    header = FeatureFileHeader(
        args.mode, dataset.config.channels, enc_cfg.num_patches, enc_cfg.embed_dim, enc_cfg.config_hash()
    )
    with FeatureWriter(out, header) as writer:
        for chunk in batched(dataset.images(), args.chunk):
            maps = await encode_many(chunk, weights, args.mode, args.jobs)
            for image, features in zip(chunk, maps):
                writer.append(features, image.label)
            logger.debug("Extracted %d/%d", writer.count, len(dataset.samples))
    logger.info("Extracted %d %s records into %s", writer.count, args.mode, out)

    manifest.timings["extract"] = time.perf_counter() - started
    manifest.outputs = [str(out)]
    manifest.extra = {
        "encoder_config": asdict(enc_cfg),
        "encoder_hash": enc_cfg.config_hash().hex(),
        "encoder_checksum": weights.checksum(),
    }
    manifest.finished = _now()
    manifest.write(out.with_suffix(".manifest.json"))
    return 0


def _probe_template(args: argparse.Namespace) -> ProbeConfig:
    return ProbeConfig(
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        epochs=args.epochs,
    )


async def cmd_train(args: argparse.Namespace) -> int:
    [data] = _open_datasets(args)
    if not data.has(args.encoding):
        raise ConfigError(f"{data.name}: no {args.encoding} feature file")
    cfg = replace(
        _probe_template(args),
        encoding=args.encoding,
        strategy=args.strategy,
        arch=args.arch,
        seed=args.seed,
        weight_decay=data.weight_decay,
    )
    out = Path(args.out)
    manifest = _manifest(args, out, [args.seed])
    started = time.perf_counter()
    train, val, test = (data.split(args.encoding, s) for s in ("train", "val", "test"))

    search = LRSearchConfig()
    if args.lr is None:
        loop = asyncio.get_running_loop()
        found = await loop.run_in_executor(
            None, lr_search, search, cfg, train, val, test, data.num_classes
        )
        lr, source = found.lr, "chosen"
        reuse = found.best if args.seed == search.seed else None
        manifest.extra["lr_trials"] = [
            {"lr": r.config.lr, "stage": r.lr_source, "val_acc": r.val_acc} for r in found.trials
        ]
    else:
        lr, source, reuse = args.lr, "fixed", None
    run = reuse or train_probe(replace(cfg, lr=lr), train, val, test, data.num_classes, lr_source=source)

    out.mkdir(parents=True, exist_ok=True)
    row = {
        "dataset": data.name, "encoding": cfg.encoding, "strategy": cfg.strategy, "arch": cfg.arch,
        "seed": cfg.seed, "lr": lr, "lr_source": run.lr_source, "val_acc": run.val_acc,
        "test_acc": run.test_acc, "status": "ok",
    }
    pd.DataFrame([row]).to_csv(out / "results.csv", index=False)
    (out / "run.json").write_text(
        json.dumps({"config": asdict(run.config), **run.metrics()}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    manifest.timings["train"] = time.perf_counter() - started
    manifest.outputs = [str(out / "results.csv"), str(out / "run.json")]
    manifest.finished = _now()
    manifest.write(out / RUN_MANIFEST)
    return 0


async def cmd_sweep(args: argparse.Namespace) -> int:
    grid_archs, grid_seeds = GRIDS[args.grid]
    archs = args.archs or list(grid_archs)
    seeds = args.seeds or list(grid_seeds)
    unknown = sorted(set(archs) - set(ARCHS))
    if unknown:
        raise ConfigError(f"unknown pooler arch(s): {', '.join(unknown)}")
    datasets = _open_datasets(args)
    out = Path(args.out)
    manifest = _manifest(args, out, seeds)
    started = time.perf_counter()

    results = await run_matrix(
        datasets,
        archs,
        seeds=seeds,
        template=_probe_template(args),
        lr=args.lr,
        encodings=args.encodings or ENCODINGS,
        strategies=args.strategies or STRATEGIES,
        jobs=args.jobs,
    )
    out.mkdir(parents=True, exist_ok=True)
    results.to_csv(out / "results.csv", index=False)
    summarize(results).to_csv(out / "summary.csv", index=False)

    manifest.timings["sweep"] = time.perf_counter() - started
    manifest.outputs = [str(out / "results.csv"), str(out / "summary.csv")]
    manifest.finished = _now()
    manifest.write(out / RUN_MANIFEST)
    return 0


def _diversity_job(data: ProbeData, encoding: str, sources: Sequence[str], args: argparse.Namespace):
    file = data.sources[encoding]
    count = min(args.instances, len(file))
    picks = np.sort(
        RngStream(args.seed).child("diversity", data.name).generator().choice(len(file), count, replace=False)
    )
    maps = [file[int(i)][0] for i in picks]
    return [diversity_report(maps, data.name, source, args.filter_fraction) for source in sources]


async def cmd_diversity(args: argparse.Namespace) -> int:
    datasets = _open_datasets(args)
    out = Path(args.out)
    manifest = _manifest(args, out, [args.seed])
    started = time.perf_counter()

    wanted = ("patch", "cls") if args.token_source == "both" else (args.token_source,)
    jobs = []
    for data in datasets:
        for encoding in args.encodings or ENCODINGS:
            if not data.has(encoding):
                logger.warning("%s: no %s features, skipped", data.name, encoding)
                continue
            # a single global cls token has no per-channel comparison
            sources = [s for s in wanted if not (s == "cls" and encoding == "jfe")]
            if sources:
                jobs.append((data, encoding, sources))

    loop = asyncio.get_running_loop()
    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        futures = [loop.run_in_executor(pool, _diversity_job, d, e, s, args) for d, e, s in jobs]
        reports = [r for batch in await asyncio.gather(*futures) for r in batch]

    paths = emit_figures(reports, [], out, plots=args.plots)
    manifest.timings["diversity"] = time.perf_counter() - started
    manifest.outputs = [str(paths["cls_diversity"]), str(paths["patch_diversity"])]
    manifest.finished = _now()
    manifest.write(out / RUN_MANIFEST)
    return 0


def _encoder_for_tokens(tokens: int, args: argparse.Namespace) -> EncoderConfig:
    grid = round(tokens**0.5)
    if grid * grid != tokens:
        raise ConfigError(f"N={tokens} is not a square patch grid")
    return EncoderConfig(
        image_size=grid * args.patch_size,
        patch_size=args.patch_size,
        embed_dim=args.D,
        depth=args.depth,
        heads=args.heads,
        mlp_ratio=args.mlp_ratio,
    )


async def cmd_flops(args: argparse.Namespace) -> int:
    out = Path(args.out)
    manifest = _manifest(args, out)
    costs = flops_sweep(args.archs or ARCHS, args.C, args.N, args.D)
    for tokens in args.N:
        enc_cfg = _encoder_for_tokens(tokens, args)
        costs.extend(encoder_flops(enc_cfg, c, mode) for c in args.C for mode in ENCODINGS)
    paths = emit_figures([], costs, out, plots=args.plots)
    manifest.outputs = [str(paths["pooler_flops_sweep"]), str(paths["encoder_flops"])]
    manifest.finished = _now()
    manifest.write(out / RUN_MANIFEST)
    return 0


async def cmd_report(args: argparse.Namespace) -> int:
    source = Path(args.results)
    results_path = source / "results.csv" if source.is_dir() else source
    if not results_path.is_file():
        raise ConfigError(f"no results table at {results_path}")
    out = Path(args.out) if args.out else results_path.parent
    manifest = _manifest(args, out)

    results = pd.read_csv(results_path, keep_default_na=False, na_values=[""])
    summary = summarize(results)
    table = ablation(summary)
    out.mkdir(parents=True, exist_ok=True)
    summary.to_csv(out / "summary.csv", index=False)
    table.to_csv(out / "ablation.csv", index=False)
    manifest.outputs = [str(out / "summary.csv"), str(out / "ablation.csv")]
    if args.plots:
        from .plots import render_svgs

        manifest.outputs += [str(p) for p in render_svgs({"ablation": table}, out).values()]
    manifest.finished = _now()
    manifest.write(out / RUN_MANIFEST)
    return 0


# parser

def _add_probe_options(sub: argparse.ArgumentParser) -> None:
    defaults = ProbeConfig()
    sub.add_argument("--lr", type=float, default=None, help="Fixed learning rate (default: search)")
    sub.add_argument("--weight-decay", type=float, default=defaults.weight_decay,
                     help="Decoupled weight decay, fixed per dataset")
    sub.add_argument("--batch-size", type=int, default=defaults.batch_size)
    sub.add_argument("--epochs", type=int, default=defaults.epochs)


def _add_data_options(sub: argparse.ArgumentParser, many: bool) -> None:
    sub.add_argument("--data", nargs="+" if many else 1, default=None, metavar="[ID=]DIR",
                     help="Dataset directory written by gen-data")
    sub.add_argument("--features", nargs="+", default=None, metavar="ID=DIR",
                     help="Feature directory for a dataset id (default: <data>/features)")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="mci-probe",
        description="Channel-aware probing of frozen multi-channel ViT features",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--config", type=str, default=None,
                        help="Flat key = value file; command-line flags override it")
    parser.add_argument("--jobs", type=int, default=1, help="Worker threads")
    parser.add_argument("--log-level", type=str.upper, default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--log-dir", type=str, default=None,
                        help="Directory to write run logs (must exist)")
    commands = parser.add_subparsers(dest="command", required=True, metavar="command")
    subs: dict[str, argparse.ArgumentParser] = {}

    def add(name: str, handler, help_text: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help_text, description=help_text,
                                  formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        sub.set_defaults(handler=handler)
        subs[name] = sub
        return sub

    gen = GeneratorConfig()
    sub = add("gen-data", cmd_gen_data, "Generate a synthetic multi-channel dataset")
    sub.add_argument("--out", type=str, default=None, help="Output dataset directory")
    sub.add_argument("--channels", type=int, default=gen.channels)
    sub.add_argument("--image-size", type=int, default=gen.image_size)
    sub.add_argument("--classes", dest="num_classes", type=int, default=gen.num_classes)
    sub.add_argument("--redundancy", type=float, default=gen.redundancy, help="rho in [0, 1]")
    sub.add_argument("--minority-channel", type=int, default=gen.minority_channel)
    sub.add_argument("--noise", type=float, default=gen.noise)
    sub.add_argument("--seed", type=int, default=gen.seed)
    sub.add_argument("--n-train", type=int, default=gen.n_train)
    sub.add_argument("--n-val", type=int, default=gen.n_val)
    sub.add_argument("--n-test", type=int, default=gen.n_test)

    enc = EncoderConfig()
    sub = add("extract", cmd_extract, "Encode a dataset with the frozen encoder")
    sub.add_argument("--data", type=str, default=None, help="Dataset directory")
    sub.add_argument("--mode", choices=ENCODINGS, default=None)
    sub.add_argument("--out", type=str, default=None, help="Feature file (default: <data>/features/<mode>.mcif)")
    sub.add_argument("--patch-size", type=int, default=enc.patch_size)
    sub.add_argument("--embed-dim", type=int, default=enc.embed_dim)
    sub.add_argument("--depth", type=int, default=enc.depth)
    sub.add_argument("--heads", type=int, default=enc.heads)
    sub.add_argument("--mlp-ratio", type=int, default=enc.mlp_ratio)
    sub.add_argument("--init-seed", type=int, default=enc.init_seed)
    sub.add_argument("--max-sequence", type=int, default=enc.max_sequence)
    sub.add_argument("--chunk", type=int, default=256, help="Images encoded per batch of jobs")

    probe = ProbeConfig()
    sub = add("train", cmd_train, "Train one probe (searching the LR unless --lr is given)")
    _add_data_options(sub, many=False)
    sub.add_argument("--encoding", choices=ENCODINGS, default=probe.encoding)
    sub.add_argument("--strategy", choices=STRATEGIES, default=probe.strategy)
    sub.add_argument("--arch", choices=ARCHS, default=probe.arch)
    sub.add_argument("--seed", type=int, default=probe.seed)
    sub.add_argument("--out", type=str, default=None)
    _add_probe_options(sub)

    sub = add("sweep", cmd_sweep, "Run the encoding x strategy x arch x seed matrix")
    _add_data_options(sub, many=True)
    sub.add_argument("--grid", choices=sorted(GRIDS), default="default")
    sub.add_argument("--archs", type=_str_list, default=None, help="Comma list overriding the grid")
    sub.add_argument("--seeds", type=_int_list, default=None, help="Comma list overriding the grid")
    sub.add_argument("--encodings", type=_str_list, default=None)
    sub.add_argument("--strategies", type=_str_list, default=None)
    sub.add_argument("--dataset-weight-decay", nargs="+", default=None, metavar="ID=VALUE")
    sub.add_argument("--out", type=str, default=None)
    _add_probe_options(sub)

    sub = add("diversity", cmd_diversity, "Measure inter-channel feature similarity")
    _add_data_options(sub, many=True)
    sub.add_argument("--token-source", choices=["patch", "cls", "both"], default="both")
    sub.add_argument("--filter-fraction", type=float, default=0.75,
                     help="Share of most similar positions dropped")
    sub.add_argument("--instances", type=int, default=1000)
    sub.add_argument("--seed", type=int, default=42)
    sub.add_argument("--encodings", type=_str_list, default=None)
    sub.add_argument("--out", type=str, default=None)
    sub.add_argument("--plots", action="store_true", help="Also render SVG charts")

    sub = add("flops", cmd_flops, "Analytic pooler and encoder FLOP tables")
    sub.add_argument("--C", type=_int_list, default=[8], help="Channel counts")
    sub.add_argument("--N", type=_int_list, default=[196], help="Tokens per channel")
    sub.add_argument("--D", type=int, default=384, help="Feature width")
    sub.add_argument("--archs", type=_str_list, default=None)
    sub.add_argument("--depth", type=int, default=12)
    sub.add_argument("--heads", type=int, default=6)
    sub.add_argument("--mlp-ratio", type=int, default=4)
    sub.add_argument("--patch-size", type=int, default=16)
    sub.add_argument("--out", type=str, default=None)
    sub.add_argument("--plots", action="store_true")

    sub = add("report", cmd_report, "Summaries and ablation deltas from a sweep")
    sub.add_argument("--results", type=str, default=None, help="Sweep directory or results.csv")
    sub.add_argument("--out", type=str, default=None, help="Default: next to the results")
    sub.add_argument("--plots", action="store_true")
    return parser, subs


def _convert(action: argparse.Action, raw: str, key: str) -> object:
    if isinstance(action, argparse._StoreTrueAction):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"config key {key}: expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if action.nargs in ("+", 1):
        value = _str_list(raw)
    else:
        value = action.type(raw) if action.type is not None else raw
    if action.choices is not None and value not in action.choices:
        raise ConfigError(f"config key {key}: {value!r} not in {sorted(action.choices)}")
    return value


def _apply_config(parser: argparse.ArgumentParser, sub: argparse.ArgumentParser, values: dict[str, str]) -> None:
    """Install config-file values as parser defaults."""
    for target in (parser, sub):
        actions = {a.dest: a for a in target._actions if a.dest not in ("help", "command", "config")}
        own = {k: _convert(actions[k], v, k) for k, v in values.items() if k in actions}
        target.set_defaults(**own)
    known = {a.dest for p in (parser, sub) for a in p._actions}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s) for {sub.prog}: {', '.join(unknown)}")


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        _apply_config(parser, subs[args.command], load_config_file(args.config))
        args = parser.parse_args(argv)
    sub = subs[args.command]
    missing = [k for k in REQUIRED[args.command] if getattr(args, k) is None]
    if missing:
        sub.error("the following arguments are required: " + ", ".join(f"--{k.replace('_', '-')}" for k in missing))
    if args.jobs < 1:
        sub.error("--jobs must be >= 1")
    return args


def dispatch(argv: Sequence[str] | None = None) -> int:
    """Run one command; returns 0 on success, 1 on a domain error, 2 on a usage error."""
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    except MciProbeError as exc:
        print(f"error code={exc.code} message={exc}", file=sys.stderr)
        return 1

    try:
        run = RunConfig(jobs=args.jobs, log_dir=args.log_dir, log_level=args.log_level)
        log_path = configure_logging(run, args.command)
        if log_path is not None:
            logger.info("Logging %s to %s", args.command, log_path)
        return asyncio.run(args.handler(args))
    except MciProbeError as exc:
        message = str(exc).replace("\n", " ")
        logger.debug("%s failed", args.command, exc_info=True)
        print(f"error code={exc.code} message={message}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error code=io message={exc}", file=sys.stderr)
        return 1
    finally:
        _close_handlers(logging.getLogger(PACKAGE_LOGGER))


def main() -> None:
    """CLI entry point."""
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
