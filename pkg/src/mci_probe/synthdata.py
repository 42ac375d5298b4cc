"""Synthetic multi-channel images with controllable channel redundancy.

Each channel renders its own latent vector of five factors through the
same parametric renderer: an oriented grating under a Gaussian blob over a
linear ramp. Factor ``z_c`` of channel ``c`` mixes a shared draw with an
independent one::

    z_c = (rho * z_shared + (1 - rho) * z_c_independent) / sqrt(rho**2 + (1 - rho)**2)

so ``z_c`` stays standard normal and the inter-channel correlation is
``rho**2 / (rho**2 + (1 - rho)**2)``. Latent descriptors are the normal
CDF of ``z`` and live in (0, 1). The label is the orientation bin of the
minority channel only.
"""

import json
import logging
import math
from collections.abc import Iterator
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import special

from .config import GeneratorConfig
from .errors import ConfigError, ShapeError
from .rng import RngStream
from .store import SampleFile, SampleFileHeader, read_samples, write_samples

logger = logging.getLogger(__name__)

LATENT_WIDTH = 5  # orientation (class), frequency, phase, blob x, blob y
SPLITS = ("train", "val", "test")
MANIFEST_NAME = "manifest.json"
SAMPLES_NAME = "samples.mcis"


@dataclass(frozen=True)
class MultiChannelImage:
    pixels: np.ndarray  # (C, H, W) in [0, 1]
    label: int
    latents: np.ndarray  # (C, LATENT_WIDTH) in (0, 1)

    def __post_init__(self) -> None:
        if self.pixels.ndim != 3:
            raise ShapeError(f"pixels must be (C, H, W), got {self.pixels.shape}")
        if self.latents.shape != (self.pixels.shape[0], LATENT_WIDTH):
            raise ShapeError(f"latents must be (C, {LATENT_WIDTH}), got {self.latents.shape}")

    @property
    def channels(self) -> int:
        return self.pixels.shape[0]


def latent_class(latents: np.ndarray, num_classes: int) -> np.ndarray:
    """Orientation bin of each latent row."""
    return np.minimum((np.asarray(latents)[..., 0] * num_classes).astype(np.int64), num_classes - 1)


def sample_latents(cfg: GeneratorConfig, label: int, stream: RngStream) -> np.ndarray:
    """Draw per-channel latents whose minority channel falls in class ``label``.

    Draws are rejected until the class matches, so the result stays a
    deterministic function of the stream.
    """
    rho = cfg.redundancy
    scale = math.sqrt(rho**2 + (1.0 - rho) ** 2)
    gen = stream.generator()
    while True:
        shared = gen.standard_normal(LATENT_WIDTH)
        independent = gen.standard_normal((cfg.channels, LATENT_WIDTH))
        z = (rho * shared + (1.0 - rho) * independent) / scale
        latents = special.ndtr(z)
        if latent_class(latents[cfg.minority_channel], cfg.num_classes) == label:
            return latents


def render_sample(
    latents: np.ndarray,
    cfg: GeneratorConfig,
    noise_stream: RngStream | None = None,
    label: int = -1,
) -> MultiChannelImage:
    latents = np.asarray(latents, dtype=np.float64)
    if latents.shape != (cfg.channels, LATENT_WIDTH):
        raise ShapeError(f"latents must be ({cfg.channels}, {LATENT_WIDTH}), got {latents.shape}")

    size = cfg.image_size
    coords = (np.arange(size) + 0.5) / size
    y, x = np.meshgrid(coords, coords, indexing="ij")
    theta, freq, phase, cx, cy = (latents[:, i, None, None] for i in range(LATENT_WIDTH))
    theta = math.pi * theta
    along = (x - 0.5) * np.cos(theta) + (y - 0.5) * np.sin(theta)

    grating = 0.5 + 0.5 * np.sin(2.0 * math.pi * (2.0 + 3.0 * freq) * along + 2.0 * math.pi * phase)
    cx, cy = 0.2 + 0.6 * cx, 0.2 + 0.6 * cy
    blob = np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * 0.3**2))
    ramp = np.clip(0.5 + along, 0.0, 1.0)
    pixels = 0.1 + 0.7 * blob * grating + 0.2 * ramp

    if cfg.noise > 0 and noise_stream is not None:
        # fully redundant channels share one noise field
        shape = pixels.shape[1:] if cfg.redundancy == 1.0 else pixels.shape
        pixels = pixels + cfg.noise * noise_stream.generator().standard_normal(shape)
    return MultiChannelImage(np.clip(pixels, 0.0, 1.0), label, latents)


@dataclass(frozen=True)
class SyntheticDataset:
    """Index space and labels of a generated dataset; samples render on demand."""

    config: GeneratorConfig
    splits: dict[str, np.ndarray]  # split name -> global sample indices
    labels: np.ndarray  # (n_total,)

    def __len__(self) -> int:
        return len(self.labels)

    def sample(self, index: int) -> MultiChannelImage:
        root = RngStream(self.config.seed).child("sample", index)
        label = int(self.labels[index])
        latents = sample_latents(self.config, label, root.child("latents"))
        return render_sample(latents, self.config, root.child("noise"), label)

    def iter_split(self, name: str) -> Iterator[MultiChannelImage]:
        for index in self.splits[name]:
            yield self.sample(int(index))


def generate_dataset(cfg: GeneratorConfig) -> SyntheticDataset:
    """Lay out disjoint train/val/test index ranges with exactly balanced labels."""
    if cfg.num_classes < 2 or cfg.channels < 2:
        raise ConfigError("need at least 2 classes and 2 channels")
    splits: dict[str, np.ndarray] = {}
    labels = np.empty(cfg.n_total, dtype=np.int64)
    start = 0
    for name, count in zip(SPLITS, (cfg.n_train, cfg.n_val, cfg.n_test)):
        indices = np.arange(start, start + count)
        order = RngStream(cfg.seed).child("labels", name).generator().permutation(count)
        labels[indices] = (np.arange(count) % cfg.num_classes)[order]
        splits[name] = indices
        start += count
    logger.info(
        "Dataset C=%d K=%d rho=%.2f m=%d: %d/%d/%d samples",
        cfg.channels, cfg.num_classes, cfg.redundancy, cfg.minority_channel,
        cfg.n_train, cfg.n_val, cfg.n_test,
    )
    return SyntheticDataset(cfg, splits, labels)


def save_dataset(dataset: SyntheticDataset, directory: str | Path) -> Path:
    """Write ``samples.mcis`` (global index order) and ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cfg = dataset.config
    header = SampleFileHeader(cfg.channels, cfg.image_size, cfg.image_size, LATENT_WIDTH)

    def records():
        for index in range(len(dataset)):
            image = dataset.sample(index)
            yield image.pixels, image.latents, image.label

    count = write_samples(directory / SAMPLES_NAME, header, records())
    manifest = {
        "format": "mci-probe-dataset",
        "version": 1,
        "sample_count": count,
        "config": asdict(cfg),
        "splits": {name: idx.tolist() for name, idx in dataset.splits.items()},
        "files": {"samples": SAMPLES_NAME},
    }
    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


@dataclass(frozen=True)
class StoredDataset:
    config: GeneratorConfig
    splits: dict[str, np.ndarray]
    samples: SampleFile

    def images(self, name: str | None = None) -> Iterator[MultiChannelImage]:
        indices = range(len(self.samples)) if name is None else self.splits[name]
        for index in indices:
            pixels, latents, label = self.samples[int(index)]
            yield MultiChannelImage(pixels, label, latents)


def read_manifest(directory: str | Path) -> tuple[GeneratorConfig, dict[str, np.ndarray], dict]:
    """Generator config, split indices and the raw manifest of a saved dataset."""
    manifest_path = Path(directory) / MANIFEST_NAME
    if not manifest_path.is_file():
        raise ConfigError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    cfg = GeneratorConfig(**manifest["config"])
    splits = {name: np.asarray(idx, dtype=np.int64) for name, idx in manifest["splits"].items()}
    return cfg, splits, manifest


def load_dataset(directory: str | Path) -> StoredDataset:
    directory = Path(directory)
    cfg, splits, manifest = read_manifest(directory)
    samples = read_samples(directory / manifest["files"]["samples"])
    if len(samples) != manifest["sample_count"]:
        raise ConfigError(
            f"{directory}: manifest lists {manifest['sample_count']} samples, container has {len(samples)}"
        )
    return StoredDataset(cfg, splits, samples)
