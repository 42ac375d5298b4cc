"""Configuration for mci-probe."""

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError

ENCODINGS = ("jfe", "ife")
STRATEGIES = ("jap", "dcp")
ARCHS = ("mean", "simpool", "abmilp", "ep", "mab", "mhca", "protobin")
ATTENTION_ARCHS = ARCHS[1:]


@dataclass(frozen=True)
class EncoderConfig:
    """Configuration for the frozen toy multi-channel ViT."""

    image_size: int = 32  # pixels, square
    patch_size: int = 8  # pixels, square
    embed_dim: int = 64  # D
    depth: int = 4  # transformer blocks
    heads: int = 4
    mlp_ratio: int = 4
    init_seed: int = 0
    max_sequence: int = 4096  # longest JFE sequence (1 + C*N) accepted
    ln_eps: float = 1e-6

    def __post_init__(self) -> None:
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim <= 0 or self.heads <= 0 or self.embed_dim % self.heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if self.depth < 0 or self.mlp_ratio <= 0:
            raise ConfigError("depth must be >= 0 and mlp_ratio > 0")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        """N, tokens per channel."""
        return self.grid * self.grid

    def config_hash(self) -> bytes:
        """8-byte digest identifying the weights this config produces."""
        payload = json.dumps(asdict(self), sort_keys=True).encode("utf-8")
        return hashlib.blake2b(payload, digest_size=8).digest()


@dataclass(frozen=True)
class GeneratorConfig:
    """Configuration for the synthetic multi-channel dataset."""

    channels: int = 6  # C
    image_size: int = 32
    num_classes: int = 4  # K
    redundancy: float = 0.25  # rho: 0 independent channels, 1 identical
    minority_channel: int = 0  # m, the only channel carrying the label
    noise: float = 0.05  # pixel noise std before clamping; one shared field when redundancy == 1
    seed: int = 0
    n_train: int = 4000
    n_val: int = 1000
    n_test: int = 1000

    def __post_init__(self) -> None:
        if self.channels < 2:
            raise ConfigError(f"need at least 2 channels, got {self.channels}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if not 0.0 <= self.redundancy <= 1.0:
            raise ConfigError(f"redundancy must lie in [0, 1], got {self.redundancy}")
        if not 0 <= self.minority_channel < self.channels:
            raise ConfigError(
                f"minority_channel {self.minority_channel} out of range for {self.channels} channels"
            )
        if self.noise < 0 or self.image_size <= 0:
            raise ConfigError("noise must be >= 0 and image_size > 0")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ConfigError("split sizes must be >= 0")

    @property
    def n_total(self) -> int:
        return self.n_train + self.n_val + self.n_test


@dataclass(frozen=True)
class ProbeConfig:
    """One cell of the {Dataset}-{JFE/IFE}-{JAP/DCP}-{g} grid."""

    encoding: str = "ife"
    strategy: str = "dcp"
    arch: str = "mhca"
    lr: float = 1e-3
    weight_decay: float = 0.01  # fixed per dataset, never searched
    batch_size: int = 128
    epochs: int = 30
    seed: int = 42
    pooler_options: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.encoding not in ENCODINGS:
            raise ConfigError(f"unknown encoding: {self.encoding}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy: {self.strategy}")
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown pooler arch: {self.arch}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size <= 0 or self.epochs < 0:
            raise ConfigError("batch_size must be > 0 and epochs >= 0")

    @property
    def cell(self) -> str:
        return f"{self.encoding}-{self.strategy}-{self.arch}"


@dataclass(frozen=True)
class LRSearchConfig:
    """Coarse log-uniform draws followed by a local fine search."""

    low: float = 1e-5
    high: float = 1e-2
    coarse_draws: int = 10
    seed: int = 42
    max_fine_steps: int = 20

    def __post_init__(self) -> None:
        if not 0 < self.low < self.high:
            raise ConfigError(f"invalid LR range [{self.low}, {self.high}]")
        if self.coarse_draws <= 0:
            raise ConfigError("coarse_draws must be positive")


@dataclass
class RunConfig:
    """Process-level settings shared by every subcommand."""

    jobs: int = 1  # worker threads
    log_dir: str | None = None  # directory to write run logs (must exist)
    log_level: str = "INFO"

    def __post_init__(self) -> None:
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")


def load_config_file(path: str | Path) -> dict[str, str]:
    """Read a flat ``key = value`` file. Blank lines and ``#`` comments are skipped."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        values[key.replace("-", "_")] = value
    return values
