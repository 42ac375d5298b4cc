"""Counter-based, splittable random streams.

Streams are Philox generators keyed on ``(seed, stream_id)``, so the value
of draw ``k`` depends only on the key and ``k``; never on which thread or
in which order streams were consumed.
"""

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import ConfigError

_MASK64 = (1 << 64) - 1


def _word(part: int | str) -> int:
    if isinstance(part, str):
        return int.from_bytes(hashlib.blake2b(part.encode("utf-8"), digest_size=8).digest(), "little")
    return int(part) & _MASK64


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream_id: int = 0

    def __post_init__(self) -> None:
        if not (0 <= self.seed <= _MASK64 and 0 <= self.stream_id <= _MASK64):
            raise ConfigError("seed and stream_id must be unsigned 64-bit integers")

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at draw 0 of this stream."""
        key = self.seed | (self.stream_id << 64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, *path: int | str) -> "RngStream":
        """Derive an independent stream addressed by ``path`` (ints or labels)."""
        entropy = [self.seed, self.stream_id, *(_word(p) for p in path)]
        stream_id = np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0]
        return RngStream(self.seed, int(stream_id))

    def uniform(self, low: float, high: float, size: int | tuple[int, ...]) -> np.ndarray:
        return self.generator().uniform(low, high, size)

    def trunc_normal(self, shape: tuple[int, ...], std: float = 0.02) -> np.ndarray:
        """Normal draws truncated at two standard deviations."""
        return stats.truncnorm.rvs(
            -2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=self.generator()
        ).astype(np.float64)
