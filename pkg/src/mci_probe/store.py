"""Fixed-stride little-endian containers for features and raw samples.

Both formats are a packed header followed by ``sample_count`` records of
identical size, so record ``k`` starts at ``header_size + k * record_size``.
Writers put ``PARTIAL`` in the count field first and patch the real count
in only when the stream closes cleanly.

Feature file (``MCIF``) header::

    magic[4] version:u32 mode:u8 C:u32 N:u32 D:u32 sample_count:u32
    label_width:u8 encoder_hash[8]

record: cls f32[1 or C, D], patches f32[C, N, D], label u16.

Sample file (``MCIS``) header::

    magic[4] version:u32 C:u32 H:u32 W:u32 sample_count:u32
    latent_width:u8 label_width:u8

record: pixels f32[C, H, W], latents f32[C, L], label u16.
"""

import logging
import os
import struct
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, ClassVar

import numpy as np

from .encoder import FeatureMap
from .errors import (
    BadMagicError,
    ConfigError,
    HashMismatchError,
    ModeMismatchError,
    PartialFileError,
    ShapeDriftError,
    StoreError,
    TruncatedFileError,
    VersionMismatchError,
)

logger = logging.getLogger(__name__)

VERSION = 1
PARTIAL = 0xFFFFFFFF
LABEL_WIDTH = 2
MODE_CODES = {"jfe": 0, "ife": 1}
MODE_NAMES = {v: k for k, v in MODE_CODES.items()}


@dataclass(frozen=True)
class FeatureFileHeader:
    mode: str
    channels: int
    tokens: int
    dim: int
    encoder_hash: bytes
    sample_count: int = 0
    label_width: int = LABEL_WIDTH
    version: int = VERSION

    MAGIC: ClassVar[bytes] = b"MCIF"
    STRUCT: ClassVar[struct.Struct] = struct.Struct("<4sIBIIIIB8s")
    COUNT_OFFSET: ClassVar[int] = 4 + 4 + 1 + 4 + 4 + 4

    def __post_init__(self) -> None:
        if self.mode not in MODE_CODES:
            raise ConfigError(f"unknown encoding mode: {self.mode}")
        if len(self.encoder_hash) != 8:
            raise ConfigError("encoder_hash must be 8 bytes")

    @property
    def cls_rows(self) -> int:
        return 1 if self.mode == "jfe" else self.channels

    def record_dtype(self) -> np.dtype:
        return np.dtype(
            [
                ("cls", "<f4", (self.cls_rows, self.dim)),
                ("patches", "<f4", (self.channels, self.tokens, self.dim)),
                ("label", "<u2"),
            ]
        )

    def pack(self, sample_count: int) -> bytes:
        return self.STRUCT.pack(
            self.MAGIC,
            self.version,
            MODE_CODES[self.mode],
            self.channels,
            self.tokens,
            self.dim,
            sample_count,
            self.label_width,
            self.encoder_hash,
        )

    @classmethod
    def unpack(cls, raw: bytes) -> "FeatureFileHeader":
        _, version, mode, c, n, d, count, label_width, digest = cls.STRUCT.unpack(raw)
        if mode not in MODE_NAMES:
            raise StoreError(f"unknown mode byte {mode}")
        return cls(MODE_NAMES[mode], c, n, d, digest, count, label_width, version)


@dataclass(frozen=True)
class SampleFileHeader:
    channels: int
    height: int
    width: int
    latent_width: int
    sample_count: int = 0
    label_width: int = LABEL_WIDTH
    version: int = VERSION

    MAGIC: ClassVar[bytes] = b"MCIS"
    STRUCT: ClassVar[struct.Struct] = struct.Struct("<4sIIIIIBB")
    COUNT_OFFSET: ClassVar[int] = 4 + 4 * 4

    def record_dtype(self) -> np.dtype:
        return np.dtype(
            [
                ("pixels", "<f4", (self.channels, self.height, self.width)),
                ("latents", "<f4", (self.channels, self.latent_width)),
                ("label", "<u2"),
            ]
        )

    def pack(self, sample_count: int) -> bytes:
        return self.STRUCT.pack(
            self.MAGIC,
            self.version,
            self.channels,
            self.height,
            self.width,
            sample_count,
            self.latent_width,
            self.label_width,
        )

    @classmethod
    def unpack(cls, raw: bytes) -> "SampleFileHeader":
        _, version, c, h, w, count, latent_width, label_width = cls.STRUCT.unpack(raw)
        return cls(c, h, w, latent_width, count, label_width, version)


Header = FeatureFileHeader | SampleFileHeader


def record_offset(header: Header, index: int) -> int:
    return header.STRUCT.size + index * header.record_dtype().itemsize


class _RecordWriter:
    """Streams fixed-size records after a header; finalizes the count on close."""

    def __init__(self, path: str | Path, header: Header) -> None:
        self.path = Path(path)
        self.header = header
        self.count = 0
        self._dtype = header.record_dtype()
        self._failed = False
        self._file: BinaryIO = open(self.path, "wb")
        self._file.write(header.pack(PARTIAL))

    def _write(self, record: np.ndarray) -> None:
        self._file.write(record.tobytes())
        self.count += 1

    def _drift(self, message: str) -> ShapeDriftError:
        self._failed = True
        return ShapeDriftError(f"{self.path}: record {self.count}: {message}")

    def close(self) -> None:
        if self._file.closed:
            return
        if not self._failed:
            self._file.seek(self.header.COUNT_OFFSET)
            self._file.write(struct.pack("<I", self.count))
        self._file.close()
        if self._failed:
            logger.warning("Left %s unfinalized after %d records", self.path, self.count)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is not None:
            self._failed = True
        self.close()


class FeatureWriter(_RecordWriter):
    header: FeatureFileHeader

    def append(self, features: FeatureMap, label: int) -> None:
        h = self.header
        if features.mode != h.mode:
            raise self._drift(f"mode {features.mode} in a {h.mode} file")
        if features.patches.shape != (h.channels, h.tokens, h.dim):
            raise self._drift(
                f"patches {features.patches.shape} != {(h.channels, h.tokens, h.dim)}"
            )
        if features.cls.shape != (h.cls_rows, h.dim):
            raise self._drift(f"cls {features.cls.shape} != {(h.cls_rows, h.dim)}")
        record = np.zeros((), dtype=self._dtype)
        record["cls"] = features.cls
        record["patches"] = features.patches
        record["label"] = label
        self._write(record)


class SampleWriter(_RecordWriter):
    header: SampleFileHeader

    def append(self, pixels: np.ndarray, latents: np.ndarray, label: int) -> None:
        h = self.header
        if pixels.shape != (h.channels, h.height, h.width):
            raise self._drift(f"pixels {pixels.shape} != {(h.channels, h.height, h.width)}")
        if latents.shape != (h.channels, h.latent_width):
            raise self._drift(f"latents {latents.shape} != {(h.channels, h.latent_width)}")
        record = np.zeros((), dtype=self._dtype)
        record["pixels"] = pixels
        record["latents"] = latents
        record["label"] = label
        self._write(record)


def _open_records(path: str | Path, header_cls: type[Header]) -> tuple[Header, np.ndarray]:
    path = Path(path)
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        raw = f.read(header_cls.STRUCT.size)
    if len(raw) < 4 or raw[:4] != header_cls.MAGIC:
        raise BadMagicError(f"{path}: not a {header_cls.MAGIC.decode()} file")
    if len(raw) < header_cls.STRUCT.size:
        raise TruncatedFileError(f"{path}: header is truncated", sample_index=0)
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    header = header_cls.unpack(raw)
    if header.sample_count == PARTIAL:
        raise PartialFileError(f"{path}: writer did not finish (partial-file marker set)")

    dtype = header.record_dtype()
    body = size - header_cls.STRUCT.size
    expected = header.sample_count * dtype.itemsize
    if body < expected:
        index = body // dtype.itemsize
        raise TruncatedFileError(
            f"{path}: truncated at sample {index} of {header.sample_count}", sample_index=index
        )
    if body > expected:
        raise StoreError(f"{path}: {body - expected} trailing bytes after last record")
    if header.sample_count == 0:
        return header, np.zeros(0, dtype=dtype)
    records = np.memmap(
        path, dtype=dtype, mode="r", offset=header_cls.STRUCT.size, shape=(header.sample_count,)
    )
    return header, records


@dataclass(frozen=True)
class FeatureSet:
    """Features promoted to float64, ready for probing."""

    mode: str
    patches: np.ndarray  # (S, C, N, D)
    cls: np.ndarray  # (S, 1 or C, D)
    labels: np.ndarray  # (S,)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices: Sequence[int] | np.ndarray) -> "FeatureSet":
        idx = np.asarray(indices, dtype=np.int64)
        return FeatureSet(self.mode, self.patches[idx], self.cls[idx], self.labels[idx])

    def load(self, indices: Sequence[int] | np.ndarray | None = None) -> "FeatureSet":
        """Same contract as ``FeatureFile.load`` for in-memory sets."""
        return self if indices is None else self.subset(indices)


class FeatureFile(Sequence):
    """Random-access view of an ``MCIF`` file."""

    def __init__(self, path: str | Path, header: FeatureFileHeader, records: np.ndarray) -> None:
        self.path = Path(path)
        self.header = header
        self._records = records

    def __len__(self) -> int:
        return self.header.sample_count

    def __getitem__(self, index: int) -> tuple[FeatureMap, int]:
        rec = self._records[index]
        features = FeatureMap(
            mode=self.header.mode,
            patches=rec["patches"].astype(np.float64),
            cls=rec["cls"].astype(np.float64),
        )
        return features, int(rec["label"])

    def __iter__(self) -> Iterator[tuple[FeatureMap, int]]:
        for i in range(len(self)):
            yield self[i]

    @property
    def labels(self) -> np.ndarray:
        return self._records["label"].astype(np.int64)

    def load(self, indices: Sequence[int] | np.ndarray | None = None) -> FeatureSet:
        idx = np.arange(len(self)) if indices is None else np.asarray(indices, dtype=np.int64)
        rows = self._records[idx]
        return FeatureSet(
            mode=self.header.mode,
            patches=rows["patches"].astype(np.float64),
            cls=rows["cls"].astype(np.float64),
            labels=rows["label"].astype(np.int64),
        )


class SampleFile(Sequence):
    """Random-access view of an ``MCIS`` file."""

    def __init__(self, path: str | Path, header: SampleFileHeader, records: np.ndarray) -> None:
        self.path = Path(path)
        self.header = header
        self._records = records

    def __len__(self) -> int:
        return self.header.sample_count

    def __getitem__(self, index: int) -> tuple[np.ndarray, np.ndarray, int]:
        rec = self._records[index]
        return (
            rec["pixels"].astype(np.float64),
            rec["latents"].astype(np.float64),
            int(rec["label"]),
        )

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray, int]]:
        for i in range(len(self)):
            yield self[i]

    @property
    def labels(self) -> np.ndarray:
        return self._records["label"].astype(np.int64)


def write_features(
    path: str | Path,
    header: FeatureFileHeader,
    samples: Iterable[tuple[FeatureMap, int]],
) -> int:
    """Stream ``(features, label)`` pairs to ``path``; returns the count written.

    ``header.sample_count`` is ignored; the real count is written on close.
    """
    with FeatureWriter(path, header) as writer:
        for features, label in samples:
            writer.append(features, label)
    logger.info("Wrote %d %s feature records to %s", writer.count, header.mode, path)
    return writer.count


def read_features(
    path: str | Path,
    expect_mode: str | None = None,
    expect_hash: bytes | None = None,
) -> FeatureFile:
    header, records = _open_records(path, FeatureFileHeader)
    if expect_mode is not None and header.mode != expect_mode:
        raise ModeMismatchError(f"{path}: holds {header.mode} features, expected {expect_mode}")
    if expect_hash is not None and header.encoder_hash != expect_hash:
        raise HashMismatchError(
            f"{path}: encoder hash {header.encoder_hash.hex()} != requested {expect_hash.hex()}"
        )
    return FeatureFile(path, header, records)


def write_samples(
    path: str | Path,
    header: SampleFileHeader,
    samples: Iterable[tuple[np.ndarray, np.ndarray, int]],
) -> int:
    with SampleWriter(path, header) as writer:
        for pixels, latents, label in samples:
            writer.append(pixels, latents, label)
    logger.info("Wrote %d samples to %s", writer.count, path)
    return writer.count


def read_samples(path: str | Path) -> SampleFile:
    header, records = _open_records(path, SampleFileHeader)
    return SampleFile(path, header, records)
