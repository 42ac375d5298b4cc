"""Error types for mci-probe.

Every error carries a short machine-readable ``code`` that the CLI prints
on failure. Each class also derives from the builtin a caller would
naturally catch (``ValueError`` for bad input, ``OSError`` for file
problems).
"""


class MciProbeError(Exception):
    """Base class for all domain errors."""

    code: str = "error"


class ConfigError(MciProbeError, ValueError):
    code = "config"


class ShapeError(MciProbeError, ValueError):
    code = "shape"


class NonFiniteError(MciProbeError, ValueError):
    code = "non_finite"


class LabelError(MciProbeError, ValueError):
    code = "label"


class GraphError(MciProbeError, RuntimeError):
    code = "graph"


class UnknownArchError(MciProbeError, ValueError):
    code = "unknown_arch"


class ModeMismatchError(MciProbeError, ValueError):
    code = "mode_mismatch"


class EmptySplitError(MciProbeError, ValueError):
    code = "empty_split"


class StoreError(MciProbeError, OSError):
    """Base class for container format errors."""

    code = "store"


class BadMagicError(StoreError):
    code = "bad_magic"


class VersionMismatchError(StoreError):
    code = "version_mismatch"


class TruncatedFileError(StoreError):
    code = "truncated"

    def __init__(self, message: str, sample_index: int) -> None:
        super().__init__(message)
        self.sample_index = sample_index


class PartialFileError(StoreError):
    code = "partial_file"


class HashMismatchError(StoreError):
    code = "hash_mismatch"


class ShapeDriftError(StoreError):
    code = "shape_drift"
