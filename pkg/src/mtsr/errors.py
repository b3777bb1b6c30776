"""Exception types shared across the package."""


class MtsrError(Exception):
    """Base class for all package errors."""


class ShapeError(MtsrError, ValueError):
    """Tensor extents incompatible with the requested operation."""


class ConfigError(MtsrError, ValueError):
    """Invalid or mismatched configuration."""


class DataError(MtsrError, ValueError):
    """Malformed input data (parse errors carry line numbers)."""


class NumericError(MtsrError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class CheckpointError(MtsrError):
    """Base class for checkpoint I/O failures."""


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes or otherwise corrupt container."""


class CheckpointVersionError(CheckpointError):
    """Container version not understood by this reader."""


class CheckpointTruncatedError(CheckpointError):
    """File ends before the manifest says it should."""


class CheckpointManifestError(CheckpointError):
    """Manifest inconsistent with the payload (names, shapes, offsets)."""
