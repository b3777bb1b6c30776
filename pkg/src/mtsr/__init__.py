"""Mobile-traffic super-resolution toolkit.

Reconstructs fine-grained city-grid traffic maps from coarse probe
aggregates: a ZipNet generator trained adversarially against a VGG-style
discriminator, classical interpolation baselines, and an evaluation
suite (NRMSE / PSNR / SSIM, input-gradient saliency, anomaly injection).
"""

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    CheckpointFormatError,
    CheckpointManifestError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    DataError,
    MtsrError,
    NumericError,
    ShapeError,
)
from .tensor import Tensor

__all__ = [
    "Tensor",
    "MtsrError",
    "ShapeError",
    "ConfigError",
    "DataError",
    "NumericError",
    "CheckpointError",
    "CheckpointFormatError",
    "CheckpointVersionError",
    "CheckpointTruncatedError",
    "CheckpointManifestError",
    "__version__",
]
