"""Non-learned reference reconstructors: uniform replication and
separable Keys bicubic interpolation."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .datapipe import ProbeLayout
from .errors import ConfigError, ShapeError


@dataclass
class BicubicConfig:
    kernel_a: float = -0.5
    boundary: str = "replicate"

    def __post_init__(self):
        if not self.kernel_a < 0:
            raise ConfigError(f"Keys kernel parameter must be negative, got {self.kernel_a}")
        if self.boundary not in ("replicate", "reflect"):
            raise ConfigError(f"boundary must be replicate or reflect, got {self.boundary!r}")


def uniform_upsample(coarse: np.ndarray, layout: ProbeLayout) -> np.ndarray:
    """Every fine cell takes its covering probe's reading."""
    probe_vals = layout.probe_values(coarse)
    return probe_vals[layout.region_map]


def _keys_weight(t: float, a: float) -> float:
    at = abs(t)
    if at <= 1.0:
        return (a + 2.0) * at ** 3 - (a + 3.0) * at ** 2 + 1.0
    if at < 2.0:
        return a * at ** 3 - 5.0 * a * at ** 2 + 8.0 * a * at - 4.0 * a
    return 0.0


def _edge_index(i: int, n: int, boundary: str) -> int:
    if 0 <= i < n:
        return i
    if boundary == "replicate":
        return min(max(i, 0), n - 1)
    # reflect about the edge cells
    if i < 0:
        i = -i - 1
    if i >= n:
        i = 2 * n - 1 - i
    return min(max(i, 0), n - 1)


@lru_cache(maxsize=32)
def _bicubic_matrix(n_in: int, factor: int, a: float, boundary: str) -> np.ndarray:
    """Dense [n_in*factor, n_in] interpolation matrix, centre-aligned."""
    n_out = n_in * factor
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        src = (i + 0.5) / factor - 0.5
        base = int(np.floor(src))
        frac = src - base
        for k in range(-1, 3):
            w = _keys_weight(frac - k, a)
            if w != 0.0:
                mat[i, _edge_index(base + k, n_in, boundary)] += w
    return mat


def bicubic_upsample(coarse: np.ndarray, factor: int, config: BicubicConfig | None = None) -> np.ndarray:
    """Separable Keys bicubic; output extents are input extents x factor."""
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ConfigError(f"upscaling factor must be an integer >= 1, got {factor}")
    config = config or BicubicConfig()
    x = np.asarray(coarse, dtype=np.float64)
    if factor == 1:
        return x.copy()
    if x.ndim == 1:
        return _bicubic_matrix(x.shape[0], factor, config.kernel_a, config.boundary) @ x
    if x.ndim != 2:
        raise ShapeError(f"bicubic input must be 1-D or 2-D, got shape {x.shape}")
    m_r = _bicubic_matrix(x.shape[0], factor, config.kernel_a, config.boundary)
    m_c = _bicubic_matrix(x.shape[1], factor, config.kernel_a, config.boundary)
    return m_r @ x @ m_c.T
