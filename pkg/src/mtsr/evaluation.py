"""Reconstruction metrics (NRMSE, PSNR, SSIM), per-frame input-gradient
saliency, the anomaly-injection harness, and the cross-method report."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .baselines import BicubicConfig, bicubic_upsample, uniform_upsample
from .datapipe import (
    GridFrame,
    NormStats,
    ProbeLayout,
    SamplePair,
    TrafficSeries,
    denormalize,
    normalize,
    stitch,
    window_origins,
)
from .errors import ConfigError, DataError, ShapeError
from .training import stack_samples
from . import tensor as T
from .tensor import Tensor


@dataclass
class MetricConfig:
    psnr_max: float = 5496.0
    ssim_c1: float = field(default=None)
    ssim_c2: float = field(default=None)
    psnr_cap: float = 200.0

    def __post_init__(self):
        if self.ssim_c1 is None:
            self.ssim_c1 = (0.01 * self.psnr_max) ** 2
        if self.ssim_c2 is None:
            self.ssim_c2 = (0.03 * self.psnr_max) ** 2
        for name in ("psnr_max", "ssim_c1", "ssim_c2", "psnr_cap"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be strictly positive, got {getattr(self, name)}")


def _frames(pred, truth):
    p = pred.values if isinstance(pred, GridFrame) else np.asarray(pred, dtype=np.float64)
    t = truth.values if isinstance(truth, GridFrame) else np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"prediction shape {p.shape} != truth shape {t.shape}")
    return p.astype(np.float64), t.astype(np.float64)


def nrmse(pred, truth) -> float:
    """Root mean square error over cells, normalized by the truth mean."""
    p, t = _frames(pred, truth)
    t_mean = t.mean()
    if t_mean <= 0:
        raise DataError(f"NRMSE requires a positive truth mean, got {t_mean}")
    return float(np.sqrt(np.mean((p - t) ** 2)) / t_mean)


def psnr(pred, truth, config: MetricConfig | None = None) -> float:
    """Peak signal-to-noise ratio in dB against the configured peak."""
    config = config or MetricConfig()
    p, t = _frames(pred, truth)
    mse = float(np.mean((p - t) ** 2))
    if mse == 0.0:
        return config.psnr_cap
    return 20.0 * math.log10(config.psnr_max) - 10.0 * math.log10(mse)


def ssim(pred, truth, config: MetricConfig | None = None) -> float:
    """Whole-frame structural similarity with the standard stabilized form."""
    config = config or MetricConfig()
    p, t = _frames(pred, truth)
    mu_p, mu_t = p.mean(), t.mean()
    var_p, var_t = p.var(), t.var()
    cov = ((p - mu_p) * (t - mu_t)).mean()
    c1, c2 = config.ssim_c1, config.ssim_c2
    return float(
        ((2.0 * mu_t * mu_p + c1) * (2.0 * cov + c2))
        / ((mu_t ** 2 + mu_p ** 2 + c1) * (var_t + var_p + c2))
    )


# ---------------------------------------------------------------------------
# saliency
# ---------------------------------------------------------------------------

@dataclass
class SaliencyReport:
    """Mean |d loss / d input| per temporal frame, over samples and cells."""

    per_frame_magnitudes: np.ndarray
    instance: str = ""

    def __post_init__(self):
        self.per_frame_magnitudes = np.asarray(self.per_frame_magnitudes, dtype=np.float64)
        if self.per_frame_magnitudes.ndim != 1:
            raise ShapeError("per-frame magnitudes must be a vector")
        if (self.per_frame_magnitudes < 0).any():
            raise DataError("saliency magnitudes must be non-negative")


def saliency(gen, disc, dataset: list[SamplePair], stats: NormStats | None = None,
             log_clip: float = 1e-7, batch_size: int = 16) -> SaliencyReport:
    """Input-gradient magnitudes of the generator objective, per frame.

    For every sample, differentiates the per-sample adversarially weighted
    squared error with respect to the coarse input sequence, then averages
    |gradient| per temporal frame over all samples and cells.
    """
    s_len = gen.instance.temporal_length
    if dataset and dataset[0].input.shape[0] != s_len:
        raise ConfigError(
            f"dataset temporal length {dataset[0].input.shape[0]} != model S {s_len}"
        )
    inputs, targets = stack_samples(dataset, stats, gen.dtype)
    total = np.zeros(s_len, dtype=np.float64)
    count = 0
    gen.set_requires_grad(False)
    disc.set_requires_grad(False)
    try:
        for lo in range(0, inputs.shape[0], batch_size):
            batch = inputs[lo : lo + batch_size]
            truth = Tensor(targets[lo : lo + batch_size][:, None])
            x = Tensor(gen.prepare_input(batch), requires_grad=True)
            pred = gen.forward(x, mode="infer")
            d_fake = disc.forward(pred, mode="infer")
            diff = T.sub(truth, pred)
            per = T.sum_(T.square(diff), axes=(1, 2, 3))
            factor = T.sub(1.0, T.mul(T.log(T.clip(d_fake, log_clip, 1.0 - log_clip)), 2.0))
            # summed, not averaged: each sample keeps its own gradient scale
            T.sum_(T.mul(factor, per)).backward()
            g = np.abs(x.grad[:, 0])  # [n, S, h, w]
            total += g.sum(axis=(0, 2, 3))
            count += g.shape[0] * g.shape[2] * g.shape[3]
    finally:
        gen.set_requires_grad(True)
        disc.set_requires_grad(True)
    per_frame = total / count
    return SaliencyReport(per_frame, instance=f"{gen.instance.layout_kind}-{gen.instance.upscaling_factor}")


def write_saliency_csv(path, report: SaliencyReport):
    with open(path, "w") as fh:
        fh.write("frame_index,mean_grad_magnitude\n")
        for i, v in enumerate(report.per_frame_magnitudes):
            fh.write(f"{i},{float(v):.17g}\n")


# ---------------------------------------------------------------------------
# anomaly injection
# ---------------------------------------------------------------------------

def inject_anomaly(series: TrafficSeries, region, magnitude: float, time_range) -> TrafficSeries:
    """Add a constant surge over a cell region for a span of snapshots."""
    if magnitude < 0:
        raise ConfigError(f"anomaly magnitude must be >= 0, got {magnitude}")
    r0, r1, c0, c1 = region
    rows, cols = series.grid_shape
    if not (0 <= r0 < r1 <= rows and 0 <= c0 < c1 <= cols):
        raise ShapeError(f"region {region} outside grid {rows}x{cols}")
    t0, t1 = time_range
    if not (0 <= t0 < t1 <= series.frames):
        raise ShapeError(f"time range {time_range} outside series of {series.frames} frames")
    values = series.values.copy()
    values[t0:t1, r0:r1, c0:c1] += magnitude
    return TrafficSeries(values, interval_minutes=series.interval_minutes)


# ---------------------------------------------------------------------------
# cross-method report
# ---------------------------------------------------------------------------

@dataclass
class MethodContext:
    layout: ProbeLayout       # window-sized layout the inputs were aggregated with
    time_index: int
    origins: list
    window_side: int


def make_uniform_method():
    def method(inputs: np.ndarray, ctx: MethodContext) -> np.ndarray:
        return np.stack([uniform_upsample(seq[-1], ctx.layout) for seq in inputs])
    return method


def make_bicubic_method(config: BicubicConfig | None = None):
    config = config or BicubicConfig()

    def method(inputs: np.ndarray, ctx: MethodContext) -> np.ndarray:
        f = ctx.layout.projected_factor
        return np.stack([bicubic_upsample(seq[-1], f, config) for seq in inputs])
    return method


def make_model_method(model, stats: NormStats):
    """Wrap a trained network: normalize, predict, denormalize."""

    def method(inputs: np.ndarray, ctx: MethodContext) -> np.ndarray:
        return denormalize(model.predict(normalize(inputs, stats)), stats)
    return method


def evaluate_suite(methods: dict, series: TrafficSeries, layouts, S: int,
                   window_side: int, offset: int = 1, test_range=None,
                   config: MetricConfig | None = None):
    """Mean NRMSE/PSNR/SSIM per (method, layout) over the test snapshots.

    Window predictions are stitched to the full grid before scoring. A
    method failure is recorded as a missing (NaN) row and flagged.
    """
    config = config or MetricConfig()
    rows, cols = series.grid_shape
    if test_range is None:
        test_range = (S - 1, series.frames)
    t_lo, t_hi = max(test_range[0], S - 1), test_range[1]
    if t_lo >= t_hi:
        raise ConfigError(f"empty test range {test_range} for S={S}")
    origins = window_origins(rows, cols, window_side, offset)
    report = []
    for layout in layouts:
        win_layout = layout.for_window(window_side)
        per_t_inputs = []
        for t in range(t_lo, t_hi):
            batch = np.stack([
                np.stack([
                    win_layout.aggregate(series.values[tt, r : r + window_side, c : c + window_side])
                    for tt in range(t - S + 1, t + 1)
                ])
                for r, c in origins
            ])
            per_t_inputs.append(batch)
        for name, method in methods.items():
            scores = []
            failed = False
            try:
                for i, t in enumerate(range(t_lo, t_hi)):
                    ctx = MethodContext(win_layout, t, origins, window_side)
                    preds = method(per_t_inputs[i], ctx)
                    full = stitch(list(zip(origins, preds)), (rows, cols))
                    truth = series.frame(t)
                    scores.append((
                        nrmse(full, truth),
                        psnr(full, truth, config),
                        ssim(full, truth, config),
                    ))
            except Exception as exc:  # noqa: BLE001 - method failures become flagged rows
                warnings.warn(f"method {name!r} failed on layout {layout.name}: {exc}", RuntimeWarning)
                failed = True
            if failed or not scores:
                report.append({"method": name, "layout": layout.name,
                               "nrmse": float("nan"), "psnr_db": float("nan"),
                               "ssim": float("nan"), "failed": True})
            else:
                arr = np.asarray(scores)
                report.append({"method": name, "layout": layout.name,
                               "nrmse": float(arr[:, 0].mean()),
                               "psnr_db": float(arr[:, 1].mean()),
                               "ssim": float(arr[:, 2].mean()), "failed": False})
    return report


def write_report_csv(path, report):
    with open(path, "w") as fh:
        fh.write("method,layout,nrmse,psnr_db,ssim\n")
        for row in report:
            fh.write(
                f"{row['method']},{row['layout']},{row['nrmse']:.17g},"
                f"{row['psnr_db']:.17g},{row['ssim']:.17g}\n"
            )
