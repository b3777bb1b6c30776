"""Grid-series ingestion, synthesis, probe aggregation, windowing and
normalization.

The canonical on-disk form is a long CSV (`time_index,row,col,traffic_mb`)
plus a JSON metadata sidecar (rows, cols, interval_minutes, frames).
Cells absent from the CSV are zero: a missing call-detail record means no
activity crossed the logging threshold.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ShapeError

CSV_HEADER = "time_index,row,col,traffic_mb"


def _fmt(x: float) -> str:
    """17-significant-digit decimal rendering (lossless float round trip)."""
    return f"{float(x):.17g}"


@dataclass
class GridFrame:
    """One fine-grained snapshot: non-negative traffic volumes in MB."""

    values: np.ndarray
    time_index: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError(f"frame values must be 2-D, got shape {self.values.shape}")


@dataclass
class TrafficSeries:
    """Ordered stack of frames on one grid, at a constant interval."""

    values: np.ndarray  # [T, rows, cols]
    interval_minutes: int = 10

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ShapeError(f"series values must be [T,rows,cols], got shape {self.values.shape}")
        if self.interval_minutes < 1:
            raise ConfigError(f"interval_minutes must be positive, got {self.interval_minutes}")
        if not np.isfinite(self.values).all():
            raise DataError("series contains non-finite values")
        if (self.values < 0).any():
            raise DataError("series contains negative traffic volumes")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]

    def frame(self, t: int) -> GridFrame:
        return GridFrame(self.values[t], time_index=t)


# ---------------------------------------------------------------------------
# probe layouts
# ---------------------------------------------------------------------------

class ProbeLayout:
    """Partition of the fine grid into probe regions plus the projection
    of probe readings onto a square coarse grid.

    Uniform layouts tile the grid with n_f x n_f probes; the coarse grid
    is the probe grid itself. The mixture layout nests three probe sizes
    concentrically (2x2 centre, 4x4 ring, 10x10 outer ring) and projects
    each probe to the coarse cell containing its centroid at the finest
    factor, which keeps the projection one-to-one.
    """

    def __init__(self, kind, rows, cols, region_map, probe_sizes, projection,
                 coarse_shape, projected_factor):
        self.kind = kind
        self.rows = rows
        self.cols = cols
        self.region_map = region_map
        self.probe_sizes = probe_sizes
        self.projection = projection
        self.coarse_shape = coarse_shape
        self.projected_factor = projected_factor
        self.cell_counts = np.bincount(region_map.ravel(), minlength=len(probe_sizes))
        self._validate()

    def _validate(self):
        if self.region_map.shape != (self.rows, self.cols):
            raise ShapeError("region map does not cover the grid")
        if (self.cell_counts != self.probe_sizes ** 2).any():
            raise ConfigError("probe regions do not partition the grid into full coverages")
        flat = self.projection[:, 0] * self.coarse_shape[1] + self.projection[:, 1]
        if len(np.unique(flat)) != len(flat):
            raise ConfigError("projection is not one-to-one onto coarse cells")

    @property
    def probe_count(self) -> int:
        return len(self.probe_sizes)

    @property
    def name(self) -> str:
        if self.kind == "uniform":
            return f"up-{self.projected_factor}"
        return "mixture"

    @classmethod
    def uniform(cls, n_f: int, rows: int, cols: int) -> "ProbeLayout":
        if rows % n_f or cols % n_f:
            raise ConfigError(f"grid {rows}x{cols} not divisible by probe side {n_f}")
        cr, cc = rows // n_f, cols // n_f
        rr = np.arange(rows) // n_f
        ccg = np.arange(cols) // n_f
        region_map = (rr[:, None] * cc + ccg[None, :]).astype(np.int64)
        probes = cr * cc
        proj = np.stack([np.arange(probes) // cc, np.arange(probes) % cc], axis=1)
        return cls("uniform", rows, cols, region_map, np.full(probes, n_f, dtype=np.int64),
                   proj, (cr, cc), n_f)

    @classmethod
    def mixture(cls, rows: int, cols: int) -> "ProbeLayout":
        if rows != cols:
            raise ConfigError(f"mixture layout needs a square grid, got {rows}x{cols}")
        side = rows
        if side < 40 or side % 20:
            raise ConfigError(f"mixture layout needs side >= 40 and divisible by 20, got {side}")
        t10, t4 = _mixture_ring_widths(side)
        region_map = np.full((side, side), -1, dtype=np.int64)
        sizes = []
        next_id = 0

        def tile(r0, r1, c0, c1, k):
            nonlocal next_id
            for r in range(r0, r1, k):
                for c in range(c0, c1, k):
                    region_map[r : r + k, c : c + k] = next_id
                    sizes.append(k)
                    next_id += 1

        m0, m1 = t10, side - t10          # middle rectangle bounds
        i0, i1 = m0 + t4, m1 - t4         # inner square bounds
        # outer ring of 10x10 probes, as four rectangles
        tile(0, t10, 0, side, 10)
        tile(side - t10, side, 0, side, 10)
        tile(t10, side - t10, 0, t10, 10)
        tile(t10, side - t10, side - t10, side, 10)
        # middle ring of 4x4 probes
        tile(m0, i0, m0, m1, 4)
        tile(i1, m1, m0, m1, 4)
        tile(i0, i1, m0, i0, 4)
        tile(i0, i1, i1, m1, 4)
        # centre square of 2x2 probes
        tile(i0, i1, i0, i1, 2)

        probe_sizes = np.asarray(sizes, dtype=np.int64)
        # probe centroid in fine coordinates, projected at the finest factor
        proj = np.zeros((next_id, 2), dtype=np.int64)
        for p in range(next_id):
            rr, cc = np.nonzero(region_map == p)
            proj[p, 0] = int((rr.mean()) // 2)
            proj[p, 1] = int((cc.mean()) // 2)
        return cls("mixture", side, side, region_map, probe_sizes, proj,
                   (side // 2, side // 2), 2)

    def for_window(self, window_side: int) -> "ProbeLayout":
        """A layout of the same kind sized to a square window."""
        if self.kind == "uniform":
            return ProbeLayout.uniform(self.projected_factor, window_side, window_side)
        return ProbeLayout.mixture(window_side, window_side)

    def aggregate(self, values: np.ndarray) -> np.ndarray:
        """Probe means projected onto the coarse grid (zeros elsewhere)."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.rows, self.cols):
            raise ShapeError(
                f"frame shape {values.shape} incompatible with layout {self.rows}x{self.cols}"
            )
        if self.kind == "uniform":
            # extended-precision accumulator: a tile of equal values
            # aggregates back to exactly that value (uniform round trip)
            n = self.projected_factor
            tiles = values.reshape(self.rows // n, n, self.cols // n, n)
            return tiles.mean(axis=(1, 3), dtype=np.longdouble).astype(np.float64)
        sums = np.bincount(self.region_map.ravel(), weights=values.ravel(),
                           minlength=self.probe_count)
        means = sums / self.cell_counts
        coarse = np.zeros(self.coarse_shape, dtype=np.float64)
        coarse[self.projection[:, 0], self.projection[:, 1]] = means
        return coarse

    def probe_values(self, coarse: np.ndarray) -> np.ndarray:
        """Per-probe readings gathered back from a coarse frame."""
        coarse = np.asarray(coarse, dtype=np.float64)
        if coarse.shape != self.coarse_shape:
            raise ShapeError(f"coarse shape {coarse.shape} != layout coarse {self.coarse_shape}")
        return coarse[self.projection[:, 0], self.projection[:, 1]]


def _mixture_ring_widths(side: int) -> tuple[int, int]:
    """Ring widths whose probe-count shares come closest to 49/44/7."""
    target = np.array([0.49, 0.44, 0.07])
    best = None
    for t10 in range(10, side // 2, 10):
        mid = side - 2 * t10
        for t4 in range(4, mid // 2, 4):
            inner = mid - 2 * t4
            if inner < 2:
                continue
            n2 = inner * inner // 4
            n4 = (mid * mid - inner * inner) // 16
            n10 = (side * side - mid * mid) // 100
            total = n2 + n4 + n10
            shares = np.array([n2, n4, n10]) / total
            score = np.abs(shares - target).sum()
            if best is None or score < best[0]:
                best = (score, t10, t4)
    if best is None:
        raise ConfigError(f"no concentric mixture tiling fits side {side}")
    return best[1], best[2]


def aggregate(frame: GridFrame | np.ndarray, layout: ProbeLayout) -> np.ndarray:
    values = frame.values if isinstance(frame, GridFrame) else frame
    return layout.aggregate(values)


# ---------------------------------------------------------------------------
# synthetic traffic
# ---------------------------------------------------------------------------

@dataclass
class Hotspot:
    row: float
    col: float
    amplitude: float
    sigma: float
    phase: float = 0.0


def synth_series(rows: int, cols: int, frames: int, hotspots=4, seed: int = 0,
                 interval_minutes: int = 10, noise_scale: float = 0.02,
                 period_frames: int = 144) -> TrafficSeries:
    """Deterministic synthetic series: Gaussian hotspots with sinusoidal
    diurnal amplitude plus seeded noise, clamped at zero."""
    if rows < 8 or cols < 8:
        raise ConfigError(f"synthetic grid must be at least 8x8, got {rows}x{cols}")
    if frames < 1:
        raise ConfigError(f"frames must be >= 1, got {frames}")
    rng = np.random.default_rng(seed)
    if isinstance(hotspots, int):
        spots = [
            Hotspot(
                row=float(rng.uniform(2, rows - 3)),
                col=float(rng.uniform(2, cols - 3)),
                amplitude=float(rng.uniform(40.0, 120.0)),
                sigma=float(rng.uniform(1.0, 3.0)),
                phase=float(rng.uniform(0.0, 2.0 * math.pi)),
            )
            for _ in range(hotspots)
        ]
    else:
        spots = list(hotspots)

    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    t = np.arange(frames)[:, None, None]
    values = np.zeros((frames, rows, cols), dtype=np.float64)
    for h in spots:
        bump = np.exp(-((rr - h.row) ** 2 + (cc - h.col) ** 2) / (2.0 * h.sigma ** 2))
        diurnal = 0.5 * (1.0 + np.sin(2.0 * math.pi * t / period_frames + h.phase))
        values += h.amplitude * diurnal * bump[None]
    if noise_scale > 0:
        peak = max((h.amplitude for h in spots), default=1.0)
        values += rng.normal(0.0, noise_scale * peak, size=values.shape)
    np.clip(values, 0.0, None, out=values)
    return TrafficSeries(values, interval_minutes=interval_minutes)


# ---------------------------------------------------------------------------
# windows and stitching
# ---------------------------------------------------------------------------

def window_origins(rows: int, cols: int, window_side: int, offset: int = 1):
    if window_side > min(rows, cols):
        raise ShapeError(f"window {window_side} larger than grid {rows}x{cols}")
    if offset < 1:
        raise ConfigError(f"offset must be >= 1, got {offset}")
    r_org = range(0, rows - window_side + 1, offset)
    c_org = range(0, cols - window_side + 1, offset)
    return [(r, c) for r in r_org for c in c_org]


def make_windows(frame: GridFrame | np.ndarray, window_side: int = 80, offset: int = 1):
    """All windows at origins {0, offset, ...} along both axes."""
    values = frame.values if isinstance(frame, GridFrame) else np.asarray(frame)
    origins = window_origins(values.shape[0], values.shape[1], window_side, offset)
    return [((r, c), values[r : r + window_side, c : c + window_side]) for r, c in origins]


def stitch(window_preds, grid_shape) -> GridFrame:
    """Count-weighted moving average of overlapping window predictions."""
    total = np.zeros(grid_shape, dtype=np.float64)
    count = np.zeros(grid_shape, dtype=np.float64)
    for (r, c), win in window_preds:
        win = np.asarray(win, dtype=np.float64)
        if r < 0 or c < 0 or r + win.shape[0] > grid_shape[0] or c + win.shape[1] > grid_shape[1]:
            raise ShapeError(f"window at {(r, c)} with shape {win.shape} exceeds grid {grid_shape}")
        total[r : r + win.shape[0], c : c + win.shape[1]] += win
        count[r : r + win.shape[0], c : c + win.shape[1]] += 1.0
    if (count == 0).any():
        raise ShapeError("stitch: windows leave grid cells uncovered")
    return GridFrame(total / count)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@dataclass
class NormStats:
    mean: float
    std: float
    fitted_on: str = ""

    def __post_init__(self):
        if not self.std > 0:
            raise DataError(f"normalization std must be positive, got {self.std}")

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "fitted_on": self.fitted_on}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(**d)


def fit_norm(series: TrafficSeries, trange: tuple[int, int]) -> NormStats:
    start, stop = trange
    data = series.values[start:stop]
    if data.size == 0:
        raise DataError(f"empty fitting range [{start}, {stop})")
    std = float(data.std())
    if std == 0.0:
        raise DataError("constant series: standard deviation is zero")
    return NormStats(mean=float(data.mean()), std=std, fitted_on=f"t[{start}:{stop})")


def normalize(x: np.ndarray, stats: NormStats) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) - stats.mean) / stats.std


def denormalize(x: np.ndarray, stats: NormStats) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) * stats.std + stats.mean


# ---------------------------------------------------------------------------
# sample assembly
# ---------------------------------------------------------------------------

@dataclass
class SamplePair:
    """Coarse input sequence and its fine target over one window."""

    input: np.ndarray   # [S, ch, cw] probe aggregates for times t-S+1..t
    target: np.ndarray  # [window, window] fine frame at time t
    window_origin: tuple[int, int]
    time_index: int


def split_ranges(frames: int, split=(40, 10, 10)) -> tuple[tuple[int, int], ...]:
    """Contiguous train/val/test time ranges from proportional weights."""
    w = np.asarray(split, dtype=np.float64)
    if len(w) != 3 or (w < 0).any() or w.sum() <= 0:
        raise ConfigError(f"split must be three non-negative weights, got {split}")
    n_train = int(round(frames * w[0] / w.sum()))
    n_val = int(round(frames * w[1] / w.sum()))
    n_train = min(n_train, frames)
    n_val = min(n_val, frames - n_train)
    return (0, n_train), (n_train, n_train + n_val), (n_train + n_val, frames)


def build_dataset(series: TrafficSeries, layout: ProbeLayout, S: int,
                  window_side: int = 80, offset: int = 1, split=(40, 10, 10)):
    """Train/val/test SamplePair lists.

    Inputs are the probe aggregates of the same spatial window as the
    target at times t-S+1..t; the split is temporal and contiguous.
    """
    if S < 1:
        raise ConfigError(f"temporal length S must be >= 1, got {S}")
    if series.frames < S:
        raise ConfigError(f"series has {series.frames} frames, fewer than S={S}")
    rows, cols = series.grid_shape
    origins = window_origins(rows, cols, window_side, offset)
    win_layout = layout.for_window(window_side) if (rows, cols) != (window_side, window_side) else layout
    ranges = split_ranges(series.frames, split)

    sets = []
    for start, stop in ranges:
        pairs = []
        t_lo = max(start, S - 1)
        if t_lo < stop:
            for r, c in origins:
                block = series.values[:, r : r + window_side, c : c + window_side]
                agg = np.stack([win_layout.aggregate(block[t]) for t in range(t_lo - S + 1, stop)])
                for t in range(t_lo, stop):
                    k = t - (t_lo - S + 1)
                    pairs.append(SamplePair(
                        input=agg[k - S + 1 : k + 1],
                        target=block[t],
                        window_origin=(r, c),
                        time_index=t,
                    ))
        if not pairs:
            raise ConfigError(
                f"empty split segment [{start}, {stop}) for S={S}; adjust split weights"
            )
        sets.append(pairs)
    return tuple(sets)


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

def write_series(series: TrafficSeries, csv_path, meta_path=None):
    """Canonical CSV plus metadata sidecar. Zero cells are omitted
    (absent entries read back as zero)."""
    csv_path = Path(csv_path)
    meta_path = Path(meta_path) if meta_path else csv_path.with_suffix(".meta.json")
    t_idx, r_idx, c_idx = np.nonzero(series.values)
    vals = series.values[t_idx, r_idx, c_idx]
    with open(csv_path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        for t, r, c, v in zip(t_idx, r_idx, c_idx, vals):
            fh.write(f"{t},{r},{c},{_fmt(v)}\n")
    meta = {
        "rows": series.grid_shape[0],
        "cols": series.grid_shape[1],
        "interval_minutes": series.interval_minutes,
        "frames": series.frames,
    }
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return csv_path, meta_path


def read_meta(meta_path) -> dict:
    with open(meta_path) as fh:
        meta = json.load(fh)
    for key in ("rows", "cols", "interval_minutes", "frames"):
        if key not in meta:
            raise DataError(f"metadata sidecar missing {key!r}")
    return meta


def ingest(csv_path, meta=None) -> TrafficSeries:
    """Parse the canonical grid CSV into a dense series.

    Absent (time, cell) entries are zero. Malformed rows, non-numeric
    traffic and duplicate cells raise errors naming the line number.
    """
    csv_path = Path(csv_path)
    if meta is None:
        meta = read_meta(csv_path.with_suffix(".meta.json"))
    elif not isinstance(meta, dict):
        meta = read_meta(meta)
    rows, cols, frames = meta["rows"], meta["cols"], meta["frames"]
    values = np.zeros((frames, rows, cols), dtype=np.float64)
    seen = np.zeros((frames, rows, cols), dtype=bool)
    with open(csv_path) as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise DataError(f"line 1: expected header {CSV_HEADER!r}, got {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise DataError(f"line {lineno}: expected 4 fields, got {len(parts)}")
            try:
                t, r, c = int(parts[0]), int(parts[1]), int(parts[2])
            except ValueError:
                raise DataError(f"line {lineno}: non-integer index in {parts[:3]}") from None
            try:
                v = float(parts[3])
            except ValueError:
                raise DataError(f"line {lineno}: non-numeric traffic {parts[3]!r}") from None
            if not (0 <= t < frames and 0 <= r < rows and 0 <= c < cols):
                raise DataError(f"line {lineno}: cell ({t},{r},{c}) outside declared grid")
            if not math.isfinite(v) or v < 0:
                raise DataError(f"line {lineno}: traffic must be finite and non-negative, got {v}")
            if seen[t, r, c]:
                raise DataError(f"line {lineno}: duplicate entry for (time={t}, row={r}, col={c})")
            seen[t, r, c] = True
            values[t, r, c] = v
    return TrafficSeries(values, interval_minutes=meta["interval_minutes"])


def convert_telecom_export(src_path, csv_path, rows: int = 100, cols: int = 100,
                           interval_minutes: int = 10, origin_ms=None) -> TrafficSeries:
    """Adapter for the public Telecom Italia grid export.

    Tab-separated rows of (square_id, epoch-ms timestamp, country code,
    activity columns...); all activity columns are summed into one traffic
    value per (time, cell) across country codes. Writes the canonical CSV
    and sidecar, returns the ingested series.
    """
    src_path = Path(src_path)
    acc: dict[tuple[int, int, int], float] = {}
    max_t = -1
    with open(src_path) as fh:
        records = []
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 4:
                raise DataError(f"line {lineno}: expected at least 4 tab-separated fields")
            try:
                sid = int(parts[0])
                ts = int(parts[1])
            except ValueError:
                raise DataError(f"line {lineno}: bad square id or timestamp") from None
            total = 0.0
            for col in parts[3:]:
                if col.strip():
                    try:
                        total += float(col)
                    except ValueError:
                        raise DataError(f"line {lineno}: non-numeric activity {col!r}") from None
            records.append((sid, ts, total, lineno))
    if not records:
        raise DataError(f"{src_path}: no records")
    if origin_ms is None:
        origin_ms = min(r[1] for r in records)
    step_ms = interval_minutes * 60 * 1000
    for sid, ts, total, lineno in records:
        if not 1 <= sid <= rows * cols:
            raise DataError(f"line {lineno}: square id {sid} outside 1..{rows * cols}")
        if (ts - origin_ms) % step_ms:
            raise DataError(f"line {lineno}: timestamp {ts} off the {interval_minutes}-minute grid")
        t = (ts - origin_ms) // step_ms
        if t < 0:
            raise DataError(f"line {lineno}: timestamp {ts} before origin")
        r, c = (sid - 1) // cols, (sid - 1) % cols
        acc[(t, r, c)] = acc.get((t, r, c), 0.0) + total
        max_t = max(max_t, t)
    values = np.zeros((max_t + 1, rows, cols), dtype=np.float64)
    for (t, r, c), v in acc.items():
        values[t, r, c] = v
    series = TrafficSeries(values, interval_minutes=interval_minutes)
    write_series(series, csv_path)
    return series
