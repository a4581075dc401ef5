"""Per-bin linear regression of the Doppler bias on range."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError
from .measurement import Extrinsics, doppler_rows
from .pointcloud import GridConfig, LidarFrame, downsample
from .ransac import RansacConfig, run as run_ransac

log = logging.getLogger(__name__)

BIAS_COLUMNS = ("row", "col", "b0", "b1", "n_samples")


@dataclass
class BiasModel:
    """Coefficients of ``bias = b0 + b1 * range`` for every (beam row, azimuth column) bin.

    Bins without a usable fit have ``valid == False``; their coefficients are
    never consulted.
    """

    b0: np.ndarray
    b1: np.ndarray
    valid: np.ndarray
    n_samples: np.ndarray = None

    def __post_init__(self):
        self.b0 = np.asarray(self.b0, dtype=float)
        self.b1 = np.asarray(self.b1, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.n_samples is None:
            self.n_samples = np.zeros(self.b0.shape, dtype=np.int64)
        self.n_samples = np.asarray(self.n_samples, dtype=np.int64)
        if not (self.b0.shape == self.b1.shape == self.valid.shape == self.n_samples.shape) \
                or self.b0.ndim != 2:
            raise ValueError("bias coefficient arrays must share one 2-D grid shape")

    @classmethod
    def empty(cls, shape) -> BiasModel:
        return cls(np.zeros(shape), np.zeros(shape), np.zeros(shape, dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.b0.shape

    def predict(self, rows, cols, ranges):
        """Vectorised bias lookup; returns ``(bias, corrected_mask)``.

        Returns outside the grid (``cols == -1``) or in invalid bins get zero
        bias and ``corrected_mask == False``.
        """
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        ranges = np.asarray(ranges, dtype=float)
        nr, nc = self.shape
        inside = (rows >= 0) & (rows < nr) & (cols >= 0) & (cols < nc)
        r = np.where(inside, rows, 0)
        c = np.where(inside, cols, 0)
        ok = inside & self.valid[r, c]
        bias = np.where(ok, self.b0[r, c] + self.b1[r, c] * ranges, 0.0)
        return bias, ok


def predict_bias(model: BiasModel, bin_index, rng: float) -> float:
    """Bias in m/s for one return; 0 for a bin that was never calibrated."""
    row, col = bin_index
    nr, nc = model.shape
    if not (0 <= row < nr and 0 <= col < nc):
        raise IndexError(f"bin {bin_index} outside grid {model.shape}")
    if not model.valid[row, col]:
        return 0.0
    return float(model.b0[row, col] + model.b1[row, col] * rng)


def frame_bias(model: BiasModel | None, frame: LidarFrame, grid: GridConfig):
    """Per-return predicted bias and corrected flags for a frame."""
    if model is None:
        return np.zeros(len(frame)), np.zeros(len(frame), dtype=bool)
    return model.predict(frame.beam_row, grid.columns(frame.azimuth), frame.range)


@dataclass(frozen=True)
class CalibrationSample:
    bin: tuple[int, int]
    range: float
    residual: float


@dataclass
class CalibrationSet:
    """Column-wise calibration samples (what :func:`fit` consumes)."""

    rows: np.ndarray
    cols: np.ndarray
    ranges: np.ndarray
    residuals: np.ndarray
    skipped: int = 0

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64).reshape(-1)
        self.cols = np.asarray(self.cols, dtype=np.int64).reshape(-1)
        self.ranges = np.asarray(self.ranges, dtype=float).reshape(-1)
        self.residuals = np.asarray(self.residuals, dtype=float).reshape(-1)

    def __len__(self) -> int:
        return self.rows.size

    @classmethod
    def from_samples(cls, samples) -> CalibrationSet:
        samples = list(samples)
        return cls([s.bin[0] for s in samples], [s.bin[1] for s in samples],
                   [s.range for s in samples], [s.residual for s in samples])

    def samples(self) -> list[CalibrationSample]:
        return [CalibrationSample((int(r), int(c)), float(x), float(e))
                for r, c, x, e in zip(self.rows, self.cols, self.ranges, self.residuals)]

    @classmethod
    def concatenate(cls, sets) -> CalibrationSet:
        sets = list(sets)
        if not sets:
            return cls([], [], [], [])
        return cls(np.concatenate([s.rows for s in sets]), np.concatenate([s.cols for s in sets]),
                   np.concatenate([s.ranges for s in sets]),
                   np.concatenate([s.residuals for s in sets]),
                   skipped=sum(s.skipped for s in sets))


def fit(samples, shape, min_samples_per_bin: int = 50, min_range_spread: float = 5.0) -> BiasModel:
    """Ordinary least squares of residual on ``[1, range]`` in every bin.

    A bin is valid only with at least ``min_samples_per_bin`` samples spanning
    at least ``min_range_spread`` meters of range.
    """
    if not isinstance(samples, CalibrationSet):
        samples = CalibrationSet.from_samples(samples)
    nr, nc = shape
    nbins = nr * nc
    model = BiasModel.empty(shape)
    if len(samples) == 0:
        return model
    inside = (samples.rows >= 0) & (samples.rows < nr) & (samples.cols >= 0) & (samples.cols < nc)
    flat = (samples.rows * nc + samples.cols)[inside]
    x = samples.ranges[inside]
    y = samples.residuals[inside]

    n = np.bincount(flat, minlength=nbins).astype(float)
    safe_n = np.maximum(n, 1.0)
    xm = np.bincount(flat, weights=x, minlength=nbins) / safe_n
    ym = np.bincount(flat, weights=y, minlength=nbins) / safe_n
    dx = x - xm[flat]
    dy = y - ym[flat]
    sxx = np.bincount(flat, weights=dx * dx, minlength=nbins)
    sxy = np.bincount(flat, weights=dx * dy, minlength=nbins)

    lo = np.full(nbins, np.inf)
    hi = np.full(nbins, -np.inf)
    np.minimum.at(lo, flat, x)
    np.maximum.at(hi, flat, x)
    valid = (n >= max(min_samples_per_bin, 2)) & (hi - lo >= min_range_spread) & (sxx > 0)

    slope = np.where(valid, sxy / np.where(sxx > 0, sxx, 1.0), 0.0)
    model.b1 = slope.reshape(shape)
    model.b0 = np.where(valid, ym - slope * xm, 0.0).reshape(shape)
    model.valid = valid.reshape(shape)
    model.n_samples = n.astype(np.int64).reshape(shape)
    return model


def build_calibration_samples(frames, groundtruth, extrinsics: Extrinsics, grid: GridConfig,
                              ransac: RansacConfig | None = RansacConfig()) -> CalibrationSet:
    """Doppler residuals against groundtruth velocity, one per downsampled inlier return.

    ``groundtruth`` must expose ``span`` (t_min, t_max) and ``velocity(times)``
    returning an ``(N, 6)`` array.  Returns outside the span are skipped and
    counted in ``CalibrationSet.skipped``.
    """
    t_min, t_max = groundtruth.span
    parts = []
    skipped = 0
    for frame in frames:
        ds = downsample(frame, grid)
        if len(ds) == 0:
            continue
        keep = np.ones(len(ds), dtype=bool)
        if ransac is not None:
            keep = run_ransac(ds, extrinsics, ransac).mask
        in_span = (ds.timestamps >= t_min) & (ds.timestamps <= t_max)
        skipped += int(np.count_nonzero(keep & ~in_span))
        keep &= in_span
        sub = ds.subset(np.flatnonzero(keep))
        if len(sub) == 0:
            continue
        rows = doppler_rows(sub.points, extrinsics, sub.range)
        w = groundtruth.velocity(sub.timestamps)
        residual = sub.doppler - np.einsum("ij,ij->i", rows, w)
        parts.append(CalibrationSet(sub.beam_row, grid.columns(sub.azimuth), sub.range, residual))
    out = CalibrationSet.concatenate(parts)
    out.skipped = skipped
    if skipped:
        log.warning("skipped %d returns outside the groundtruth span", skipped)
    return out


def rms_by_range(samples: CalibrationSet, model: BiasModel, edges) -> list[dict]:
    """RMS residual per range band before and after bias correction."""
    edges = np.asarray(edges, dtype=float)
    bias, _ = model.predict(samples.rows, samples.cols, samples.ranges)
    after = samples.residuals - bias
    band = np.searchsorted(edges, samples.ranges, side="right") - 1
    out = []
    for i in range(edges.size - 1):
        sel = band == i
        n = int(np.count_nonzero(sel))
        out.append({
            "range_lo": edges[i], "range_hi": edges[i + 1], "n": n,
            "rms_before": float(np.sqrt(np.mean(samples.residuals[sel] ** 2))) if n else float("nan"),
            "rms_after": float(np.sqrt(np.mean(after[sel] ** 2))) if n else float("nan"),
        })
    return out


def save_bias_model(model: BiasModel, path) -> None:
    with Path(path).open("w", newline="") as fh:
        fh.write(",".join(BIAS_COLUMNS) + "\n")
        for r, c in zip(*np.nonzero(model.valid)):
            fh.write(f"{r:d},{c:d},{model.b0[r, c]:.17g},{model.b1[r, c]:.17g},"
                     f"{model.n_samples[r, c]:d}\n")


def load_bias_model(path, shape) -> BiasModel:
    model = BiasModel.empty(shape)
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != BIAS_COLUMNS:
            raise ParseError(path, 0, f"expected header {','.join(BIAS_COLUMNS)}")
        for lineno, line in enumerate(reader, start=1):
            try:
                r, c = int(line[0]), int(line[1])
                b0, b1, n = float(line[2]), float(line[3]), int(line[4])
            except (ValueError, IndexError):
                raise ParseError(path, lineno, "malformed bias record") from None
            if not (0 <= r < shape[0] and 0 <= c < shape[1]):
                raise ParseError(path, lineno, f"bin ({r}, {c}) outside grid {tuple(shape)}")
            model.b0[r, c], model.b1[r, c], model.n_samples[r, c] = b0, b1, n
            model.valid[r, c] = True
    return model
