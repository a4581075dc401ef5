"""Lidar frame ingestion, spherical coordinates and azimuth/beam-row downsampling."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, InvalidPointError, ParseError

FRAME_PATTERN = "frame_{:06d}.bin"
FRAME_COLUMNS = ("timestamp_s", "x", "y", "z", "doppler_mps", "beam_row")


@dataclass(frozen=True)
class DopplerReturn:
    q: np.ndarray
    doppler: float
    timestamp: float
    range: float
    azimuth: float
    elevation: float
    beam_row: int


@dataclass
class LidarFrame:
    """One lidar sweep stored column-wise.

    All per-return arrays share the first dimension; ``points`` are sensor-frame
    coordinates in meters and ``doppler`` is the radial speed (positive when the
    point recedes).
    """

    frame_index: int
    start_time: float
    end_time: float
    timestamps: np.ndarray
    points: np.ndarray
    doppler: np.ndarray
    beam_row: np.ndarray
    range: np.ndarray | None = None
    azimuth: np.ndarray | None = None
    elevation: np.ndarray | None = None

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.doppler = np.asarray(self.doppler, dtype=float).reshape(-1)
        self.beam_row = np.asarray(self.beam_row, dtype=np.int64).reshape(-1)
        n = self.timestamps.shape[0]
        if not (self.points.shape[0] == self.doppler.shape[0] == self.beam_row.shape[0] == n):
            raise DataError("per-return arrays of a LidarFrame must have equal length")
        if self.range is None:
            self.range, self.azimuth, self.elevation = spherical_coordinates(self.points)

    def __len__(self) -> int:
        return self.timestamps.shape[0]

    def __getitem__(self, i: int) -> DopplerReturn:
        return DopplerReturn(self.points[i].copy(), float(self.doppler[i]), float(self.timestamps[i]),
                             float(self.range[i]), float(self.azimuth[i]), float(self.elevation[i]),
                             int(self.beam_row[i]))

    def subset(self, idx) -> LidarFrame:
        return LidarFrame(self.frame_index, self.start_time, self.end_time,
                          self.timestamps[idx], self.points[idx], self.doppler[idx],
                          self.beam_row[idx], self.range[idx], self.azimuth[idx],
                          self.elevation[idx])

    def validate(self, num_beam_rows: int | None = None, time_tol: float = 1e-9) -> None:
        if not self.start_time < self.end_time:
            raise DataError(f"frame {self.frame_index}: start_time must precede end_time")
        if len(self) == 0:
            return
        bad = np.flatnonzero((self.timestamps < self.start_time - time_tol)
                             | (self.timestamps > self.end_time + time_tol))
        if bad.size:
            raise DataError(f"frame {self.frame_index}: return {bad[0]} timestamp "
                            f"{self.timestamps[bad[0]]!r} outside [{self.start_time}, {self.end_time}]")
        if num_beam_rows is not None:
            bad = np.flatnonzero((self.beam_row < 0) | (self.beam_row >= num_beam_rows))
            if bad.size:
                raise DataError(f"frame {self.frame_index}: return {bad[0]} beam_row "
                                f"{self.beam_row[bad[0]]} outside [0, {num_beam_rows})")


@dataclass(frozen=True)
class GridConfig:
    azimuth_bin_deg: float = 0.2
    num_beam_rows: int = 80
    azimuth_min_deg: float = -60.0
    azimuth_max_deg: float = 60.0

    def __post_init__(self):
        if self.azimuth_bin_deg <= 0:
            raise ValueError("azimuth_bin_deg must be positive")
        if self.num_beam_rows < 1:
            raise ValueError("num_beam_rows must be at least 1")
        if self.azimuth_max_deg <= self.azimuth_min_deg:
            raise ValueError("azimuth_max_deg must exceed azimuth_min_deg")

    @property
    def num_cols(self) -> int:
        return int(round((self.azimuth_max_deg - self.azimuth_min_deg) / self.azimuth_bin_deg))

    @property
    def shape(self) -> tuple[int, int]:
        return self.num_beam_rows, self.num_cols

    def columns(self, azimuth: np.ndarray) -> np.ndarray:
        """Azimuth column of each angle (radians); -1 where outside the span."""
        az_deg = np.degrees(np.asarray(azimuth, dtype=float))
        col = np.floor((az_deg - self.azimuth_min_deg) / self.azimuth_bin_deg).astype(np.int64)
        col[(col < 0) | (col >= self.num_cols)] = -1
        return col

    def flat_bins(self, azimuth: np.ndarray, beam_row: np.ndarray) -> np.ndarray:
        """Row-major bin id per return; -1 for returns outside the grid."""
        col = self.columns(azimuth)
        row = np.asarray(beam_row, dtype=np.int64)
        valid = (col >= 0) & (row >= 0) & (row < self.num_beam_rows)
        return np.where(valid, row * self.num_cols + col, -1)


def to_spherical(q) -> tuple[float, float, float]:
    """Return ``(range, azimuth, elevation)`` of a sensor-frame point."""
    x, y, z = (float(c) for c in np.asarray(q, dtype=float).reshape(3))
    rng = math.sqrt(x * x + y * y + z * z)
    if not rng > 0.0 or not math.isfinite(rng):
        raise InvalidPointError(f"cannot take spherical coordinates of point {(x, y, z)}")
    return rng, math.atan2(y, x), math.atan2(z, math.hypot(x, y))


def spherical_coordinates(points: np.ndarray):
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    horiz = np.hypot(x, y)
    rng = np.hypot(horiz, z)
    if rng.size and not np.all(rng > 0.0):
        i = int(np.flatnonzero(~(rng > 0.0))[0])
        raise InvalidPointError(f"return {i} has zero-norm point")
    return rng, np.arctan2(y, x), np.arctan2(z, horiz)


def downsample_indices(frame: LidarFrame, grid: GridConfig) -> np.ndarray:
    """Indices of the returns kept by :func:`downsample`, in timestamp order."""
    n = len(frame)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    ts = frame.timestamps
    if np.all(ts[1:] >= ts[:-1]):
        order = np.arange(n)
    else:
        order = np.argsort(ts, kind="stable")
    bins = grid.flat_bins(frame.azimuth, frame.beam_row)[order]
    nbins = grid.num_beam_rows * grid.num_cols
    first = np.full(nbins + 1, n, dtype=np.int64)
    # out-of-grid returns land in the spare slot and are discarded
    np.minimum.at(first, np.where(bins < 0, nbins, bins), np.arange(n))
    ranks = first[:nbins]
    ranks = np.sort(ranks[ranks < n])
    return order[ranks]


def downsample(frame: LidarFrame, grid: GridConfig) -> LidarFrame:
    """Keep the earliest return in every (beam row, azimuth column) bin."""
    return frame.subset(downsample_indices(frame, grid))


def _parse_records(path: Path, data: np.ndarray, first_record: int = 0) -> None:
    finite = np.all(np.isfinite(data), axis=1)
    if not np.all(finite):
        i = int(np.flatnonzero(~finite)[0])
        raise ParseError(path, i + first_record, "non-finite value")
    rows = data[:, 5]
    bad = np.flatnonzero(rows != np.round(rows))
    if bad.size:
        raise ParseError(path, int(bad[0]) + first_record, "beam_row is not integer-valued")
    norms = np.linalg.norm(data[:, 1:4], axis=1)
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        raise ParseError(path, int(bad[0]) + first_record, "zero-norm point")


def read_frame_records(path) -> np.ndarray:
    """Raw ``(N, 6)`` record array of a ``.bin`` or ``.csv`` frame file."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        records = []
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                return np.zeros((0, 6))
            for lineno, line in enumerate(reader, start=1):
                if len(line) != 6:
                    raise ParseError(path, lineno, f"expected 6 columns, got {len(line)}")
                try:
                    records.append([float(v) for v in line])
                except ValueError as exc:
                    raise ParseError(path, lineno, str(exc)) from None
        data = np.array(records, dtype=float).reshape(-1, 6)
        _parse_records(path, data, first_record=1)
        return data
    raw = np.fromfile(path, dtype="<f8")
    if raw.size % 6:
        raise ParseError(path, raw.size // 6, "truncated record")
    data = raw.reshape(-1, 6)
    _parse_records(path, data)
    return data


def load_frame(path, frame_index: int, start_time: float | None = None,
               end_time: float | None = None, num_beam_rows: int | None = None,
               doppler_sign: float = 1.0) -> LidarFrame:
    """Load one frame file.

    Frame bounds normally come from the sequence index; when omitted they are
    taken from the record timestamps.  ``doppler_sign`` converts a sensor whose
    convention is positive-approaching into the positive-receding convention.
    """
    data = read_frame_records(path)
    ts = data[:, 0]
    bounded = start_time is not None and end_time is not None
    if start_time is None:
        start_time = float(ts.min()) if ts.size else 0.0
    if end_time is None:
        end_time = float(ts.max()) if ts.size else start_time
    frame = LidarFrame(frame_index, float(start_time), float(end_time), ts, data[:, 1:4],
                       doppler_sign * data[:, 4], data[:, 5].astype(np.int64))
    if bounded:
        frame.validate(num_beam_rows)
    elif num_beam_rows is not None and ts.size:
        bad = np.flatnonzero((frame.beam_row < 0) | (frame.beam_row >= num_beam_rows))
        if bad.size:
            raise ParseError(path, int(bad[0]), f"beam_row outside [0, {num_beam_rows})")
    return frame


def write_frame(frame: LidarFrame, path, doppler_sign: float = 1.0) -> None:
    path = Path(path)
    data = np.column_stack([frame.timestamps, frame.points, doppler_sign * frame.doppler,
                            frame.beam_row.astype(float)])
    if path.suffix.lower() == ".csv":
        with path.open("w", newline="") as fh:
            fh.write(",".join(FRAME_COLUMNS) + "\n")
            np.savetxt(fh, data, delimiter=",", fmt="%.17g")
    else:
        data.astype("<f8").tofile(path)


def write_frame_index(path, frames) -> None:
    with Path(path).open("w", newline="") as fh:
        fh.write("frame_index,start_time,end_time\n")
        for f in frames:
            fh.write(f"{f[0]:d},{f[1]:.17g},{f[2]:.17g}\n")


def read_frame_index(path) -> list[tuple[int, float, float]]:
    out = []
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for lineno, line in enumerate(reader, start=1):
            try:
                out.append((int(line[0]), float(line[1]), float(line[2])))
            except (ValueError, IndexError):
                raise ParseError(path, lineno, "expected frame_index,start_time,end_time") from None
    return out
