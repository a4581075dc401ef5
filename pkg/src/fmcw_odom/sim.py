"""Synthetic FMCW-lidar + gyro sequences with exact groundtruth.

Velocity profiles return body velocities in the estimator convention (see
:mod:`fmcw_odom.lie`): a vehicle driving forward at speed ``v`` and turning
left at yaw rate ``r`` has ``w = (-v, 0, 0, 0, 0, -r)``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.special import jn_zeros

from .bias import BiasModel
from .errors import DataError, ParseError
from .integrator import Trajectory, chain_product, write_trajectory
from .lie import exp_se3_batch
from .measurement import Extrinsics, GyroData, doppler_rows, write_gyro_csv
from .pointcloud import FRAME_PATTERN, GridConfig, LidarFrame, write_frame, write_frame_index

GT_STEPS_PER_FRAME = 10_000


class ConstantTwist:
    def __init__(self, twist):
        self.twist = np.asarray(twist, dtype=float).reshape(6)

    def __call__(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.repeat(self.twist[None, :], t.size, axis=0)


class FigureEight:
    """Constant forward speed with heading ``a sin(2 pi t / P)``.

    With ``a`` the first zero of the Bessel function J0 the mean of
    ``cos(heading)`` over a period vanishes, so the path closes after one
    period and traces a figure eight of length ``speed * period``.
    """

    HEADING_AMPLITUDE = float(jn_zeros(0, 1)[0])

    def __init__(self, speed: float = 10.0, period: float = 100.0):
        self.speed = float(speed)
        self.period = float(period)
        self.yaw_amplitude = self.HEADING_AMPLITUDE * 2.0 * np.pi / self.period

    def __call__(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.zeros((t.size, 6))
        out[:, 0] = -self.speed
        out[:, 5] = -self.yaw_amplitude * np.cos(2.0 * np.pi * t / self.period)
        return out


class SplineProfile:
    """Shape-preserving (PCHIP) interpolation of twist waypoints.

    Flat runs of waypoints stay exactly flat, so a stop is an exact zero.
    """

    def __init__(self, times, twists):
        self.times = np.asarray(times, dtype=float).reshape(-1)
        self.twists = np.asarray(twists, dtype=float).reshape(-1, 6)
        if self.times.size < 2:
            raise DataError("a spline profile needs at least two waypoints")
        self._interp = PchipInterpolator(self.times, self.twists, axis=0, extrapolate=True)

    def __call__(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return self._interp(np.clip(t, self.times[0], self.times[-1]))

    @classmethod
    def from_csv(cls, path) -> SplineProfile:
        data = read_velocity_csv(path)
        return cls(data[:, 0], data[:, 1:])


def read_velocity_csv(path) -> np.ndarray:
    rows = []
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for lineno, line in enumerate(reader, start=1):
            try:
                vals = [float(v) for v in line]
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
            if len(vals) != 7:
                raise ParseError(path, lineno, "expected t and six twist components")
            rows.append(vals)
    return np.array(rows, dtype=float).reshape(-1, 7)


def write_velocity_csv(path, times, twists) -> None:
    with Path(path).open("w", newline="") as fh:
        fh.write("timestamp_s,nu_x,nu_y,nu_z,omega_x,omega_y,omega_z\n")
        np.savetxt(fh, np.column_stack([times, twists]), delimiter=",", fmt="%.17g")


class VelocityTable:
    """Velocity samples, linearly interpolated in time.

    Serves both as recorded groundtruth and as a piecewise-linear profile for
    :class:`Sequence`.
    """

    def __init__(self, times, twists):
        self.times = np.asarray(times, dtype=float).reshape(-1)
        self.twists = np.asarray(twists, dtype=float).reshape(-1, 6)

    @classmethod
    def from_csv(cls, path) -> VelocityTable:
        data = read_velocity_csv(path)
        return cls(data[:, 0], data[:, 1:])

    @property
    def span(self) -> tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])

    def velocity(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.column_stack([np.interp(t, self.times, self.twists[:, i]) for i in range(6)])

    __call__ = velocity


def relative_transform(profile, t0: float, t1: float, steps: int) -> np.ndarray:
    """``T_vi(t1) T_vi(t0)^-1`` by midpoint sampling of the profile."""
    h = (t1 - t0) / steps
    mids = t0 + (np.arange(steps, 0, -1) - 0.5) * h
    return chain_product(exp_se3_batch(h * profile(mids)))


class GroundTruth:
    """Closed-form velocity and high-resolution integrated pose of a profile."""

    def __init__(self, profile, knot_times, steps_per_frame: int = GT_STEPS_PER_FRAME):
        self.profile = profile
        self.knot_times = np.asarray(knot_times, dtype=float)
        self.steps_per_frame = steps_per_frame
        self._poses = None

    @property
    def span(self) -> tuple[float, float]:
        return float(self.knot_times[0]), float(self.knot_times[-1])

    def velocity(self, t) -> np.ndarray:
        return self.profile(t)

    @property
    def knot_poses(self) -> np.ndarray:
        """World-from-vehicle poses at the knot times (first pose identity)."""
        if self._poses is None:
            t = self.knot_times
            poses = np.empty((t.size, 4, 4))
            poses[0] = np.eye(4)
            for k in range(1, t.size):
                rel = relative_transform(self.profile, t[k - 1], t[k], self.steps_per_frame)
                poses[k] = poses[k - 1] @ np.linalg.inv(rel)
            self._poses = poses
        return self._poses

    def trajectory(self) -> Trajectory:
        return Trajectory(self.knot_times, self.knot_poses)

    def pose(self, t: float) -> np.ndarray:
        t0, t1 = self.span
        if not t0 <= t <= t1:
            raise DataError(f"pose query {t} outside [{t0}, {t1}]")
        k = int(np.clip(np.searchsorted(self.knot_times, t, side="right") - 1, 0, self.knot_times.size - 1))
        base = self.knot_poses[k]
        tk = self.knot_times[k]
        if t == tk:
            return base.copy()
        frame_dt = self.knot_times[min(k + 1, self.knot_times.size - 1)] - tk
        steps = max(1, int(np.ceil(self.steps_per_frame * (t - tk) / frame_dt)))
        return base @ np.linalg.inv(relative_transform(self.profile, tk, t, steps))


@dataclass
class SimConfig:
    trajectory: str = "constant"          # constant | figure_eight | spline
    twist: tuple = (-10.0, 0.0, 0.0, 0.0, 0.0, 0.05)
    speed: float = 10.0
    period: float = 100.0
    spline_path: str | None = None
    duration: float = 10.0
    frame_rate: float = 10.0
    gyro_rate: float = 100.0
    returns_per_frame: int = 20_000
    occupancy: float = 0.3
    doppler_noise: float = 0.0
    gyro_noise: float = 0.0
    outlier_fraction: float = 0.0
    outlier_offset: float = 5.0
    bias: BiasModel | None = None
    bias_b0: float = 0.0
    bias_b1: float = 0.0
    gyro_bias: tuple = (0.0, 0.0, 0.0)
    seed: int = 0
    lidar: Extrinsics = field(default_factory=lambda: Extrinsics.from_mounting(None, (1.2, 0.0, 1.8)))
    gyro: Extrinsics | None = None
    grid: GridConfig = field(default_factory=GridConfig)
    elevation_min_deg: float = -15.0
    elevation_max_deg: float = 15.0
    ground_z: float = -0.4
    structure_range: tuple = (8.0, 80.0)
    max_range: float = 150.0

    def __post_init__(self):
        if self.frame_rate <= 0 or self.gyro_rate <= 0:
            raise ValueError("rates must be positive")
        if not 0.0 <= self.outlier_fraction <= 1.0 or not 0.0 < self.occupancy <= 1.0:
            raise ValueError("fractions must lie in [0, 1]")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.trajectory not in ("constant", "figure_eight", "spline"):
            raise ValueError(f"unknown trajectory kind {self.trajectory!r}")

    @property
    def gyro_extrinsics(self) -> Extrinsics:
        return self.lidar if self.gyro is None else self.gyro

    @property
    def num_frames(self) -> int:
        return int(round(self.duration * self.frame_rate))

    def profile(self):
        if self.trajectory == "constant":
            return ConstantTwist(self.twist)
        if self.trajectory == "figure_eight":
            return FigureEight(self.speed, self.period)
        if self.spline_path is None:
            raise ValueError("spline trajectory needs spline_path")
        return SplineProfile.from_csv(self.spline_path)


@dataclass
class SimFrame:
    frame: LidarFrame
    outliers: np.ndarray


class Sequence:
    """A generated sequence; frames are synthesised lazily and deterministically."""

    def __init__(self, cfg: SimConfig, profile=None):
        self.cfg = cfg
        self.profile = cfg.profile() if profile is None else profile
        period = 1.0 / cfg.frame_rate
        self.knot_times = np.arange(cfg.num_frames + 1) * period
        self.groundtruth = GroundTruth(self.profile, self.knot_times)
        self.gyro = self._gyro()

    def __len__(self) -> int:
        return self.cfg.num_frames

    @property
    def frame_bounds(self) -> list[tuple[int, float, float]]:
        t = self.knot_times
        return [(k, float(t[k]), float(t[k + 1])) for k in range(len(self))]

    def frames(self):
        for k in range(len(self)):
            yield self.sim_frame(k).frame

    def sim_frames(self):
        for k in range(len(self)):
            yield self.sim_frame(k)

    def _gyro(self) -> GyroData:
        cfg = self.cfg
        t_end = self.knot_times[-1]
        n = int(np.floor(t_end * cfg.gyro_rate + 1e-9)) + 1
        t = np.arange(n) / cfg.gyro_rate
        rng = np.random.default_rng([cfg.seed, 0x6779726F])
        rates = self.profile(t)[:, 3:] @ cfg.gyro_extrinsics.R_sv.T
        rates = rates + np.asarray(cfg.gyro_bias, dtype=float)
        if cfg.gyro_noise > 0:
            rates = rates + cfg.gyro_noise * rng.standard_normal(rates.shape)
        return GyroData(t, rates)

    def sim_frame(self, k: int) -> SimFrame:
        cfg = self.cfg
        grid = cfg.grid
        rng = np.random.default_rng([cfg.seed, 1, k])
        t0, t1 = self.knot_times[k], self.knot_times[k + 1]
        nrows, ncols = grid.shape
        n = cfg.returns_per_frame

        occupied = np.flatnonzero(rng.random(nrows * ncols) < cfg.occupancy)
        if occupied.size == 0 or n == 0:
            empty = LidarFrame(k, t0, t1, np.zeros(0), np.zeros((0, 3)), np.zeros(0), np.zeros(0))
            return SimFrame(empty, np.zeros(0, dtype=bool))
        cells = occupied[rng.integers(0, occupied.size, n)]
        row = cells // ncols
        col = cells % ncols
        u = rng.random(n)
        az = np.radians(grid.azimuth_min_deg + (col + u) * grid.azimuth_bin_deg)
        el_step = (cfg.elevation_max_deg - cfg.elevation_min_deg) / nrows
        el = np.radians(cfg.elevation_min_deg + (row + 0.5 + 0.4 * (rng.random(n) - 0.5)) * el_step)
        # the sensor sweeps in azimuth over the frame period
        ts = t0 + (t1 - t0) * (col + u) / ncols
        order = np.argsort(ts, kind="stable")
        row, col, az, el, ts = row[order], col[order], az[order], el[order], ts[order]

        d_s = np.column_stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        rng_m = self._ranges(d_s, col, rng)
        pts = d_s * rng_m[:, None]

        rows6 = doppler_rows(pts, cfg.lidar, rng_m)
        w = self.profile(ts)
        dop = np.einsum("ij,ij->i", rows6, w)
        dop += cfg.bias_b0 + cfg.bias_b1 * rng_m
        if cfg.bias is not None:
            # bin by the stored coordinates so injection and calibration agree
            col_pts = np.maximum(grid.columns(np.arctan2(pts[:, 1], pts[:, 0])), 0)
            extra, _ = cfg.bias.predict(row, col_pts, rng_m)
            dop += extra
        if cfg.doppler_noise > 0:
            dop += cfg.doppler_noise * rng.standard_normal(n)
        outliers = rng.random(n) < cfg.outlier_fraction
        dop[outliers] += cfg.outlier_offset
        frame = LidarFrame(k, t0, t1, ts, pts, dop, row)
        return SimFrame(frame, outliers)

    def _ranges(self, d_s: np.ndarray, col: np.ndarray, rng) -> np.ndarray:
        cfg = self.cfg
        lo, hi = cfg.structure_range
        walls = lo + (hi - lo) * rng.random(cfg.grid.num_cols)
        d_v = d_s @ cfg.lidar.R_sv  # rows are R_vs d_s
        height = cfg.lidar.r_v[2] - cfg.ground_z
        down = d_v[:, 2] < -np.sin(np.radians(1.0))
        rng_m = walls[col]
        if height > 0:
            ground = height / np.maximum(-d_v[:, 2], 1e-9)
            rng_m = np.where(down, np.minimum(ground, rng_m), rng_m)
        return np.clip(rng_m, 0.5, cfg.max_range)


def generate(cfg: SimConfig, out_dir=None):
    """Build a sequence; when ``out_dir`` is given it is also written to disk.

    Returns ``(sequence, groundtruth)``.
    """
    seq = Sequence(cfg)
    if out_dir is not None:
        write_sequence(seq, out_dir)
    return seq, seq.groundtruth


def write_sequence(seq: Sequence, out_dir) -> None:
    """Layout: ``frames/frame_%06d.bin``, ``frames.csv``, ``labels/frame_%06d.npy``,
    ``gyro.csv``, ``groundtruth_velocity.csv`` and ``groundtruth_poses.txt``."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(exist_ok=True)
    for sf in seq.sim_frames():
        k = sf.frame.frame_index
        write_frame(sf.frame, out / "frames" / FRAME_PATTERN.format(k))
        np.save(out / "labels" / f"frame_{k:06d}.npy", sf.outliers)
    write_frame_index(out / "frames.csv", seq.frame_bounds)
    write_gyro_csv(out / "gyro.csv", seq.gyro)
    t0, t1 = seq.groundtruth.span
    tv = np.linspace(t0, t1, int(round((t1 - t0) * 1000)) + 1)
    write_velocity_csv(out / "groundtruth_velocity.csv", tv, seq.profile(tv))
    write_trajectory(seq.groundtruth.trajectory(), out / "groundtruth_poses.txt")


def with_overrides(cfg: SimConfig, **kw) -> SimConfig:
    return replace(cfg, **kw)
