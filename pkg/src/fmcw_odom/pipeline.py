"""End-to-end odometry: preprocess, bias-correct, RANSAC, estimate, integrate."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .bias import BiasModel, frame_bias, load_bias_model
from .config import PipelineConfig
from .errors import DataError, OdomError
from .estimator import (FilterState, IntervalFactors, KnotTrajectory, assemble_batch,
                        filter_step, initial_filter_state, solve_batch)
from .integrator import (REORTHONORMALIZE_EVERY, Trajectory, clamp_stationary, format_pose_line,
                         integrate_interval, integrate_knots)
from .lie import project_to_so3
from .measurement import Extrinsics, GyroData, doppler_rows, gyro_rows, read_gyro_csv
from .metrics import STAGES
from .pointcloud import FRAME_PATTERN, LidarFrame, downsample_indices, load_frame, read_frame_index
from .ransac import run as run_ransac

log = logging.getLogger(__name__)


@dataclass
class FrameCounters:
    frame_index: int
    returns_in: int = 0
    returns_out: int = 0
    inliers: int = 0
    uncorrected_bias: int = 0
    gyro_samples: int = 0
    low_confidence: bool = False
    gyro_gap: bool = False

    HEADER = ("frame_index,returns_in,returns_out,inliers,uncorrected_bias,"
              "gyro_samples,low_confidence,gyro_gap")

    def csv_line(self) -> str:
        return (f"{self.frame_index},{self.returns_in},{self.returns_out},{self.inliers},"
                f"{self.uncorrected_bias},{self.gyro_samples},{int(self.low_confidence)},"
                f"{int(self.gyro_gap)}")


@dataclass
class Prepared:
    """A downsampled frame with its Doppler rows and bias-corrected measurements."""

    frame: LidarFrame
    kept: np.ndarray
    rows: np.ndarray
    bias: np.ndarray
    counters: FrameCounters


@dataclass
class FrameResult:
    time: float
    velocity: np.ndarray
    pose: np.ndarray
    counters: FrameCounters
    inlier_indices: np.ndarray = field(repr=False, default=None)


class Odometry:
    """Stateful per-frame pipeline shared by the filter, the batch solver and the bench."""

    def __init__(self, cfg: PipelineConfig, bias_model: BiasModel | None = None,
                 gyro: GyroData | None = None):
        self.cfg = cfg
        self.grid = cfg.grid()
        self.noise = cfg.noise()
        self.ransac_cfg = cfg.ransac()
        self.integ = cfg.integrator()
        self.lidar = cfg.lidar_extrinsics()
        self.gyro_ext: Extrinsics = cfg.gyro_extrinsics()
        self.gyro_rows = gyro_rows(self.gyro_ext)
        self.gyro_bias = np.asarray(cfg.gyro_bias, dtype=float)
        self.bias_model = bias_model
        self.gyro = gyro if cfg.use_gyro else None
        self.gyro_gaps = 0
        self.low_confidence_frames = 0
        self._first = self._last = True

    # -- stages -----------------------------------------------------------
    def preprocess(self, frame: LidarFrame) -> Prepared:
        kept = downsample_indices(frame, self.grid)
        ds = frame.subset(kept)
        counters = FrameCounters(frame.frame_index, len(frame), len(ds))
        rows = doppler_rows(ds.points, self.lidar, ds.range)
        bias = None
        if self.bias_model is not None:
            bias, corrected = frame_bias(self.bias_model, ds, self.grid)
            counters.uncorrected_bias = int(len(ds) - np.count_nonzero(corrected))
        else:
            counters.uncorrected_bias = len(ds)
        return Prepared(ds, kept, rows, bias, counters)

    def reject_outliers(self, prep: Prepared):
        res = run_ransac(prep.frame, self.lidar, self.ransac_cfg, bias=prep.bias, rows=prep.rows)
        prep.counters.inliers = res.inlier_count
        prep.counters.low_confidence = res.low_confidence
        if res.low_confidence:
            self.low_confidence_frames += 1
            log.warning("frame %d: RANSAC found no usable hypothesis", prep.frame.frame_index)
        return prep, res.mask

    def interval_factors(self, prep: Prepared, mask: np.ndarray, t0: float, t1: float) -> IntervalFactors:
        """Doppler inliers plus gyro samples of one interval.

        An interval without gyro coverage contributes nothing (prediction only).
        """
        factors = IntervalFactors.empty(t0, t1)
        counters = prep.counters
        gyro_t, gyro_y = self._gyro_window(t0, t1)
        counters.gyro_samples = gyro_t.size
        if self.gyro is not None and gyro_t.size == 0:
            counters.gyro_gap = True
            self.gyro_gaps += 1
            log.warning("frame %d: no gyro samples in [%.6f, %.6f]; prediction-only interval",
                        counters.frame_index, t0, t1)
            return factors
        tol = self.cfg.time_tolerance_s
        ds = prep.frame
        y = ds.doppler if prep.bias is None else ds.doppler - prep.bias
        factors.add(ds.timestamps[mask], prep.rows[mask], y[mask], self.noise.r_dop, tol)
        if gyro_t.size:
            rows = np.broadcast_to(self.gyro_rows, (gyro_t.size, 3, 6))
            factors.add(gyro_t, rows, gyro_y - self.gyro_bias, self.noise.r_gyro,
                        self.cfg.gyro_gap_tolerance_s)
        return factors

    def _gyro_window(self, t0: float, t1: float):
        if self.gyro is None:
            return np.zeros(0), np.zeros((0, 3))
        ts = self.gyro.timestamps
        tol = self.cfg.gyro_gap_tolerance_s
        # half-open [t0, t1) so a sample on a shared knot is used once; the
        # first and last intervals also absorb samples within ``tol`` outside
        lo_t = t0 - tol if self._first else t0
        hi_side = "right" if self._last else "left"
        hi_t = t1 + tol if self._last else t1
        lo = np.searchsorted(ts, lo_t, side="left")
        hi = np.searchsorted(ts, hi_t, side=hi_side)
        return np.clip(ts[lo:hi], t0, t1), self.gyro.rates[lo:hi]

    def set_interval_position(self, first: bool, last: bool) -> None:
        self._first, self._last = first, last


def frame_knot_times(bounds: list[tuple[int, float, float]], tol: float) -> np.ndarray:
    """Knots at frame boundaries; consecutive frames must abut."""
    if not bounds:
        raise DataError("sequence has no frames")
    times = [bounds[0][1]]
    for k, (idx, start, end) in enumerate(bounds):
        if not end > start:
            raise DataError(f"frame {idx}: end time {end} not after start time {start}")
        if k and abs(start - times[-1]) > tol:
            raise DataError(f"frame {idx}: starts at {start}, previous frame ended at {times[-1]}")
        times.append(end)
    return np.array(times)


class FilterRunner:
    """Online filter: one marginalising step per frame, poses streamed as produced."""

    def __init__(self, odo: Odometry, t0: float):
        self.odo = odo
        self.state: FilterState = initial_filter_state(t0, odo.noise, odo.cfg.initial_prior_info)
        self.pose = np.eye(4)
        self.steps = 0

    def step(self, prep: Prepared, mask: np.ndarray, t1: float) -> FilterState:
        factors = self.odo.interval_factors(prep, mask, self.state.time, t1)
        self.state = filter_step(self.state, t1, self.odo.noise, factors)
        self.prev_velocity = self.state.lag_mean
        return self.state

    def integrate(self, t0: float) -> np.ndarray:
        v = KnotTrajectory([t0, self.state.time], [self.prev_velocity, self.state.mean])
        if self.odo.cfg.stationary_clamp:
            v = clamp_stationary(v, self.odo.integ.stationary_threshold)
        rel = integrate_interval(v.velocities[0], v.velocities[1], self.state.time - t0, self.odo.integ.steps)
        self.pose = self.pose @ rel.inverse().matrix()
        self.steps += 1
        if self.steps % REORTHONORMALIZE_EVERY == 0:
            self.pose[:3, :3] = project_to_so3(self.pose[:3, :3])
        return self.pose


class StageClock:
    """Accumulated wall-clock seconds per pipeline stage."""

    def __init__(self):
        self.seconds = dict.fromkeys(STAGES, 0.0)
        self._t = 0.0

    def start(self) -> None:
        self._t = time.perf_counter()

    def lap(self, stage: str) -> None:
        now = time.perf_counter()
        self.seconds[stage] += now - self._t
        self._t = now


def run_filter(frames: Iterable[LidarFrame], knot_times: np.ndarray, odo: Odometry,
               clock: StageClock | None = None) -> Iterator[FrameResult]:
    """Process frames strictly in order; yields one result per knot (the first is the start)."""
    clock = clock or StageClock()
    runner = FilterRunner(odo, knot_times[0])
    yield FrameResult(float(knot_times[0]), runner.state.mean.copy(), runner.pose.copy(),
                      FrameCounters(-1))
    n = knot_times.size - 1
    for k, frame in enumerate(frames):
        odo.set_interval_position(k == 0, k == n - 1)
        t0, t1 = knot_times[k], knot_times[k + 1]
        clock.start()
        prep = odo.preprocess(frame)
        clock.lap("preprocess")
        prep, mask = odo.reject_outliers(prep)
        clock.lap("ransac")
        runner.step(prep, mask, t1)
        clock.lap("solve")
        pose = runner.integrate(t0)
        clock.lap("integrate")
        yield FrameResult(float(t1), runner.state.mean.copy(), pose.copy(), prep.counters,
                          prep.kept[mask])


def run_batch(frames: Iterable[LidarFrame], knot_times: np.ndarray, odo: Odometry,
              on_frame=None, clock: StageClock | None = None
              ) -> tuple[KnotTrajectory, Trajectory, list[FrameCounters]]:
    """Accumulate every interval's factors, solve once, then integrate."""
    clock = clock or StageClock()
    intervals, counters = [], []
    n = knot_times.size - 1
    for k, frame in enumerate(frames):
        odo.set_interval_position(k == 0, k == n - 1)
        clock.start()
        prep = odo.preprocess(frame)
        clock.lap("preprocess")
        prep, mask = odo.reject_outliers(prep)
        clock.lap("ransac")
        intervals.append(odo.interval_factors(prep, mask, knot_times[k], knot_times[k + 1]))
        clock.lap("solve")
        counters.append(prep.counters)
        if on_frame is not None:
            on_frame(prep, mask)
    clock.start()
    system = assemble_batch(knot_times, intervals, odo.noise, odo.cfg.initial_prior_info)
    knots = solve_batch(system)
    clock.lap("solve")
    traj = integrate_knots(knots, odo.integ, clamp=odo.cfg.stationary_clamp)
    clock.lap("integrate")
    return knots, traj, counters


# -- sequence I/O -------------------------------------------------------------

@dataclass
class SequenceInputs:
    root: Path
    bounds: list[tuple[int, float, float]]
    gyro: GyroData | None

    def frame_path(self, index: int) -> Path:
        return self.root / "frames" / FRAME_PATTERN.format(index)

    def frames(self, cfg: PipelineConfig) -> Iterator[LidarFrame]:
        for idx, start, end in self.bounds:
            path = self.frame_path(idx)
            try:
                yield load_frame(path, idx, start, end, cfg.num_beam_rows, cfg.doppler_sign)
            except (OdomError, OSError) as exc:
                raise DataError(f"frame {idx}: {exc}") from exc


def open_sequence(root, use_gyro: bool = True) -> SequenceInputs:
    root = Path(root)
    index = root / "frames.csv"
    if not index.exists():
        raise DataError(f"{root}: missing frames.csv")
    bounds = read_frame_index(index)
    gyro = None
    if use_gyro:
        gpath = root / "gyro.csv"
        if not gpath.exists():
            raise DataError(f"{root}: missing gyro.csv")
        gyro = read_gyro_csv(gpath)
    return SequenceInputs(root, bounds, gyro)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


@dataclass
class RunManifest:
    config: dict
    inputs: dict
    outputs: dict
    totals: dict
    timings_ms: dict

    def write(self, path) -> None:
        _atomic_write(Path(path), json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")


def run_odometry(cfg: PipelineConfig, write_masks: bool = True) -> tuple[Path, RunManifest]:
    """Run on ``cfg.sequence_dir`` and write results into ``cfg.output_dir``.

    Outputs: ``trajectory.txt`` (timestamp + 3x4 pose per knot),
    ``velocities.csv``, ``frames_report.csv``, ``masks/`` (indices of the
    inlier returns per frame) and ``manifest.json``.
    """
    if cfg.sequence_dir is None:
        raise DataError("no sequence_dir configured")
    seq = open_sequence(cfg.sequence_dir, cfg.use_gyro)
    knot_times = frame_knot_times(seq.bounds, cfg.time_tolerance_s)
    bias_model = load_bias_model(cfg.bias_model_path, cfg.grid().shape) if cfg.bias_model_path else None
    odo = Odometry(cfg, bias_model, seq.gyro)

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    masks_dir = out / "masks"
    if write_masks:
        masks_dir.mkdir(exist_ok=True)
    traj_path = out / "trajectory.txt"
    vel_path = out / "velocities.csv"
    report_path = out / "frames_report.csv"
    totals = {"frames": 0, "returns_in": 0, "returns_out": 0, "inliers": 0,
              "uncorrected_bias": 0, "gyro_gaps": 0, "low_confidence": 0}

    def tally(c: FrameCounters, fh) -> None:
        fh.write(c.csv_line() + "\n")
        totals["frames"] += 1
        for key in ("returns_in", "returns_out", "inliers", "uncorrected_bias"):
            totals[key] += getattr(c, key)

    t_start = time.perf_counter()
    clock = StageClock()
    tmp_traj = traj_path.with_name(traj_path.name + ".tmp")
    tmp_vel = vel_path.with_name(vel_path.name + ".tmp")
    with tmp_traj.open("w") as ft, tmp_vel.open("w") as fv, report_path.open("w") as fr:
        fv.write("timestamp_s,nu_x,nu_y,nu_z,omega_x,omega_y,omega_z\n")
        fr.write(FrameCounters.HEADER + "\n")
        if cfg.mode == "filter":
            for res in run_filter(seq.frames(cfg), knot_times, odo, clock):
                ft.write(format_pose_line(res.time, res.pose) + "\n")
                fv.write(_velocity_line(res.time, res.velocity))
                if res.counters.frame_index >= 0:
                    tally(res.counters, fr)
                    if write_masks:
                        np.save(masks_dir / f"frame_{res.counters.frame_index:06d}.npy",
                                res.inlier_indices)
        else:
            def save_mask(prep, mask):
                if write_masks:
                    np.save(masks_dir / f"frame_{prep.frame.frame_index:06d}.npy", prep.kept[mask])

            knots, traj, counters = run_batch(seq.frames(cfg), knot_times, odo, save_mask, clock)
            for t, p in zip(traj.times, traj.poses):
                ft.write(format_pose_line(t, p) + "\n")
            for t, v in zip(knots.times, knots.velocities):
                fv.write(_velocity_line(t, v))
            for c in counters:
                tally(c, fr)
    os.replace(tmp_traj, traj_path)
    os.replace(tmp_vel, vel_path)
    elapsed = time.perf_counter() - t_start
    totals["gyro_gaps"] = odo.gyro_gaps
    totals["low_confidence"] = odo.low_confidence_frames

    inputs = {"frames.csv": _sha256(seq.root / "frames.csv")}
    if cfg.use_gyro:
        inputs["gyro.csv"] = _sha256(seq.root / "gyro.csv")
    frames_digest = hashlib.sha256()
    for idx, _, _ in seq.bounds:
        frames_digest.update(_sha256(seq.frame_path(idx)).encode())
    inputs["frames"] = frames_digest.hexdigest()
    if cfg.bias_model_path:
        inputs["bias_model"] = _sha256(Path(cfg.bias_model_path))
    # per-frame counters stream to frames_report.csv; the manifest pins its digest
    outputs = {"trajectory": str(traj_path), "velocities": str(vel_path),
               "frames_report": str(report_path), "frames_report_sha256": _sha256(report_path)}
    if write_masks:
        outputs["masks"] = str(masks_dir)
    timings = {name: 1e3 * sec for name, sec in clock.seconds.items()}
    timings["total"] = 1e3 * elapsed
    timings["per_frame"] = 1e3 * elapsed / max(totals["frames"], 1)
    manifest = RunManifest(cfg.snapshot(), inputs, outputs, totals, timings)
    manifest.write(out / "manifest.json")
    return traj_path, manifest


def _velocity_line(t: float, v: np.ndarray) -> str:
    return f"{t:.9f}," + ",".join(f"{x:.12e}" for x in v) + "\n"


def bench_stages(cfg: PipelineConfig, t0: float, frame_period: float,
                 bias_model: BiasModel | None = None, gyro: GyroData | None = None) -> dict:
    """Stage callables for :func:`fmcw_odom.metrics.timing_harness`.

    The first stage takes a raw ``(frame_index, records)`` pair so that the
    spherical-coordinate conversion is timed as part of preprocessing.
    """
    odo = Odometry(cfg, bias_model, gyro)
    runner = FilterRunner(odo, t0)

    def preprocess(item):
        idx, records = item
        start = t0 + idx * frame_period
        frame = LidarFrame(idx, start, start + frame_period, records[:, 0], records[:, 1:4],
                           cfg.doppler_sign * records[:, 4], records[:, 5])
        return odo.preprocess(frame)

    def ransac(prep):
        return odo.reject_outliers(prep)

    def solve(item):
        prep, mask = item
        start = prep.frame.start_time
        odo.set_interval_position(False, False)
        runner.step(prep, mask, prep.frame.end_time)
        return start

    def integrate(start):
        return runner.integrate(start)

    stages = dict(zip(STAGES, (preprocess, ransac, solve, integrate)))
    return stages
