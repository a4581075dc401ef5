"""KITTI-style relative pose error and a per-stage timing harness."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import DataError
from .integrator import Trajectory

log = logging.getLogger(__name__)

SEGMENT_LENGTHS = tuple(range(100, 900, 100))
STAGES = ("preprocess", "ransac", "solve", "integrate")


@dataclass
class OdomErrorReport:
    """Translational error in percent and rotational error in degrees per 100 m."""

    lengths: list[int] = field(default_factory=list)
    trans_pct: dict[int, float] = field(default_factory=dict)
    rot_deg_per_100m: dict[int, float] = field(default_factory=dict)
    segments: dict[int, int] = field(default_factory=dict)
    mean_trans_pct: float = float("nan")
    mean_rot_deg_per_100m: float = float("nan")
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return not self.lengths


def associate(estimate: Trajectory, gt: Trajectory, max_dt: float | None = None):
    """Index pairs ``(i_est, i_gt)`` matching each groundtruth pose to the nearest
    estimate in time, kept when within ``max_dt`` (default half the median
    groundtruth period)."""
    te, tg = estimate.times, gt.times
    if te.size == 0 or tg.size == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    if max_dt is None:
        max_dt = 0.5 * float(np.median(np.diff(tg))) if tg.size > 1 else 0.0
    order = np.argsort(te, kind="stable")
    ts = te[order]
    pos = np.clip(np.searchsorted(ts, tg), 1, max(ts.size - 1, 1))
    left = np.clip(pos - 1, 0, ts.size - 1)
    right = np.clip(pos, 0, ts.size - 1)
    pick = np.where(np.abs(ts[left] - tg) <= np.abs(ts[right] - tg), left, right)
    keep = np.abs(ts[pick] - tg) <= max_dt + 1e-12
    return order[pick[keep]], np.flatnonzero(keep)


def path_distances(poses: np.ndarray) -> np.ndarray:
    steps = np.linalg.norm(np.diff(poses[:, :3, 3], axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def _inv(t: np.ndarray) -> np.ndarray:
    """Rigid inverse of one or a stack of 4x4 transforms."""
    out = np.zeros_like(t)
    r = np.swapaxes(t[..., :3, :3], -1, -2)
    out[..., :3, :3] = r
    out[..., :3, 3] = -np.einsum("...ij,...j->...i", r, t[..., :3, 3])
    out[..., 3, 3] = 1.0
    return out


def _angle_between(ra: np.ndarray, rb: np.ndarray) -> np.ndarray:
    """Angle of ``ra^T rb`` from the chordal distance ``|rb - ra|_F = 2 sqrt(2) sin(angle / 2)``.

    Accurate for tiny angles (unlike arccos of the trace) and exactly zero
    for identical inputs.
    """
    chord = np.linalg.norm(rb - ra, axis=(-2, -1)) / (2.0 * np.sqrt(2.0))
    return 2.0 * np.arcsin(np.clip(chord, 0.0, 1.0))


def kitti_errors(estimate: Trajectory, gt: Trajectory, lengths=SEGMENT_LENGTHS,
                 max_dt: float | None = None) -> OdomErrorReport:
    """Average relative errors over all start frames (stride 1) and segment lengths.

    For a start ``i`` and length ``l`` the segment ends at the first
    groundtruth pose whose path distance from ``i`` exceeds ``l``; the error
    ``E = inv(gt_i^-1 gt_j) (est_i^-1 est_j)`` is normalised by ``l``.  The
    norm of ``trans(E)`` equals the distance between the two relative
    translations, which is how it is computed.
    """
    ie, ig = associate(estimate, gt, max_dt)
    if ie.size < 2:
        log.warning("no time-aligned poses; empty error report")
        return OdomErrorReport()
    est = estimate.poses[ie]
    ref = gt.poses[ig]
    dist = path_distances(ref)
    if dist[-1] < min(lengths):
        log.warning("trajectory is %.1f m long, shorter than %d m; empty error report",
                    dist[-1], min(lengths))
        return OdomErrorReport()

    report = OdomErrorReport()
    all_t, all_r = [], []
    for length in lengths:
        starts = np.arange(dist.size)
        ends = np.searchsorted(dist, dist + length, side="right")
        ok = ends < dist.size
        if not np.any(ok):
            continue
        i, j = starts[ok], ends[ok]
        rel_gt = _inv(ref[i]) @ ref[j]
        rel_est = _inv(est[i]) @ est[j]
        t_err = np.linalg.norm(rel_est[:, :3, 3] - rel_gt[:, :3, 3], axis=1) / length
        r_err = _angle_between(rel_gt[:, :3, :3], rel_est[:, :3, :3]) / length
        report.lengths.append(int(length))
        report.trans_pct[int(length)] = 100.0 * float(np.mean(t_err))
        report.rot_deg_per_100m[int(length)] = 100.0 * float(np.degrees(np.mean(r_err)))
        report.segments[int(length)] = int(t_err.size)
        all_t.extend(t_err)
        all_r.extend(r_err)
    if all_t:
        report.mean_trans_pct = 100.0 * float(np.mean(all_t))
        report.mean_rot_deg_per_100m = 100.0 * float(np.degrees(np.mean(all_r)))
    return report


def write_error_report(report: OdomErrorReport, path) -> None:
    with Path(path).open("w") as fh:
        fh.write("length,trans_pct,rot_deg_per_100m\n")
        for length in report.lengths:
            fh.write(f"{length},{report.trans_pct[length]:.9g},{report.rot_deg_per_100m[length]:.9g}\n")
        fh.write(f"all,{report.mean_trans_pct:.9g},{report.mean_rot_deg_per_100m:.9g}\n")


@dataclass
class TimingReport:
    frames: int
    mean_ms: dict[str, float]
    p95_ms: dict[str, float]

    @property
    def total_mean_ms(self) -> float:
        return self.mean_ms["total"]

    def rows(self):
        for name in (*STAGES, "total"):
            yield name, self.mean_ms[name], self.p95_ms[name]


def timing_harness(stages: Mapping[str, Callable], frames, threads: int = 1) -> TimingReport:
    """Time each stage per frame with BLAS/OpenMP pools pinned to ``threads``.

    ``stages`` maps each name in :data:`STAGES` to a callable; the first
    receives the frame and each later one the previous stage's output.
    """
    missing = [s for s in STAGES if s not in stages]
    if missing:
        raise DataError(f"missing pipeline stages: {missing}")
    samples = {s: [] for s in (*STAGES, "total")}
    with threadpool_limits(limits=threads):
        for frame in frames:
            value = frame
            total = 0.0
            for name in STAGES:
                t0 = time.perf_counter()
                value = stages[name](value)
                dt = time.perf_counter() - t0
                samples[name].append(dt)
                total += dt
            samples["total"].append(total)
    n = len(samples["total"])
    mean = {k: (1e3 * float(np.mean(v)) if v else 0.0) for k, v in samples.items()}
    p95 = {k: (1e3 * float(np.percentile(v, 95)) if v else 0.0) for k, v in samples.items()}
    return TimingReport(n, mean, p95)


def write_timing_report(report: TimingReport, path) -> None:
    with Path(path).open("w") as fh:
        fh.write("stage,mean_ms,p95_ms\n")
        for name, m, p in report.rows():
            fh.write(f"{name},{m:.6f},{p:.6f}\n")
