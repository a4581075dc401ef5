"""Velocity-to-pose integration and the stationary clamp."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError
from .estimator import KnotTrajectory
from .lie import RigidTransform, exp_se3_batch, project_to_so3

REORTHONORMALIZE_EVERY = 1000


@dataclass(frozen=True)
class IntegratorConfig:
    steps: int = 100
    stationary_threshold: float = 0.03

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("integrator needs at least one step per interval")
        if self.stationary_threshold < 0:
            raise ValueError("stationary threshold must be non-negative")


@dataclass
class Trajectory:
    """World-from-vehicle poses, ``poses[i]`` a 4x4 matrix at ``times[i]``."""

    times: np.ndarray
    poses: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.poses = np.asarray(self.poses, dtype=float).reshape(-1, 4, 4)
        if self.times.size != self.poses.shape[0]:
            raise ValueError("one pose per timestamp is required")

    def __len__(self) -> int:
        return self.times.size

    @property
    def positions(self) -> np.ndarray:
        return self.poses[:, :3, 3]


def chain_product(mats: np.ndarray) -> np.ndarray:
    """Ordered product ``mats[0] @ mats[1] @ ... @ mats[-1]`` by pairwise reduction."""
    mats = np.asarray(mats, dtype=float)
    if mats.shape[0] == 0:
        return np.eye(mats.shape[-1])
    while mats.shape[0] > 1:
        if mats.shape[0] % 2:
            mats = np.concatenate([mats, np.eye(mats.shape[-1])[None]], axis=0)
        mats = mats[0::2] @ mats[1::2]
    return mats[0]


def integrate_interval(w_start, w_end, dt: float, steps: int = 100) -> RigidTransform:
    """Relative transform ``T_{k,k-1}`` over one interval.

    The velocity is sampled at the end of each of ``steps`` sub-intervals and
    the sub-step exponentials are chained with the latest on the left.
    """
    if not dt > 0:
        raise ValueError("interval length must be positive")
    w_start = np.asarray(w_start, dtype=float).reshape(6)
    w_end = np.asarray(w_end, dtype=float).reshape(6)
    h = dt / steps
    alpha = np.arange(steps, 0, -1) / steps
    twists = (1.0 - alpha)[:, None] * w_start + alpha[:, None] * w_end
    return RigidTransform.from_matrix(chain_product(exp_se3_batch(h * twists)))


def clamp_stationary(knots: KnotTrajectory, threshold: float = 0.03) -> KnotTrajectory:
    """Zero every knot whose forward speed magnitude is strictly below ``threshold``."""
    v = knots.velocities.copy()
    v[np.abs(v[:, 0]) < threshold] = 0.0
    return KnotTrajectory(knots.times.copy(), v)


def accumulate(times, relative, start_pose=None) -> Trajectory:
    """Compose relative motions onto a running world-from-vehicle pose.

    ``relative[k]`` is the pose of the vehicle at ``times[k + 1]`` expressed in
    the vehicle frame at ``times[k]``.
    """
    start = np.eye(4) if start_pose is None else np.asarray(start_pose, dtype=float)
    relative = list(relative)
    poses = np.empty((len(relative) + 1, 4, 4))
    poses[0] = start
    cur = start.copy()
    for k, rel in enumerate(relative, start=1):
        m = rel.matrix() if isinstance(rel, RigidTransform) else np.asarray(rel, dtype=float)
        cur = cur @ m
        if k % REORTHONORMALIZE_EVERY == 0:
            cur[:3, :3] = project_to_so3(cur[:3, :3])
        poses[k] = cur
    return Trajectory(times, poses)


def integrate_knots(knots: KnotTrajectory, cfg: IntegratorConfig = IntegratorConfig(),
                    clamp: bool = True, start_pose=None) -> Trajectory:
    """World-from-vehicle pose at every knot time."""
    if clamp:
        knots = clamp_stationary(knots, cfg.stationary_threshold)
    v, t = knots.velocities, knots.times
    rel = [integrate_interval(v[k], v[k + 1], t[k + 1] - t[k], cfg.steps).inverse()
           for k in range(len(knots) - 1)]
    return accumulate(t, rel, start_pose)


def format_pose_line(t: float, pose: np.ndarray) -> str:
    vals = pose[:3, :4].reshape(-1)
    return f"{t:.9f} " + " ".join(f"{x:.12e}" for x in vals)


def write_trajectory(traj: Trajectory, path) -> None:
    with Path(path).open("w") as fh:
        for t, p in zip(traj.times, traj.poses):
            fh.write(format_pose_line(t, p) + "\n")


def read_trajectory(path) -> Trajectory:
    times, poses = [], []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                vals = [float(x) for x in line.split()]
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
            if len(vals) != 13:
                raise ParseError(path, lineno, f"expected 13 values, got {len(vals)}")
            m = np.eye(4)
            m[:3, :4] = np.reshape(vals[1:], (3, 4))
            times.append(vals[0])
            poses.append(m)
    return Trajectory(np.array(times), np.array(poses).reshape(-1, 4, 4))
