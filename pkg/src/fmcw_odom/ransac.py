"""Per-frame RANSAC over Doppler returns with a forward-speed / yaw-rate hypothesis."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .measurement import Extrinsics, doppler_row, doppler_rows
from .pointcloud import LidarFrame

DEGENERATE_DET = 1e-9
FORWARD, YAW = 0, 5


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 20
    threshold: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("RANSAC needs at least one iteration")
        if not self.threshold > 0:
            raise ValueError("RANSAC inlier threshold must be positive")


@dataclass
class RansacResult:
    mask: np.ndarray
    v: float
    omega_z: float
    inlier_count: int
    low_confidence: bool = False

    @property
    def twist(self) -> np.ndarray:
        w = np.zeros(6)
        w[FORWARD], w[YAW] = self.v, self.omega_z
        return w


def solve_2dof(a, b, extrinsics: Extrinsics, bias_a: float = 0.0, bias_b: float = 0.0):
    """Forward speed and yaw rate explaining two returns exactly, or None if degenerate."""
    ra = doppler_row(a.q, extrinsics)
    rb = doppler_row(b.q, extrinsics)
    m = np.array([[ra[FORWARD], ra[YAW]], [rb[FORWARD], rb[YAW]]])
    det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    if abs(det) < DEGENERATE_DET:
        return None
    y = np.array([a.doppler - bias_a, b.doppler - bias_b])
    v, w = np.linalg.solve(m, y)
    return float(v), float(w)


def frame_rng(cfg: RansacConfig, frame_index: int) -> np.random.Generator:
    """Independent PRNG stream per frame so results do not depend on processing order."""
    return np.random.default_rng([cfg.seed & 0xFFFFFFFFFFFFFFFF, max(int(frame_index), 0)])


def run(frame: LidarFrame, extrinsics: Extrinsics, cfg: RansacConfig = RansacConfig(),
        bias: np.ndarray | None = None, rows: np.ndarray | None = None) -> RansacResult:
    """Classify the returns of one frame as inliers of a constant 2-DOF velocity.

    ``bias`` holds the predicted Doppler bias per return (subtracted before
    scoring) and ``rows`` optionally the precomputed Doppler rows.
    """
    n = len(frame)
    if n < 2:
        return RansacResult(np.ones(n, dtype=bool), 0.0, 0.0, n, low_confidence=True)
    if rows is None:
        rows = doppler_rows(frame.points, extrinsics, frame.range)
    y = frame.doppler if bias is None else frame.doppler - bias
    a = rows[:, FORWARD]
    b = rows[:, YAW]

    rng = frame_rng(cfg, frame.frame_index)
    i = rng.integers(0, n, cfg.iterations)
    j = rng.integers(0, n - 1, cfg.iterations)
    j = j + (j >= i)

    det = a[i] * b[j] - b[i] * a[j]
    ok = np.abs(det) >= DEGENERATE_DET
    if not np.any(ok):
        return RansacResult(np.ones(n, dtype=bool), 0.0, 0.0, n, low_confidence=True)
    i, j, det = i[ok], j[ok], det[ok]
    # Cramer's rule on [[a_i, b_i], [a_j, b_j]] (v, w) = (y_i, y_j)
    v = (y[i] * b[j] - b[i] * y[j]) / det
    w = (a[i] * y[j] - y[i] * a[j]) / det

    err = np.abs(y[None, :] - v[:, None] * a[None, :] - w[:, None] * b[None, :])
    inl = err < cfg.threshold
    counts = inl.sum(axis=1)
    spread = np.where(inl, err, 0.0).sum(axis=1)
    # max count, then min sum of inlier errors, then earliest draw
    best = np.lexsort((np.arange(counts.size), spread, -counts))[0]
    mask = np.abs(y - v[best] * a - w[best] * b) < cfg.threshold
    return RansacResult(mask, float(v[best]), float(w[best]), int(mask.sum()))
