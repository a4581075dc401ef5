"""Linear continuous-time MAP estimation of velocity knots.

The state is one body velocity per knot.  Between knots the velocity is
linearly interpolated (the mean of a white-noise-on-acceleration prior), so a
measurement at time ``tau`` in ``[t_k, t_k+1]`` touches only knots ``k`` and
``k + 1``.  All factors are linear in the state, so the MAP estimate is a
single solve of a block-tridiagonal system.  The marginalising filter performs
the same elimination one knot at a time.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ConfigError, DataError, NumericalError, RankDeficiencyError
from .measurement import NoiseConfig

DEFAULT_RANK_TOL = 1e-13


@dataclass
class KnotTrajectory:
    times: np.ndarray
    velocities: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.velocities = np.asarray(self.velocities, dtype=float).reshape(-1, 6)
        if self.times.size != self.velocities.shape[0]:
            raise ValueError("one velocity per knot time is required")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("knot times must be strictly increasing")

    def __len__(self) -> int:
        return self.times.size


def interval_alphas(taus, t0: float, t1: float, tol: float = 0.0) -> np.ndarray:
    """Interpolation weights of times within ``[t0, t1]``."""
    taus = np.asarray(taus, dtype=float)
    if np.any(taus < t0 - tol) or np.any(taus > t1 + tol):
        raise DataError(f"measurement time outside knot interval [{t0}, {t1}]")
    return np.clip((taus - t0) / (t1 - t0), 0.0, 1.0)


def interpolate(traj: KnotTrajectory, tau):
    """Velocity at ``tau`` by linear interpolation between the enclosing knots.

    Accepts a scalar (returns a 6-vector) or an array of times (returns
    ``(N, 6)``).
    """
    scalar = np.ndim(tau) == 0
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    t = traj.times
    if np.any(tau < t[0]) or np.any(tau > t[-1]):
        raise DataError(f"query time outside trajectory span [{t[0]}, {t[-1]}]")
    if t.size == 1:
        out = np.repeat(traj.velocities, tau.size, axis=0)
    else:
        k = np.clip(np.searchsorted(t, tau, side="right") - 1, 0, t.size - 2)
        alpha = (tau - t[k]) / (t[k + 1] - t[k])
        out = (1 - alpha)[:, None] * traj.velocities[k] + alpha[:, None] * traj.velocities[k + 1]
    return out[0] if scalar else out


def _spd_inverse(name: str, m: np.ndarray) -> np.ndarray:
    try:
        c = cho_factor(m)
    except np.linalg.LinAlgError:
        raise ConfigError(f"{name} must be positive definite") from None
    return cho_solve(c, np.eye(m.shape[0]))


def wnoa_information(dt: float, q_c: np.ndarray) -> np.ndarray:
    """Inverse of ``Q_k = dt * Q_c``."""
    if not dt > 0:
        raise ConfigError(f"knot spacing must be positive, got {dt}")
    return _spd_inverse("Q_c", np.asarray(q_c, dtype=float)) / dt


def kinematic_information(h: np.ndarray, q_z: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=float).reshape(-1, 6)
    if h.shape[0] == 0:
        return np.zeros((6, 6))
    return h.T @ _spd_inverse("Q_z", np.asarray(q_z, dtype=float)) @ h


def measurement_information(alphas, rows, offsets, covariance):
    """12x12 information and 12-vector of measurements inside one interval.

    ``rows`` is ``(m, 6)`` for scalar measurements or ``(m, d, 6)``;
    ``offsets`` the matching measured values with any bias removed;
    ``covariance`` a scalar variance or a ``d x d`` covariance shared by all
    ``m`` measurements.  Each row is split over the two knots with weights
    ``(1 - alpha, alpha)``.
    """
    rows = np.asarray(rows, dtype=float)
    alphas = np.asarray(alphas, dtype=float).reshape(-1)
    if rows.ndim == 2:
        rows = rows[:, None, :]
    m, d, _ = rows.shape
    offsets = np.asarray(offsets, dtype=float).reshape(m, d)
    cov = np.asarray(covariance, dtype=float)
    if cov.ndim == 0:
        if not (np.isfinite(cov) and cov > 0):
            raise ConfigError("measurement variance must be positive")
        white = np.eye(d) / np.sqrt(cov)
    else:
        # W = U^T U with U upper triangular whitens the residuals
        white = np.linalg.cholesky(_spd_inverse("measurement covariance", cov.reshape(d, d))).T
    rw = np.einsum("ij,mjk->mik", white, rows).reshape(m * d, 6)
    ow = (offsets @ white.T).reshape(m * d)
    a = np.repeat(alphas, d)
    jac = np.empty((m * d, 12))
    jac[:, :6] = (1.0 - a)[:, None] * rw
    jac[:, 6:] = a[:, None] * rw
    return jac.T @ jac, jac.T @ ow


@dataclass
class IntervalFactors:
    """Accumulated measurement information for the interval between two knots."""

    t_start: float
    t_end: float
    information: np.ndarray
    vector: np.ndarray
    count: int = 0

    @classmethod
    def empty(cls, t_start: float, t_end: float) -> IntervalFactors:
        return cls(t_start, t_end, np.zeros((12, 12)), np.zeros(12))

    def add(self, taus, rows, offsets, covariance, tol: float = 0.0) -> None:
        taus = np.asarray(taus, dtype=float).reshape(-1)
        if taus.size == 0:
            return
        alphas = interval_alphas(taus, self.t_start, self.t_end, tol)
        info, vec = measurement_information(alphas, rows, offsets, covariance)
        self.information += info
        self.vector += vec
        self.count += taus.size


class FactorSystem:
    """Block-tridiagonal normal equations over the stacked knot velocities.

    ``diag[k]`` holds block (k, k), ``off[k]`` block (k + 1, k); the upper
    blocks are their transposes, so symmetry holds by construction.
    """

    def __init__(self, knot_times):
        self.times = np.asarray(knot_times, dtype=float).reshape(-1)
        if self.times.size < 1:
            raise ValueError("a factor system needs at least one knot")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("knot times must be strictly increasing")
        n = self.times.size
        self.diag = np.zeros((n, 6, 6))
        self.off = np.zeros((max(n - 1, 0), 6, 6))
        self.vec = np.zeros((n, 6))

    @property
    def num_knots(self) -> int:
        return self.times.size

    def add_prior(self, k: int, information, mean=None) -> None:
        info = np.asarray(information, dtype=float)
        if info.ndim == 0:
            info = info * np.eye(6)
        self.diag[k] += info
        if mean is not None:
            self.vec[k] += info @ np.asarray(mean, dtype=float)

    def add_interval(self, k: int, information: np.ndarray, vector: np.ndarray) -> None:
        """Add a 12x12 contribution on knots (k, k + 1)."""
        self.diag[k] += information[:6, :6]
        self.diag[k + 1] += information[6:, 6:]
        self.off[k] += information[6:, :6]
        self.vec[k] += vector[:6]
        self.vec[k + 1] += vector[6:]

    def dense(self):
        n = self.num_knots
        a = np.zeros((6 * n, 6 * n))
        for k in range(n):
            a[6 * k:6 * k + 6, 6 * k:6 * k + 6] = self.diag[k]
        for k in range(n - 1):
            a[6 * k + 6:6 * k + 12, 6 * k:6 * k + 6] = self.off[k]
            a[6 * k:6 * k + 6, 6 * k + 6:6 * k + 12] = self.off[k].T
        return a, self.vec.reshape(-1).copy()

    def objective(self, velocities) -> float:
        """``0.5 x^T A x - b^T x``: the MAP cost up to an additive constant."""
        x = np.asarray(velocities, dtype=float).reshape(-1, 6)
        ax = np.einsum("kij,kj->ki", self.diag, x)
        ax[1:] += np.einsum("kij,kj->ki", self.off, x[:-1])
        ax[:-1] += np.einsum("kji,kj->ki", self.off, x[1:])
        return float(0.5 * np.sum(x * ax) - np.sum(self.vec * x))


def add_wnoa_factor(system: FactorSystem, k: int, dt: float, q_c) -> None:
    """Random-walk link between knots ``k - 1`` and ``k``."""
    if k < 1:
        raise ValueError("the WNOA factor links knot k to k - 1, so k >= 1")
    qi = wnoa_information(dt, q_c)
    system.diag[k - 1] += qi
    system.diag[k] += qi
    system.off[k - 1] -= qi


def add_kinematic_factor(system: FactorSystem, k: int, h, q_z) -> None:
    system.diag[k] += kinematic_information(h, q_z)


def add_measurement_factor(system: FactorSystem, k: int, taus, rows, offsets, covariance,
                           tol: float = 0.0) -> None:
    """Measurements at ``taus`` within interval ``[t_k, t_k+1]``.

    A measurement exactly at the final knot may be added with ``k`` equal to
    the last knot index, in which case its whole weight lands on that knot.
    """
    taus = np.asarray(taus, dtype=float).reshape(-1)
    if k == system.num_knots - 1:
        if np.any(np.abs(taus - system.times[k]) > tol):
            raise DataError("measurement time outside knot interval")
        info, vec = measurement_information(np.zeros(taus.size), rows, offsets, covariance)
        system.diag[k] += info[:6, :6]
        system.vec[k] += vec[:6]
        return
    alphas = interval_alphas(taus, system.times[k], system.times[k + 1], tol)
    info, vec = measurement_information(alphas, rows, offsets, covariance)
    system.add_interval(k, info, vec)


def _pivot_nullity(s: np.ndarray, scale: float, rank_tol: float) -> int:
    return int(np.count_nonzero(np.linalg.eigvalsh(s) <= rank_tol * scale))


def solve_batch(system: FactorSystem, rank_tol: float = DEFAULT_RANK_TOL) -> KnotTrajectory:
    """Solve the normal equations by block-tridiagonal (block Thomas) elimination.

    Raises RankDeficiencyError when the information matrix is singular to
    within ``rank_tol`` relative to its largest diagonal entry.
    """
    n = system.num_knots
    scale = max(float(np.max(np.abs(np.diagonal(system.diag, axis1=1, axis2=2)))), np.finfo(float).tiny)
    factors = []
    y = np.empty((n, 6))
    s = system.diag[0].copy()
    rhs = system.vec[0].copy()
    for k in range(n):
        if k > 0:
            lk = system.off[k - 1]
            # gain = L_{k-1} S_{k-1}^{-1}
            g = cho_solve(factors[k - 1], lk.T).T
            s = system.diag[k] - g @ lk.T
            rhs = system.vec[k] - g @ y[k - 1]
        s = 0.5 * (s + s.T)
        if _pivot_nullity(s, scale, rank_tol):
            raise RankDeficiencyError(_system_nullity(system, scale, rank_tol, s))
        try:
            factors.append(cho_factor(s))
        except np.linalg.LinAlgError:
            raise RankDeficiencyError(_system_nullity(system, scale, rank_tol, s)) from None
        y[k] = rhs
    x = np.empty((n, 6))
    x[n - 1] = cho_solve(factors[n - 1], y[n - 1])
    for k in range(n - 2, -1, -1):
        x[k] = cho_solve(factors[k], y[k] - system.off[k].T @ x[k + 1])
    return KnotTrajectory(system.times.copy(), x)


def _system_nullity(system: FactorSystem, scale: float, rank_tol: float, pivot: np.ndarray) -> int:
    if system.num_knots <= 200:
        a, _ = system.dense()
        return int(np.count_nonzero(np.linalg.eigvalsh(a) <= rank_tol * scale))
    return _pivot_nullity(pivot, scale, rank_tol)


@dataclass
class FilterState:
    """Marginal Gaussian over the latest knot, kept in information form."""

    time: float
    mean: np.ndarray
    information: np.ndarray
    # estimate of the just-marginalised knot given data up to ``time``
    lag_mean: np.ndarray | None = None

    @property
    def covariance(self) -> np.ndarray:
        return cho_solve(cho_factor(self.information), np.eye(6))


def initial_filter_state(t0: float, noise: NoiseConfig, prior_info: float = 1e-6) -> FilterState:
    """State for the first knot: weak zero-mean prior plus its kinematic factor."""
    info = prior_info * np.eye(6) + kinematic_information(noise.h_kin, noise.q_z)
    return FilterState(float(t0), np.zeros(6), info)


def filter_step(state: FilterState, t_next: float, noise: NoiseConfig,
                factors: IntervalFactors | None = None) -> FilterState:
    """Advance to the knot at ``t_next`` and marginalise the previous knot.

    Adds the WNOA link, the interval's measurement factors and the new knot's
    kinematic factor, then eliminates the old knot by Schur complement.
    """
    qi = wnoa_information(t_next - state.time, noise.q_c)
    a11 = state.information + qi
    a12 = -qi.copy()
    a22 = qi + kinematic_information(noise.h_kin, noise.q_z)
    b1 = state.information @ state.mean
    b2 = np.zeros(6)
    if factors is not None:
        if not (np.isclose(factors.t_start, state.time) and np.isclose(factors.t_end, t_next)):
            raise DataError("interval factors do not match the filter step")
        f = factors.information
        a11 = a11 + f[:6, :6]
        a12 = a12 + f[:6, 6:]
        a22 = a22 + f[6:, 6:]
        b1 = b1 + factors.vector[:6]
        b2 = b2 + factors.vector[6:]
    try:
        c11 = cho_factor(0.5 * (a11 + a11.T))
    except np.linalg.LinAlgError:
        raise NumericalError(f"marginalised block lost positive definiteness "
                             f"(cond={np.linalg.cond(a11):.3e})") from None
    info = a22 - a12.T @ cho_solve(c11, a12)
    info = 0.5 * (info + info.T)
    eta = b2 - a12.T @ cho_solve(c11, b1)
    try:
        c = cho_factor(info)
    except np.linalg.LinAlgError:
        raise NumericalError(f"filter information lost positive definiteness "
                             f"(cond={np.linalg.cond(info):.3e})") from None
    mean = cho_solve(c, eta)
    lag = cho_solve(c11, b1 - a12 @ mean)
    return FilterState(float(t_next), mean, info, lag)


def assemble_batch(knot_times, intervals, noise: NoiseConfig, prior_info: float = 1e-6) -> FactorSystem:
    """Full system: weak prior on the first knot, WNOA links, kinematic factors
    on every knot and one :class:`IntervalFactors` (or None) per interval."""
    system = FactorSystem(knot_times)
    system.add_prior(0, prior_info)
    kin = kinematic_information(noise.h_kin, noise.q_z)
    system.diag[0] += kin
    for k in range(1, system.num_knots):
        add_wnoa_factor(system, k, system.times[k] - system.times[k - 1], noise.q_c)
        system.diag[k] += kin
    for k, f in enumerate(intervals):
        if f is not None:
            system.add_interval(k, f.information, f.vector)
    return system
