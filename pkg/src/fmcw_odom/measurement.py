"""Doppler and gyroscope error models and their linear factor contributions."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InvalidPointError, ParseError
from .lie import RigidTransform, adjoint

# Twist components penalised by the kinematic factor: lateral, vertical, roll, pitch.
KINEMATIC_COMPONENTS = (1, 2, 3, 4)


@dataclass(frozen=True)
class Extrinsics:
    """Sensor mounting on the vehicle.

    ``T_sv`` maps vehicle-frame coordinates into the sensor frame, so
    ``Ad_sv = adjoint(T_sv)`` carries vehicle twists into sensor twists.
    ``r_v`` is the sensor origin expressed in the vehicle frame.
    """

    T_sv: RigidTransform
    Ad_sv: np.ndarray = field(repr=False)
    R_sv: np.ndarray = field(repr=False)
    r_v: np.ndarray

    @classmethod
    def from_transform(cls, T_sv: RigidTransform) -> Extrinsics:
        if not T_sv.is_valid():
            raise ConfigError("extrinsic rotation is not orthonormal")
        r_v = -T_sv.rotation.T @ T_sv.translation
        return cls(T_sv, adjoint(T_sv), T_sv.rotation.copy(), r_v)

    @classmethod
    def from_mounting(cls, rotation_vs=None, position=(0.0, 0.0, 0.0)) -> Extrinsics:
        """Build from the sensor orientation ``R_vs`` and position in the vehicle frame."""
        r_vs = np.eye(3) if rotation_vs is None else np.asarray(rotation_vs, dtype=float)
        pos = np.asarray(position, dtype=float).reshape(3)
        try:
            mounting = RigidTransform(r_vs, pos)
        except ValueError as exc:
            raise ConfigError(f"invalid sensor mounting: {exc}") from None
        return cls.from_transform(mounting.inverse())

    @classmethod
    def identity(cls) -> Extrinsics:
        return cls.from_transform(RigidTransform.identity())


@dataclass(frozen=True)
class GyroSample:
    timestamp: float
    y_gyro: np.ndarray


@dataclass
class GyroData:
    """Gyroscope samples, time-sorted; ``rates`` in rad/s in the sensor frame."""

    timestamps: np.ndarray
    rates: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        self.rates = np.asarray(self.rates, dtype=float).reshape(-1, 3)
        order = np.argsort(self.timestamps, kind="stable")
        if np.any(order != np.arange(order.size)):
            self.timestamps = self.timestamps[order]
            self.rates = self.rates[order]

    def __len__(self) -> int:
        return self.timestamps.size

    def __getitem__(self, i) -> GyroSample:
        return GyroSample(float(self.timestamps[i]), self.rates[i].copy())

    def window(self, t0: float, t1: float) -> GyroData:
        lo = np.searchsorted(self.timestamps, t0, side="left")
        hi = np.searchsorted(self.timestamps, t1, side="right")
        return GyroData(self.timestamps[lo:hi], self.rates[lo:hi])


def read_gyro_csv(path) -> GyroData:
    rows = []
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for lineno, line in enumerate(reader, start=1):
            try:
                vals = [float(v) for v in line]
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
            if len(vals) != 4 or not np.all(np.isfinite(vals)):
                raise ParseError(path, lineno, "expected 4 finite columns")
            rows.append(vals)
    data = np.array(rows, dtype=float).reshape(-1, 4)
    return GyroData(data[:, 0], data[:, 1:])


def write_gyro_csv(path, gyro: GyroData) -> None:
    with Path(path).open("w", newline="") as fh:
        fh.write("timestamp_s,wx_rad_s,wy_rad_s,wz_rad_s\n")
        np.savetxt(fh, np.column_stack([gyro.timestamps, gyro.rates]), delimiter=",", fmt="%.17g")


def default_kinematic_selector() -> np.ndarray:
    h = np.zeros((len(KINEMATIC_COMPONENTS), 6))
    for i, c in enumerate(KINEMATIC_COMPONENTS):
        h[i, c] = 1.0
    return h


def _check_spd(name: str, m: np.ndarray) -> np.ndarray:
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.shape[0] != m.shape[1] or not np.all(np.isfinite(m)):
        raise ConfigError(f"{name} must be a finite square matrix")
    if not np.allclose(m, m.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(m).max())):
        raise ConfigError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        raise ConfigError(f"{name} must be positive definite") from None
    return m


@dataclass
class NoiseConfig:
    """Noise parameters: measurement covariances, prior PSD and kinematic penalty."""

    r_dop: float = 0.01
    r_gyro: np.ndarray = field(default_factory=lambda: np.diag([1e-4, 1e-4, 1e-4]))
    q_c: np.ndarray = field(default_factory=lambda: np.diag([1.0, 0.1, 0.1, 0.01, 0.01, 0.1]))
    q_z: np.ndarray = field(default_factory=lambda: np.diag([0.01, 0.01, 0.01, 0.01]))
    h_kin: np.ndarray = field(default_factory=default_kinematic_selector)

    def __post_init__(self):
        if not (np.isfinite(self.r_dop) and self.r_dop > 0):
            raise ConfigError("r_dop must be a positive variance")
        self.r_gyro = _check_spd("r_gyro", self.r_gyro)
        self.q_c = _check_spd("q_c", self.q_c)
        self.h_kin = np.asarray(self.h_kin, dtype=float).reshape(-1, 6)
        if self.h_kin.shape[0]:
            self.q_z = _check_spd("q_z", self.q_z)
            if self.q_z.shape[0] != self.h_kin.shape[0]:
                raise ConfigError("q_z must match the number of rows of h_kin")


def doppler_row(q, extrinsics: Extrinsics) -> np.ndarray:
    """``(1/|q|) [q^T 0] Ad_sv``: the vehicle twist projected onto the beam."""
    q = np.asarray(q, dtype=float).reshape(3)
    n = np.linalg.norm(q)
    if not n > 0.0:
        raise InvalidPointError("doppler_row needs a point with positive range")
    return (q / n) @ extrinsics.Ad_sv[:3, :]


def doppler_rows(points: np.ndarray, extrinsics: Extrinsics, ranges: np.ndarray | None = None) -> np.ndarray:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if ranges is None:
        ranges = np.linalg.norm(points, axis=1)
    if ranges.size and not np.all(ranges > 0.0):
        raise InvalidPointError("doppler_rows needs points with positive range")
    return (points / ranges[:, None]) @ extrinsics.Ad_sv[:3, :]


def doppler_row_lever_arm(q, extrinsics: Extrinsics) -> np.ndarray:
    """Same row written with the vehicle-frame direction and the lever arm."""
    q = np.asarray(q, dtype=float).reshape(3)
    n = np.linalg.norm(q)
    if not n > 0.0:
        raise InvalidPointError("doppler_row needs a point with positive range")
    q_v = extrinsics.R_sv.T @ q / n
    return np.concatenate([q_v, np.cross(extrinsics.r_v, q_v)])


def doppler_error(ret, w, extrinsics: Extrinsics, bias: float = 0.0) -> float:
    """Scalar Doppler residual ``y - row . w - bias`` for one return."""
    return float(ret.doppler - doppler_row(ret.q, extrinsics) @ np.asarray(w, dtype=float) - bias)


def gyro_rows(extrinsics: Extrinsics) -> np.ndarray:
    """3x6 gyro measurement matrix ``R_sv D``."""
    g = np.zeros((3, 6))
    g[:, 3:] = extrinsics.R_sv
    return g


def gyro_error(sample: GyroSample, w, extrinsics: Extrinsics, gyro_bias=(0.0, 0.0, 0.0)) -> np.ndarray:
    w = np.asarray(w, dtype=float).reshape(6)
    return (np.asarray(sample.y_gyro, dtype=float) - np.asarray(gyro_bias, dtype=float)
            - extrinsics.R_sv @ w[3:])


def factor_contribution(rows, errors, variance, w_lin=None):
    """Information matrix and vector of linear factors.

    ``rows`` (m x n) is the measurement Jacobian, ``errors`` the residuals at
    ``w_lin`` (zero by default) and ``variance`` a scalar or an m x m
    covariance.  Returns ``(A^T R^-1 A, A^T R^-1 (e + A w_lin))``.
    """
    a = np.atleast_2d(np.asarray(rows, dtype=float))
    e = np.asarray(errors, dtype=float).reshape(-1)
    if a.shape[0] == 0:
        n = a.shape[1] if a.ndim == 2 else 6
        return np.zeros((n, n)), np.zeros(n)
    if e.shape[0] != a.shape[0]:
        raise ValueError("rows and errors disagree in length")
    if w_lin is not None:
        e = e + a @ np.asarray(w_lin, dtype=float)
    var = np.asarray(variance, dtype=float)
    if var.ndim == 0:
        if not (np.isfinite(var) and var > 0):
            raise ConfigError("measurement variance must be positive")
        return a.T @ a / var, a.T @ e / var
    w = np.linalg.inv(_check_spd("measurement covariance", var))
    return a.T @ w @ a, a.T @ w @ e
