"""Algebraic observability of the body velocity for multi-lidar (+gyro) rigs.

For a constant velocity over one frame, every Doppler return of a lidar at
vehicle-frame position ``p`` contributes the row ``[q^T, (p x q)^T]`` where
``q`` is the unit beam direction in the vehicle frame.  The velocity is
observable iff the summed Gram matrix ``C^T C`` has a trivial nullspace.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .lie import rot_rpy, skew
from .measurement import Extrinsics

RANK_RTOL = 1e-8


@dataclass
class LidarSpec:
    extrinsics: Extrinsics
    directions: np.ndarray

    def __post_init__(self):
        self.directions = np.asarray(self.directions, dtype=float).reshape(-1, 3)

    @property
    def position(self) -> np.ndarray:
        return self.extrinsics.r_v


@dataclass
class RigSpec:
    lidars: list[LidarSpec] = field(default_factory=list)
    gyro: Extrinsics | None = None

    @property
    def gyro_present(self) -> bool:
        return self.gyro is not None


@dataclass
class ObservabilityReport:
    ctc: np.ndarray
    rank: int
    nullity: int
    nullspace: np.ndarray
    singular_values: np.ndarray
    q_ranks: list[int]
    factors: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=list, repr=False)


def fibonacci_directions(n: int) -> np.ndarray:
    """``n`` nearly uniform unit vectors on the sphere."""
    if n < 1:
        raise ValueError("need at least one direction")
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = np.pi * (1.0 + 5 ** 0.5) * i
    rxy = np.sqrt(1.0 - z * z)
    return np.column_stack([rxy * np.cos(phi), rxy * np.sin(phi), z])


def measurement_rows(directions: np.ndarray, position) -> np.ndarray:
    d = np.asarray(directions, dtype=float).reshape(-1, 3)
    return np.hstack([d, np.cross(np.asarray(position, dtype=float), d)])


def _numeric_rank(gram: np.ndarray, rtol: float = RANK_RTOL):
    vals, vecs = np.linalg.eigh(0.5 * (gram + gram.T))
    sv = np.abs(vals)
    smax = sv.max() if sv.size else 0.0
    small = sv <= rtol * smax if smax > 0 else np.ones_like(sv, dtype=bool)
    return int(np.count_nonzero(~small)), vecs[:, small], np.sort(sv)[::-1]


def _check_directions(lidar: LidarSpec, j: int) -> None:
    if lidar.directions.shape[0] < 1:
        raise DataError(f"lidar {j} has no directions")
    norms = np.linalg.norm(lidar.directions, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-9):
        raise DataError(f"lidar {j}: directions must be unit vectors")


def lidar_factors(q: np.ndarray, position) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(L, M, U)`` with ``C_j^T C_j = L M U``; ``L``, ``U`` invertible, ``M = diag(Q, 0)``."""
    px = skew(position)
    lower = np.eye(6)
    lower[3:, :3] = px
    mid = np.zeros((6, 6))
    mid[:3, :3] = q
    upper = np.eye(6)
    upper[:3, 3:] = -px
    return lower, mid, upper


def build_ctc(rig: RigSpec, rtol: float = RANK_RTOL) -> ObservabilityReport:
    gram = np.zeros((6, 6))
    q_ranks = []
    factors = []
    for j, lidar in enumerate(rig.lidars):
        _check_directions(lidar, j)
        c = measurement_rows(lidar.directions, lidar.position)
        gram += c.T @ c
        q = lidar.directions.T @ lidar.directions
        q_ranks.append(int(np.linalg.matrix_rank(q, tol=rtol * max(np.abs(q).max(), 1e-300))))
        factors.append(lidar_factors(q, lidar.position))
    rank, basis, sv = _numeric_rank(gram, rtol)
    return ObservabilityReport(gram, rank, 6 - rank, basis, sv, q_ranks, factors)


def build_ctc_with_gyro(rig: RigSpec, rtol: float = RANK_RTOL) -> ObservabilityReport:
    """As :func:`build_ctc` with the gyro block row ``[0, R_sv]`` appended."""
    if not rig.gyro_present:
        raise ConfigError("rig has no gyroscope")
    report = build_ctc(rig, rtol)
    g = np.zeros((3, 6))
    g[:, 3:] = rig.gyro.R_sv
    gram = report.ctc + g.T @ g
    rank, basis, sv = _numeric_rank(gram, rtol)
    return ObservabilityReport(gram, rank, 6 - rank, basis, sv, report.q_ranks, report.factors)


def analyze(rig: RigSpec, rtol: float = RANK_RTOL) -> ObservabilityReport:
    return build_ctc_with_gyro(rig, rtol) if rig.gyro_present else build_ctc(rig, rtol)


def _check_psd(name: str, m: np.ndarray, tol: float) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DataError(f"{name} must be square")
    if np.max(np.abs(m - m.T), initial=0.0) > tol:
        raise DataError(f"{name} is not symmetric")
    if np.linalg.eigvalsh(0.5 * (m + m.T)).min(initial=0.0) < -tol:
        raise DataError(f"{name} is not positive semidefinite")
    return m


def nullspace_intersection(a, b, tol: float = 1e-9, rtol: float = RANK_RTOL) -> np.ndarray:
    """Orthonormal basis of ``null(A + B)``, which equals ``null(A) & null(B)`` for PSD A, B."""
    a = _check_psd("A", a, tol)
    b = _check_psd("B", b, tol)
    _, basis, _ = _numeric_rank(a + b, rtol)
    return basis


def _distinct_positions(positions, tol: float):
    out = []
    for p in positions:
        if all(np.linalg.norm(p - u) > tol for u in out):
            out.append(p)
    return out


def predicted_nullspace_basis(rig: RigSpec, tol: float = 1e-9) -> np.ndarray:
    """Closed-form nullspace of ``C^T C`` for 1-3 lidars with full-rank direction sets.

    One position ``p``: ``{(p x k, k)}``.  Two distinct positions: the single
    direction ``(p2 x p1, p1 - p2)``.  Three positions: the same vector if they
    are collinear, otherwise nothing.  Returns a 6 x nullity matrix (columns
    need not be orthonormal).
    """
    if rig.gyro_present:
        raise ConfigError("closed-form nullspace covers lidar-only rigs")
    if not 1 <= len(rig.lidars) <= 3:
        raise ConfigError(f"closed form available for 1 to 3 lidars, got {len(rig.lidars)}")
    pos = _distinct_positions([l.position for l in rig.lidars], tol)
    if len(pos) == 1:
        return np.vstack([skew(pos[0]), np.eye(3)])
    p1, p2 = pos[0], pos[1]
    vec = np.concatenate([np.cross(p2, p1), p1 - p2])[:, None]
    if len(pos) == 2:
        return vec
    p3 = pos[2]
    area = np.linalg.norm(np.cross(p2 - p1, p3 - p1))
    scale = max(np.linalg.norm(p2 - p1) * np.linalg.norm(p3 - p1), 1e-300)
    if area <= tol * scale:
        return vec
    return np.zeros((6, 0))


def _rotation_from(entry: dict) -> np.ndarray:
    if "rotation" in entry:
        return np.asarray(entry["rotation"], dtype=float).reshape(3, 3)
    rpy = np.radians(np.asarray(entry.get("rotation_rpy_deg", [0.0, 0.0, 0.0]), dtype=float))
    return rot_rpy(*rpy)


def load_rig(path) -> RigSpec:
    """Rig description: YAML with ``sensors`` (position, rotation_rpy_deg,
    directions) and optional ``gyro`` / ``gyro_rotation_rpy_deg``.

    ``directions`` is ``isotropic-N`` or a CSV of sensor-frame points
    ``x,y,z`` (header line optional), relative to the rig file.
    """
    import yaml

    path = Path(path)
    with path.open() as fh:
        spec = yaml.safe_load(fh) or {}
    unknown = set(spec) - {"sensors", "gyro", "gyro_rotation_rpy_deg", "gyro_rotation"}
    if unknown:
        raise ConfigError(f"unknown rig keys: {sorted(unknown)}")
    lidars = []
    for j, entry in enumerate(spec.get("sensors", [])):
        r_vs = _rotation_from(entry)
        ext = Extrinsics.from_mounting(r_vs, entry.get("position", [0.0, 0.0, 0.0]))
        src = str(entry.get("directions", "isotropic-500"))
        if src.startswith("isotropic-"):
            d_s = fibonacci_directions(int(src.split("-", 1)[1]))
        else:
            fpath = (path.parent / src) if not Path(src).is_absolute() else Path(src)
            d_s = np.loadtxt(fpath, delimiter=",", ndmin=2, comments="#",
                             skiprows=_header_lines(fpath))
            d_s = d_s / np.linalg.norm(d_s, axis=1, keepdims=True)
        lidars.append(LidarSpec(ext, d_s @ r_vs.T))
    gyro = None
    if spec.get("gyro", False):
        g = {"rotation_rpy_deg": spec.get("gyro_rotation_rpy_deg", [0.0, 0.0, 0.0])}
        if "gyro_rotation" in spec:
            g = {"rotation": spec["gyro_rotation"]}
        gyro = Extrinsics.from_mounting(_rotation_from(g))
    return RigSpec(lidars, gyro)


def _header_lines(path: Path) -> int:
    with path.open() as fh:
        first = fh.readline()
    try:
        [float(x) for x in first.split(",")]
        return 0
    except ValueError:
        return 1


def format_report(report: ObservabilityReport) -> str:
    lines = [f"rank: {report.rank}", f"nullity: {report.nullity}",
             "per-sensor direction rank: " + ", ".join(str(r) for r in report.q_ranks),
             "singular values: " + " ".join(f"{s:.6g}" for s in report.singular_values)]
    if report.nullity:
        lines.append("nullspace basis (nu_x nu_y nu_z om_x om_y om_z):")
        for v in report.nullspace.T:
            lines.append("  " + " ".join(f"{x:+.6f}" for x in v))
    else:
        lines.append("velocity fully observable")
    return "\n".join(lines)


def write_report_csv(report: ObservabilityReport, path) -> None:
    with Path(path).open("w") as fh:
        fh.write("kind,index,v0,v1,v2,v3,v4,v5\n")
        fh.write(f"rank,0,{report.rank},,,,,\n")
        fh.write(f"nullity,0,{report.nullity},,,,,\n")
        for i, v in enumerate(report.nullspace.T):
            fh.write(f"basis,{i}," + ",".join(f"{x:.17g}" for x in v) + "\n")


PRESET_POSITIONS = {
    "one": [(1.2, 0.0, 1.8)],
    "two": [(1.2, 0.5, 1.8), (1.2, -0.5, 1.8)],
    "coincident": [(1.2, 0.0, 1.8), (1.2, 0.0, 1.8)],
    "triangle": [(1.2, 0.5, 1.8), (1.2, -0.5, 1.8), (-0.8, 0.0, 1.6)],
    "collinear": [(1.2, 0.5, 1.8), (1.2, 0.0, 1.8), (1.2, -0.5, 1.8)],
    "one+gyro": [(1.2, 0.0, 1.8)],
}


def preset_rig(name: str, num_directions: int = 500) -> RigSpec:
    """Reference rigs with isotropic direction sets (one per lidar)."""
    if name not in PRESET_POSITIONS:
        raise ConfigError(f"unknown rig preset {name!r}; choose from {sorted(PRESET_POSITIONS)}")
    d = fibonacci_directions(num_directions)
    lidars = [LidarSpec(Extrinsics.from_mounting(None, p), d) for p in PRESET_POSITIONS[name]]
    gyro = Extrinsics.identity() if name.endswith("+gyro") else None
    return RigSpec(lidars, gyro)
