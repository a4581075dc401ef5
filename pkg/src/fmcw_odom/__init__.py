"""Correspondence-free lidar-inertial odometry from FMCW Doppler and gyro data."""

from .errors import (ConfigError, DataError, InvalidPointError, NumericalError, OdomError,
                     ParseError, RankDeficiencyError)
from .lie import RigidTransform, adjoint, exp_se3

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "InvalidPointError", "NumericalError", "OdomError",
    "ParseError", "RankDeficiencyError", "RigidTransform", "adjoint", "exp_se3",
]
