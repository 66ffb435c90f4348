"""Measurement factors: GPS pseudorange, relative-pose odometry, anchor prior.

Residual conventions (all "measured minus predicted"):

- GPS:      e = rho_meas - |t_i - s|           (scalar, meters)
- odometry: e = log(pred^-1 * Z)               (6-vector), pred = x_{i+1} x_i^-1
- anchor:   e = log(x^-1 * prior)              (6-vector)

Jacobians are closed-form in the right-perturbation convention
x <- x * exp(delta) and are checked against central finite differences in the
test suite.  For the odometry factor the two node Jacobians are exact
negatives of each other, which the window optimizer exploits when it
accumulates the block-tridiagonal normal equations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from srfgo import liegroup
from srfgo.liegroup import Pose

# Receiver and satellite closer than this have no usable line of sight.
COINCIDENT_EPSILON = 1e-6

# Information placed on the window's oldest node so the graph stays full rank
# when every GPS factor has been stripped (pure odometry is invariant to a
# common right-composed rigid transform).
ANCHOR_INFORMATION_SCALE = 1e4


class DegenerateGeometryError(ValueError):
    """Receiver and satellite positions coincide; range direction undefined."""


def _check_spd(info: np.ndarray, name: str) -> np.ndarray:
    info = np.asarray(info, dtype=float)
    if info.shape != (6, 6):
        raise ValueError(f"{name} information must be 6x6, got {info.shape}")
    if not np.allclose(info, info.T, atol=1e-9):
        raise ValueError(f"{name} information must be symmetric")
    try:
        np.linalg.cholesky(info)
    except np.linalg.LinAlgError as err:
        raise ValueError(f"{name} information must be positive definite") from err
    return info


@dataclass(eq=False)
class GpsFactor:
    """One pseudorange to one satellite at one node."""

    node_index: int
    sat_position: np.ndarray
    measured_range: float
    sigma: float

    def __post_init__(self) -> None:
        self.sat_position = np.asarray(self.sat_position, dtype=float).reshape(3)
        self.measured_range = float(self.measured_range)
        self.sigma = float(self.sigma)
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.measured_range <= 0:
            raise ValueError(f"measured_range must be positive, got {self.measured_range}")


@dataclass(eq=False)
class OdometryFactor:
    """Relative-pose constraint between consecutive nodes."""

    from_index: int
    to_index: int
    measured_transform: Pose
    information: np.ndarray

    def __post_init__(self) -> None:
        if self.to_index != self.from_index + 1:
            raise ValueError(
                f"odometry must link consecutive nodes, got {self.from_index}->{self.to_index}")
        self.information = _check_spd(self.information, "odometry")


@dataclass(eq=False)
class AnchorFactor:
    """Prior pinning one node to a fixed pose."""

    node_index: int
    prior_pose: Pose
    information: np.ndarray

    def __post_init__(self) -> None:
        self.information = _check_spd(self.information, "anchor")


@dataclass(eq=False)
class Linearization:
    """Residual and per-node Jacobians about the current estimates."""

    residual: np.ndarray
    node_indices: tuple[int, ...]
    jacobians: tuple[np.ndarray, ...]


def default_odometry_information(sigma_tangent: np.ndarray) -> np.ndarray:
    """diag(1/sigma^2) from per-component tangent standard deviations
    ([w1 w2 w3 | r1 r2 r3] ordering)."""
    sigma = np.asarray(sigma_tangent, dtype=float).reshape(6)
    if np.any(sigma <= 0):
        raise ValueError("tangent standard deviations must be positive")
    return np.diag(1.0 / sigma ** 2)


def anchor_information() -> np.ndarray:
    return ANCHOR_INFORMATION_SCALE * np.eye(6)


def gps_predict(pose: Pose, sat_position: np.ndarray) -> float:
    """Expected pseudorange |t - s|."""
    diff = pose.translation - np.asarray(sat_position, dtype=float).reshape(3)
    r = float(np.linalg.norm(diff))
    if r < COINCIDENT_EPSILON:
        raise DegenerateGeometryError(
            f"receiver-satellite distance {r:.3e} m below {COINCIDENT_EPSILON:g} m")
    return r


def gps_residual(factor: GpsFactor, pose: Pose) -> float:
    """measured_range - gps_predict."""
    return factor.measured_range - gps_predict(pose, factor.sat_position)


def odom_predict(x_i: Pose, x_ip1: Pose) -> Pose:
    """Expected body-frame relative transform x_i^-1 * x_{i+1}.

    The body-frame form keeps the residual a function of local pose
    differences only; the world-frame alternative couples rotation error to
    absolute position and turns near-degenerate at kilometre-scale
    coordinates."""
    return liegroup.compose(liegroup.inverse(x_i), x_ip1)


def odom_residual(factor: OdometryFactor, x_i: Pose, x_ip1: Pose) -> np.ndarray:
    """measured ominus predicted (6-vector)."""
    return liegroup.ominus(factor.measured_transform, odom_predict(x_i, x_ip1))


def _linearize_gps(factor: GpsFactor, pose: Pose) -> Linearization:
    diff = pose.translation - factor.sat_position
    r = float(np.linalg.norm(diff))
    if r < COINCIDENT_EPSILON:
        raise DegenerateGeometryError(
            f"receiver-satellite distance {r:.3e} m below {COINCIDENT_EPSILON:g} m")
    los = diff / r
    jac = np.zeros((1, 6))
    # d|t + R dr - s|/d dr = los^T R; residual has opposite sign.
    jac[0, 3:] = -(los @ pose.rotation)
    residual = np.array([factor.measured_range - r])
    return Linearization(residual, (factor.node_index,), (jac,))


def _linearize_odometry(factor: OdometryFactor, x_i: Pose, x_ip1: Pose) -> Linearization:
    z = factor.measured_transform
    pred = odom_predict(x_i, x_ip1)
    e = liegroup.ominus(z, pred)
    # e(d_i, d_j) = log(exp(-d_j) pred^-1 exp(d_i) z): the j slot enters on
    # the left of exp(e), the i slot folds through Ad(pred^-1), so
    # J_i = -J_j Ad(pred^-1) exactly.
    j_j = -liegroup.se3_left_jacobian_inv(e)
    j_i = -j_j @ liegroup.adjoint(liegroup.inverse(pred))
    return Linearization(e, (factor.from_index, factor.to_index), (j_i, j_j))


def _linearize_anchor(factor: AnchorFactor, pose: Pose) -> Linearization:
    e = liegroup.ominus(factor.prior_pose, pose)
    jac = -liegroup.se3_left_jacobian_inv(e)
    return Linearization(e, (factor.node_index,), (jac,))


def linearize(factor, current_states: Mapping[int, Pose]) -> Linearization:
    """Residual and Jacobians for one factor about the given node estimates."""
    if isinstance(factor, GpsFactor):
        return _linearize_gps(factor, current_states[factor.node_index])
    if isinstance(factor, OdometryFactor):
        return _linearize_odometry(factor, current_states[factor.from_index],
                                   current_states[factor.to_index])
    if isinstance(factor, AnchorFactor):
        return _linearize_anchor(factor, current_states[factor.node_index])
    raise TypeError(f"unknown factor type {type(factor).__name__}")
