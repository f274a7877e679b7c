"""Planar domain types and covariance-to-collision-boundary geometry."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def wrap_angle(rad: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    r = (rad + math.pi) % (2.0 * math.pi) - math.pi
    if r <= -math.pi:
        r += 2.0 * math.pi
    return r


def _check_finite(*values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ValueError(f"non-finite component: {v!r}")


@dataclass(frozen=True)
class State2:
    """Planar position, meters."""

    x: float
    y: float

    def __post_init__(self):
        _check_finite(self.x, self.y)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class State3:
    """Planar position plus heading; psi wrapped to (-pi, pi]."""

    x: float
    y: float
    psi: float

    def __post_init__(self):
        _check_finite(self.x, self.y, self.psi)
        object.__setattr__(self, "psi", wrap_angle(self.psi))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi])

    def planar(self) -> State2:
        return State2(self.x, self.y)


@dataclass(frozen=True)
class Control2:
    """Planar velocity command, m/s."""

    vx: float
    vy: float

    def __post_init__(self):
        _check_finite(self.vx, self.vy)

    def as_array(self) -> np.ndarray:
        return np.array([self.vx, self.vy])


@dataclass(frozen=True)
class Control3:
    """Planar velocity plus yaw rate."""

    vx: float
    vy: float
    psi_dot: float

    def __post_init__(self):
        _check_finite(self.vx, self.vy, self.psi_dot)

    def as_array(self) -> np.ndarray:
        return np.array([self.vx, self.vy, self.psi_dot])


@dataclass(frozen=True)
class Covariance2:
    """2x2 planar position covariance, stored as four scalars.

    Kept as a full (possibly asymmetric) matrix because the covariance
    predictor emits a flat 4-vector that is only symmetrized by
    `psd_correct`.
    """

    sxx: float
    sxy: float
    syx: float
    syy: float

    def __post_init__(self):
        _check_finite(self.sxx, self.sxy, self.syx, self.syy)

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Covariance2":
        m = np.asarray(m, dtype=float)
        if m.shape != (2, 2):
            raise ValueError(f"expected 2x2 matrix, got shape {m.shape}")
        return Covariance2(m[0, 0], m[0, 1], m[1, 0], m[1, 1])

    @staticmethod
    def from_flat(v: np.ndarray) -> "Covariance2":
        v = np.asarray(v, dtype=float).ravel()
        if v.shape != (4,):
            raise ValueError(f"expected 4 entries, got {v.shape}")
        return Covariance2(v[0], v[1], v[2], v[3])

    def as_matrix(self) -> np.ndarray:
        return np.array([[self.sxx, self.sxy], [self.syx, self.syy]])

    def as_flat(self) -> np.ndarray:
        return np.array([self.sxx, self.sxy, self.syx, self.syy])

    def trace(self) -> float:
        return self.sxx + self.syy


@dataclass(frozen=True)
class Obstacle:
    """Planar disc obstacle."""

    cx: float
    cy: float
    radius: float

    def __post_init__(self):
        _check_finite(self.cx, self.cy, self.radius)
        if self.radius < 0.0:
            raise ValueError(f"negative obstacle radius: {self.radius}")

    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy])


@dataclass(frozen=True)
class RobotGeometry:
    """Physical body radius plus the confidence scale applied to the
    covariance major axis when inflating the collision boundary."""

    body_radius: float
    confidence_scale: float = 2.0

    def __post_init__(self):
        _check_finite(self.body_radius, self.confidence_scale)
        if self.body_radius <= 0.0:
            raise ValueError("body_radius must be positive")
        if self.confidence_scale < 0.0:
            raise ValueError("confidence_scale must be non-negative")


def psd_correct(m: Covariance2) -> Covariance2:
    """Force a raw covariance prediction PSD: zero the off-diagonals and
    replace negative diagonal entries by their absolute values."""
    return Covariance2(abs(m.sxx), 0.0, 0.0, abs(m.syy))


def major_axis_radius(sigma: Covariance2, geom: RobotGeometry) -> float:
    """Collision-boundary radius: body radius plus the scaled major-axis
    length of the uncertainty ellipse.

    Expects a PSD-corrected (diagonal) covariance, for which the largest
    eigenvalue is simply the larger diagonal entry; a symmetric
    off-diagonal is still handled exactly via the closed-form eigenvalue.
    """
    a, b, c = sigma.sxx, sigma.syy, 0.5 * (sigma.sxy + sigma.syx)
    lam_max = 0.5 * (a + b) + math.hypot(0.5 * (a - b), c)
    lam_max = max(lam_max, 0.0)
    return geom.body_radius + geom.confidence_scale * math.sqrt(lam_max)


def collision_margin(
    x: float, y: float, obs: Obstacle, r_sigma: float, eps: float
) -> float:
    """Left-hand side of the collision constraint; <= 0 means satisfied.

    margin = -dist(robot, obstacle center) + r_sigma + r_obstacle - eps
    """
    if eps < 0.0:
        raise ValueError("slack eps must be non-negative")
    dist = math.hypot(x - obs.cx, y - obs.cy)
    return -dist + r_sigma + obs.radius - eps
