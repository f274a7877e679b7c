"""Cubic Hermite reference trajectories between planner waypoints.

The position reference is the cubic through the endpoint positions and
velocities; the velocity reference is its analytic derivative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CubicSegment:
    """Per-dimension cubic p(t) = a0 + a1 t + a2 t^2 + a3 t^3 on [0, T]."""

    a0: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    a3: np.ndarray
    duration: float

    def __post_init__(self):
        if self.duration <= 0.0:
            raise ValueError("segment duration must be positive")

    def position(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return (
            self.a0
            + np.multiply.outer(t, self.a1)
            + np.multiply.outer(t**2, self.a2)
            + np.multiply.outer(t**3, self.a3)
        )

    def velocity(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return (
            self.a1
            + np.multiply.outer(2.0 * t, self.a2)
            + np.multiply.outer(3.0 * t**2, self.a3)
        )


def fit_hermite(x0, u0, x2, u2, duration: float) -> CubicSegment:
    """Fit the unique cubic with p(0)=x0, p'(0)=u0, p(T)=x2, p'(T)=u2.

    Accepts scalars or vectors (one polynomial per dimension).
    """
    if duration <= 0.0:
        raise ValueError("segment duration must be positive")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    u0 = np.atleast_1d(np.asarray(u0, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    u2 = np.atleast_1d(np.asarray(u2, dtype=float))
    T = float(duration)
    a0 = x0
    a1 = u0
    a2 = (3.0 * (x2 - x0) - (2.0 * u0 + u2) * T) / T**2
    a3 = (2.0 * (x0 - x2) + (u0 + u2) * T) / T**3
    return CubicSegment(a0, a1, a2, a3, T)


def sample_ref(seg: CubicSegment, dt_track: float):
    """Sample (position, velocity) references at t = 0, dt, 2 dt, ... <= T.

    Returns arrays of shape (n_samples, dim).
    """
    if dt_track <= 0.0:
        raise ValueError("dt_track must be positive")
    if dt_track > seg.duration:
        raise ValueError("dt_track exceeds segment duration")
    n = int(np.floor(seg.duration / dt_track + 1e-9)) + 1
    t = np.arange(n) * dt_track
    return seg.position(t), seg.velocity(t)
