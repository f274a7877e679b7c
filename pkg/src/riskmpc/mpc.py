"""Two-phase MPC: waypoint planning toward a goal under collision
constraints, and finer-grained reference tracking with heading.

The planner works on the 2-state point mass; the tracker adds heading.
Uncertainty enters the planner only through the inflated collision
radius sequence, never through the prediction model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nlp, spline
from .geometry import Control3, Obstacle, State2, State3, wrap_angle


@dataclass(frozen=True)
class PlannerConfig:
    N: int
    dt_plan: float
    Q: np.ndarray  # (2, 2)
    R: np.ndarray  # (2, 2) velocity weight
    slack_weight: float
    x_limit: Optional[np.ndarray] = None
    u_limit: Optional[np.ndarray] = None
    alpha_limit: Optional[np.ndarray] = None
    goal: Optional[State2] = None

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("planner horizon must be at least 2 (spline spans k+2)")
        if self.dt_plan <= 0.0:
            raise ValueError("dt_plan must be positive")


@dataclass(frozen=True)
class TrackerConfig:
    N: int
    dt_track: float
    Q: np.ndarray  # (3, 3)
    R: np.ndarray  # (3, 3)
    body_limits: Optional[np.ndarray] = None  # (vx_lim, vy_lim) body frame
    alpha_limit: Optional[np.ndarray] = None
    u_limit: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("tracker horizon must be at least 1")
        if self.dt_track <= 0.0:
            raise ValueError("dt_track must be positive")


def _point_mass(dim: int, dt: float):
    return np.eye(dim), dt * np.eye(dim)


def plan_step(
    current: State2,
    goal: State2,
    obstacles: Sequence[Obstacle],
    r_sigma_horizon: np.ndarray,
    cfg: PlannerConfig,
    warm: Optional[nlp.NlpSolution] = None,
) -> nlp.NlpSolution:
    """One planning-phase solve from the current state estimate.

    The step-k collision constraint uses r_sigma_horizon[k]. A
    max-iterations result is still returned best-effort; the caller
    decides whether to use it.
    """
    r_sigma_horizon = np.asarray(r_sigma_horizon, dtype=float).ravel()
    if r_sigma_horizon.shape != (cfg.N + 1,):
        raise ValueError(f"r_sigma_horizon must have length N+1={cfg.N + 1}")
    A, B = _point_mass(2, cfg.dt_plan)
    problem = nlp.build_problem(
        "planning",
        N=cfg.N,
        A=A,
        B=B,
        x0=current.as_array(),
        Q=cfg.Q,
        R=cfg.R,
        dt=cfg.dt_plan,
        slack_weight=cfg.slack_weight,
        goal=goal.as_array(),
        x_limit=cfg.x_limit,
        u_limit=cfg.u_limit,
        alpha_limit=cfg.alpha_limit,
        obstacles=tuple(obstacles),
        r_sigma=r_sigma_horizon if obstacles else None,
    )
    return nlp.solve_sqp(problem, warm_start=warm)


def track_solve(
    current: State3,
    refs: Sequence[tuple],
    cfg: TrackerConfig,
    warm: Optional[nlp.NlpSolution] = None,
) -> nlp.NlpSolution:
    """Full tracking-phase solution for one control step.

    refs is a sequence of (State3, Control3) reference samples; it is
    padded by holding the last sample if shorter than N+1.
    """
    if not refs:
        raise ValueError("empty reference sequence")
    refs = list(refs)
    while len(refs) < cfg.N + 1:
        refs.append(refs[-1])
    x_ref = np.array([r[0].as_array() for r in refs[: cfg.N + 1]])
    u_ref = np.array([r[1].as_array() for r in refs[: cfg.N]])
    # Keep heading references on the current branch of the circle so the
    # quadratic heading error is meaningful near +-pi.
    psi = np.unwrap(np.concatenate([[current.psi], x_ref[:, 2]]))
    x_ref = x_ref.copy()
    x_ref[:, 2] = psi[1:]
    x0 = current.as_array()
    x0[2] = psi[0]

    A, B = _point_mass(3, cfg.dt_track)
    problem = nlp.build_problem(
        "tracking",
        N=cfg.N,
        A=A,
        B=B,
        x0=x0,
        Q=cfg.Q,
        R=cfg.R,
        dt=cfg.dt_track,
        u_limit=cfg.u_limit,
        alpha_limit=cfg.alpha_limit,
        x_ref=x_ref,
        u_ref=u_ref,
        body_limits=cfg.body_limits,
        body_angles=x_ref[:-1, 2] if cfg.body_limits is not None else None,
    )
    return nlp.solve_sqp(problem, warm_start=warm)


def track_step(
    current: State3,
    refs: Sequence[tuple],
    cfg: TrackerConfig,
    warm: Optional[nlp.NlpSolution] = None,
) -> Control3:
    """First control of the tracking solution."""
    sol = track_solve(current, refs, cfg, warm)
    return Control3(*sol.U[0])


def shift_warm_start(prev: nlp.NlpSolution) -> nlp.NlpSolution:
    """Shift a solution one step for the next cycle, duplicating the tail."""
    if prev.X.shape[0] < 3:
        raise ValueError("shift requires a horizon of at least 2")
    X = np.vstack([prev.X[1:], prev.X[-1:]])
    U = np.vstack([prev.U[1:], prev.U[-1:]])
    eps = np.concatenate([prev.eps[1:], prev.eps[-1:]])
    return nlp.NlpSolution(
        X=X,
        U=U,
        eps=eps,
        objective=prev.objective,
        kkt_residual=prev.kkt_residual,
        status=prev.status,
        iterations=prev.iterations,
    )


def implied_headings(sol: nlp.NlpSolution, fallback: float) -> np.ndarray:
    """Heading at each planner knot from the planned velocity direction.

    Near-zero velocities hold the previous heading (or the fallback for
    the first knot). Returned unwrapped so they can be spline-fitted.
    """
    psis = []
    prev = fallback
    for u in sol.U:
        if math.hypot(u[0], u[1]) > 1e-6:
            prev = math.atan2(u[1], u[0])
        psis.append(prev)
    psis.append(prev)  # terminal knot holds the last control heading
    return np.unwrap(np.array(psis))


def build_reference(
    sol: nlp.NlpSolution,
    dt_plan: float,
    dt_track: float,
    current_psi: float,
):
    """Cubic reference through planner knots k=0 and k=2 sampled at dt_track.

    Returns a list of (State3, Control3) covering [0, 2*dt_plan].
    """
    if sol.X.shape[0] < 3:
        raise ValueError("reference needs planner states up to k+2")
    T = 2.0 * dt_plan
    psis = implied_headings(sol, current_psi)
    n_u = sol.U.shape[0]
    psi_rate = lambda k: wrap_angle(psis[min(k + 1, n_u)] - psis[k]) / dt_plan

    x0 = np.array([sol.X[0, 0], sol.X[0, 1], psis[0]])
    u0 = np.array([sol.U[0, 0], sol.U[0, 1], psi_rate(0)])
    x2 = np.array([sol.X[2, 0], sol.X[2, 1], psis[2]])
    u2 = np.array([sol.U[min(2, n_u - 1), 0], sol.U[min(2, n_u - 1), 1], psi_rate(2)])
    seg = spline.fit_hermite(x0, u0, x2, u2, T)
    xs, us = spline.sample_ref(seg, dt_track)
    return [
        (State3(x[0], x[1], x[2]), Control3(u[0], u[1], u[2]))
        for x, u in zip(xs, us)
    ]
