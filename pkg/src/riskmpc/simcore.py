"""Closed-loop executor: alternating planning and tracking phases against
a noisy point-mass plant.

Every planning cycle the robot perceives in-range obstacles, plans from
its (noisy) position estimate with the mode's collision-radius
inflation, fits the cubic reference, then runs the tracking MPC at the
fine timestep against the plant. Collisions are judged against ground
truth with the physical body radius only.
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import covpred, mpc, perception, viosim
from .geometry import (
    Control2,
    Control3,
    Covariance2,
    Obstacle,
    RobotGeometry,
    State2,
    State3,
    major_axis_radius,
)

MODES = ("baseline", "naive", "risk-averse")


@dataclass(frozen=True)
class Scenario:
    start: State3
    goal: State2
    obstacles: Tuple[Obstacle, ...]
    landmarks: Tuple[viosim.Landmark, ...]
    planner: mpc.PlannerConfig
    tracker: mpc.TrackerConfig
    geom: RobotGeometry
    mode: str
    seed: int
    goal_tolerance: float = 0.15
    max_time: float = 60.0
    inflation: float = 2.0  # naive mode only
    sigma_w: float = 0.05  # plant noise, m/s
    sigma_v: float = 0.1  # landmark measurement noise, meters
    sensing_range: float = 5.0
    fov_half_angle: float = math.pi / 2.0
    camera_height: float = 0.3

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown controller mode {self.mode!r}")
        if self.goal_tolerance <= 0.0:
            raise ValueError("goal tolerance must be positive")
        if self.mode == "naive" and self.inflation < 1.0:
            raise ValueError("naive inflation must be at least 1")


@dataclass
class LogRecord:
    t: float
    true_state: State3
    est_xy: np.ndarray
    command: Control3
    r_sigma0: float
    min_clearance: float


@dataclass
class EpisodeLog:
    records: List[LogRecord]
    outcome: str  # reached | collided | timeout
    path_length: float
    time_to_goal: float
    min_clearance: float
    solver_failures: int = 0


@dataclass
class Summary:
    outcome: str
    collided: bool
    path_length: float
    time_to_goal: float
    min_clearance: float


def plant_step(
    state: State3,
    command: Control3,
    dt: float,
    sigma_w: float,
    rng: np.random.Generator,
) -> State3:
    """Euler step with Gaussian displacement noise (std sigma_w * dt per
    planar axis); heading integrates the yaw rate exactly."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    noise = rng.normal(0.0, sigma_w * dt, size=2) if sigma_w > 0.0 else np.zeros(2)
    return State3(
        state.x + command.vx * dt + noise[0],
        state.y + command.vy * dt + noise[1],
        state.psi + command.psi_dot * dt,
    )


def _clearance(state: State3, obstacles, body_radius: float) -> float:
    if not obstacles:
        return math.inf
    return min(
        math.hypot(state.x - o.cx, state.y - o.cy) - o.radius - body_radius
        for o in obstacles
    )


def run_episode(
    s: Scenario,
    net: Optional[Tuple[covpred.NetSpec, covpred.NetParams]] = None,
) -> EpisodeLog:
    """Execute one closed-loop episode.

    Risk-averse mode requires a trained net; its covariance predictions
    drive the per-step collision radii. All modes plan from the EKF mean
    so that estimation error is the common hazard; only the inflation
    policy differs.
    """
    if s.mode == "risk-averse" and net is None:
        raise ValueError("risk-averse mode requires a trained network")
    rng = np.random.default_rng(s.seed)
    true_state = s.start
    ekf = viosim.EkfState(
        mean=np.array([s.start.x, s.start.y]),
        P=Covariance2(1e-4, 0.0, 0.0, 1e-4),
        sigma_w=s.sigma_w,
        sigma_v=s.sigma_v,
        sensing_range=s.sensing_range,
        fov_half_angle=s.fov_half_angle,
    )
    hidden = covpred.zero_hidden(net[0]) if net is not None else None
    n_plan = s.planner.N
    if s.mode == "baseline":
        r_sigma = np.full(n_plan + 1, s.geom.body_radius)
    elif s.mode == "naive":
        r_sigma = np.full(n_plan + 1, s.inflation * s.geom.body_radius)
    else:
        r_sigma = np.full(n_plan + 1, s.geom.body_radius)

    steps_per_cycle = int(round(s.planner.dt_plan / s.tracker.dt_track))
    records: List[LogRecord] = []
    warm_plan = None
    warm_track = None
    prev_cmd = Control3(0.0, 0.0, 0.0)
    failures = 0
    consecutive_failures = 0
    outcome = "timeout"
    t = 0.0

    while t < s.max_time - 1e-9 and outcome == "timeout":
        # sensor cycle: EKF covariance predict + landmark fusion
        visible = viosim.visible_features(
            true_state, s.landmarks, s.sensing_range, s.fov_half_angle
        )
        ekf = viosim.ekf_step(
            ekf,
            # the mean was dead-reckoned through the tracking loop, so the
            # cycle-level predict only inflates the covariance
            Control2(0.0, 0.0),
            s.planner.dt_plan,
            visible,
            rng,
            true_position=np.array([true_state.x, true_state.y]),
        )
        est = ekf.mean.copy()

        in_range = perception.filter_range(
            s.obstacles, State2(est[0], est[1]), s.sensing_range
        )
        plan_failed = False
        try:
            plan_sol = mpc.plan_step(
                State2(est[0], est[1]), s.goal, in_range, r_sigma, s.planner, warm_plan
            )
        except FloatingPointError:
            plan_sol = None
            plan_failed = True
        if plan_sol is not None and plan_sol.status == "infeasible-relaxed":
            plan_failed = True
        if plan_failed:
            failures += 1
            consecutive_failures += 1
            if consecutive_failures >= 2:
                break
        else:
            consecutive_failures = 0
            warm_plan = mpc.shift_warm_start(plan_sol)
            refs = mpc.build_reference(
                plan_sol, s.planner.dt_plan, s.tracker.dt_track, true_state.psi
            )
            if s.mode == "risk-averse":
                states = [State2(x[0], x[1]) for x in plan_sol.X]
                covs, hidden = covpred.predict_horizon(
                    net[1],
                    net[0],
                    states,
                    [lm.position() for lm in visible],
                    hidden,
                    z_height=s.camera_height,
                    sensing_range=s.sensing_range,
                )
                r_sigma = np.array(
                    [major_axis_radius(c, s.geom) for c in covs]
                )

        for i in range(steps_per_cycle):
            if plan_failed:
                cmd = prev_cmd
            else:
                est_state = State3(est[0], est[1], true_state.psi)
                try:
                    track_sol = mpc.track_solve(
                        est_state, refs[i:], s.tracker, warm_track
                    )
                    warm_track = (
                        mpc.shift_warm_start(track_sol)
                        if s.tracker.N >= 2
                        else None
                    )
                    cmd = Control3(*track_sol.U[0])
                except FloatingPointError:
                    failures += 1
                    cmd = prev_cmd
            true_state = plant_step(true_state, cmd, s.tracker.dt_track, s.sigma_w, rng)
            est = est + np.array([cmd.vx, cmd.vy]) * s.tracker.dt_track
            prev_cmd = cmd
            t += s.tracker.dt_track
            clearance = _clearance(true_state, s.obstacles, s.geom.body_radius)
            records.append(
                LogRecord(
                    t=t,
                    true_state=true_state,
                    est_xy=est.copy(),
                    command=cmd,
                    r_sigma0=float(r_sigma[0]),
                    min_clearance=clearance,
                )
            )
            if clearance < 0.0:
                outcome = "collided"
                break
            if (
                math.hypot(true_state.x - s.goal.x, true_state.y - s.goal.y)
                <= s.goal_tolerance
            ):
                outcome = "reached"
                break
        ekf = viosim.EkfState(
            mean=est.copy(),
            P=ekf.P,
            sigma_w=ekf.sigma_w,
            sigma_v=ekf.sigma_v,
            sensing_range=ekf.sensing_range,
            fov_half_angle=ekf.fov_half_angle,
        )

    path_length = 0.0
    prev = s.start
    for r in records:
        path_length += math.hypot(r.true_state.x - prev.x, r.true_state.y - prev.y)
        prev = r.true_state
    min_clear = min((r.min_clearance for r in records), default=math.inf)
    time_to_goal = records[-1].t if records else 0.0
    return EpisodeLog(
        records=records,
        outcome=outcome,
        path_length=path_length,
        time_to_goal=time_to_goal,
        min_clearance=min_clear,
        solver_failures=failures,
    )


def metrics(log: EpisodeLog) -> Summary:
    """Deterministic aggregation of an episode log."""
    if not log.records:
        raise ValueError("empty episode log")
    return Summary(
        outcome=log.outcome,
        collided=log.outcome == "collided",
        path_length=log.path_length,
        time_to_goal=log.time_to_goal,
        min_clearance=log.min_clearance,
    )


# ---------------------------------------------------------------------------
# Log serialization
# ---------------------------------------------------------------------------

LOG_VERSION = 1
LOG_COLUMNS = (
    "t, x_true, y_true, psi, x_est, y_est, vx_cmd, vy_cmd, psidot_cmd, "
    "r_sigma0, min_clearance"
)


def _atomic_write(path, text: str) -> None:
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_log(path, log: EpisodeLog) -> None:
    lines = [f"riskmpc-log v{LOG_VERSION}", LOG_COLUMNS]
    for r in log.records:
        lines.append(
            ",".join(
                repr(float(v))
                for v in (
                    r.t,
                    r.true_state.x,
                    r.true_state.y,
                    r.true_state.psi,
                    r.est_xy[0],
                    r.est_xy[1],
                    r.command.vx,
                    r.command.vy,
                    r.command.psi_dot,
                    r.r_sigma0,
                    r.min_clearance,
                )
            )
        )
    _atomic_write(path, "\n".join(lines) + "\n")


def save_summary(path, log: EpisodeLog, extra: Optional[dict] = None) -> None:
    m = metrics(log)
    lines = [
        f"riskmpc-summary v{LOG_VERSION}",
        f"outcome={m.outcome}",
        f"collided={m.collided}",
        f"path_length={m.path_length!r}",
        f"time_to_goal={m.time_to_goal!r}",
        f"min_clearance={m.min_clearance!r}",
        f"solver_failures={log.solver_failures}",
    ]
    for key in sorted(extra or {}):
        lines.append(f"{key}={extra[key]!r}")
    _atomic_write(path, "\n".join(lines) + "\n")
