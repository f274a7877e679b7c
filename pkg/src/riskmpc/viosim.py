"""Synthetic visual-inertial covariance oracle.

A planar EKF over the point-mass plant fuses noisy relative-position
observations of visible landmarks. Its covariance track is the ground
truth the recurrent predictor trains against: dead reckoning between
landmark sightings grows it in closed form, landmark updates shrink it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from . import covpred, mpc
from .geometry import (
    Control2,
    Covariance2,
    State2,
    State3,
    psd_correct,
    wrap_angle,
)


@dataclass(frozen=True)
class Landmark:
    x: float
    y: float
    z: float
    id: int = 0

    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


@dataclass(frozen=True)
class EkfState:
    mean: np.ndarray  # (2,) planar position estimate
    P: Covariance2
    sigma_w: float  # process noise, m/s
    sigma_v: float  # measurement noise, meters
    sensing_range: float
    fov_half_angle: float  # radians from the heading axis

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float).ravel())
        if self.mean.shape != (2,):
            raise ValueError("EKF mean must be planar")
        if self.sigma_w <= 0.0 or self.sigma_v <= 0.0:
            raise ValueError("noise parameters must be positive")


def visible_features(
    robot: State3,
    landmarks: Sequence[Landmark],
    sensing_range: float,
    fov_half_angle: float,
) -> List[Landmark]:
    """Landmarks within range (inclusive) and inside the heading-centered
    field of view, sorted by planar distance ascending."""
    out = []
    for lm in landmarks:
        dx = lm.x - robot.x
        dy = lm.y - robot.y
        d = math.hypot(dx, dy)
        if d > sensing_range:
            continue
        if d > 1e-12:
            bearing = wrap_angle(math.atan2(dy, dx) - robot.psi)
            if abs(bearing) > fov_half_angle:
                continue
        out.append((d, lm))
    out.sort(key=lambda t: (t[0], t[1].id))
    return [lm for _, lm in out]


def ekf_step(
    s: EkfState,
    control: Control2,
    dt: float,
    visible: Sequence[Landmark],
    rng: np.random.Generator,
    true_position: Optional[np.ndarray] = None,
) -> EkfState:
    """One predict + update cycle.

    Predict: mean += control*dt, P += sigma_w^2 dt^2 I. Update: each
    visible landmark contributes a planar position-difference measurement
    with covariance sigma_v^2 I, fused by the standard Kalman update
    (Joseph form). When the true position is omitted, the measurement is
    synthesized around the predicted mean, which leaves the covariance
    recursion identical.
    """
    mean = s.mean + control.as_array() * dt
    P = s.P.as_matrix() + (s.sigma_w * dt) ** 2 * np.eye(2)
    R = s.sigma_v**2 * np.eye(2)
    truth = mean if true_position is None else np.asarray(true_position, dtype=float)
    for lm in visible:
        lm_xy = np.array([lm.x, lm.y])
        z = (truth - lm_xy) + rng.normal(0.0, s.sigma_v, size=2)
        innov = z - (mean - lm_xy)
        S = P + R
        K = P @ np.linalg.inv(S)
        mean = mean + K @ innov
        IK = np.eye(2) - K
        P = IK @ P @ IK.T + K @ R @ K.T
    P = 0.5 * (P + P.T)
    return replace(s, mean=mean, P=Covariance2.from_matrix(P))


@dataclass
class Dataset:
    """Per-episode sequences of (18 network inputs, 4 covariance targets)."""

    episodes: List[tuple]  # (inputs (T, 18), targets (T, 4))
    dt: float
    params: dict = field(default_factory=dict)

    def sequences(self):
        return self.episodes

    def n_records(self) -> int:
        return sum(x.shape[0] for x, _ in self.episodes)


def _default_planner(dt_plan: float, u_max: float) -> mpc.PlannerConfig:
    return mpc.PlannerConfig(
        N=10,
        dt_plan=dt_plan,
        Q=np.eye(2),
        R=0.1 * np.eye(2),
        slack_weight=1e4,
        u_limit=np.array([u_max, u_max]),
    )


def gen_dataset(
    maps: Sequence[Sequence[Landmark]],
    episodes_per_map: int,
    episode_length: int,
    seed: int,
    dt_plan: float = 0.1,
    sigma_w: float = 0.05,
    sigma_v: float = 0.1,
    sensing_range: float = 5.0,
    fov_half_angle: float = math.pi / 2.0,
    camera_height: float = 0.3,
    area: float = 10.0,
    u_max: float = 1.5,
    planner: Optional[mpc.PlannerConfig] = None,
) -> Dataset:
    """Drive goal-seeking episodes over each landmark map and record the
    EKF covariance alongside the network input at every planning step.

    Deterministic for a fixed seed: each (map, episode) pair gets an
    independently derived RNG stream.
    """
    if not maps:
        raise ValueError("at least one landmark map is required")
    if episodes_per_map < 1 or episode_length < 1:
        raise ValueError("episode counts must be positive")
    cfg = planner if planner is not None else _default_planner(dt_plan, u_max)
    episodes = []
    root = np.random.SeedSequence(seed)
    streams = root.spawn(len(maps) * episodes_per_map)
    for mi, landmarks in enumerate(maps):
        for ei in range(episodes_per_map):
            rng = np.random.default_rng(streams[mi * episodes_per_map + ei])
            inputs = np.empty((episode_length, covpred.INPUT_DIM))
            targets = np.empty((episode_length, covpred.OUTPUT_DIM))
            pos = rng.uniform(-0.5 * area, 0.5 * area, size=2)
            psi = rng.uniform(-math.pi, math.pi)
            goal = rng.uniform(-0.5 * area, 0.5 * area, size=2)
            ekf = EkfState(
                mean=pos.copy(),
                P=Covariance2(1e-4, 0.0, 0.0, 1e-4),
                sigma_w=sigma_w,
                sigma_v=sigma_v,
                sensing_range=sensing_range,
                fov_half_angle=fov_half_angle,
            )
            warm = None
            r_sigma = np.zeros(cfg.N + 1)
            for step in range(episode_length):
                if np.linalg.norm(pos - goal) < 0.2:
                    goal = rng.uniform(-0.5 * area, 0.5 * area, size=2)
                    warm = None
                sol = mpc.plan_step(
                    State2(pos[0], pos[1]), State2(goal[0], goal[1]), [], r_sigma, cfg, warm
                )
                warm = mpc.shift_warm_start(sol)
                u = Control2(sol.U[0, 0], sol.U[0, 1])
                if math.hypot(u.vx, u.vy) > 1e-6:
                    psi = math.atan2(u.vy, u.vx)
                pose = State3(pos[0], pos[1], psi)
                visible = visible_features(pose, landmarks, sensing_range, fov_half_angle)
                ekf = ekf_step(ekf, u, dt_plan, visible, rng, true_position=pos)
                robot = np.array([pos[0], pos[1], camera_height])
                feats = covpred.nearest_five(
                    robot, [lm.position() for lm in visible], sensing_range
                )
                inputs[step] = covpred.build_input(robot, feats)
                targets[step] = psd_correct(ekf.P).as_flat()
                # plant step at the planning cadence
                pos = pos + u.as_array() * dt_plan + rng.normal(
                    0.0, sigma_w * dt_plan, size=2
                )
            episodes.append((inputs, targets))
    return Dataset(
        episodes=episodes,
        dt=dt_plan,
        params={
            "sigma_w": sigma_w,
            "sigma_v": sigma_v,
            "sensing_range": sensing_range,
            "fov_half_angle": fov_half_angle,
            "camera_height": camera_height,
            "seed": seed,
        },
    )


# ---------------------------------------------------------------------------
# Dataset file format
# ---------------------------------------------------------------------------

DATASET_VERSION = 1


def save_dataset(path, ds: Dataset) -> None:
    """Versioned text format: header block then one CSV row per record
    `episode, step, 18 input scalars, 4 target scalars`."""
    import os
    import tempfile

    lines = [f"riskmpc-dataset v{DATASET_VERSION}"]
    lines.append(f"dt={ds.dt!r}")
    lines.append(f"input_dim={covpred.INPUT_DIM}")
    lines.append(f"target_dim={covpred.OUTPUT_DIM}")
    for key in sorted(ds.params):
        lines.append(f"param.{key}={ds.params[key]!r}")
    lines.append("records:")
    for ep, (inputs, targets) in enumerate(ds.episodes):
        for step in range(inputs.shape[0]):
            row = [str(ep), str(step)]
            row.extend(repr(float(v)) for v in inputs[step])
            row.extend(repr(float(v)) for v in targets[step])
            lines.append(",".join(row))
    text = "\n".join(lines) + "\n"
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


def load_dataset(path) -> Dataset:
    with open(path) as fh:
        header = fh.readline().strip()
        if header != f"riskmpc-dataset v{DATASET_VERSION}":
            raise ValueError(f"unsupported dataset header: {header!r}")
        dt = None
        params = {}
        for line in fh:
            line = line.strip()
            if line == "records:":
                break
            key, _, value = line.partition("=")
            if not _:
                raise ValueError(f"malformed dataset header line: {line!r}")
            if key == "dt":
                dt = float(value)
            elif key.startswith("param."):
                try:
                    params[key[6:]] = eval(value, {"__builtins__": {}})  # noqa: S307 - trusted repr values
                except Exception:
                    params[key[6:]] = value
            elif key in ("input_dim", "target_dim"):
                expected = covpred.INPUT_DIM if key == "input_dim" else covpred.OUTPUT_DIM
                if int(value) != expected:
                    raise ValueError(f"dataset field {key} mismatch: {value}")
            else:
                raise ValueError(f"unknown dataset header field: {key!r}")
        else:
            raise ValueError("dataset has no records section")
        if dt is None:
            raise ValueError("dataset header missing field: dt")
        episodes = {}
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2 + covpred.INPUT_DIM + covpred.OUTPUT_DIM:
                raise ValueError(f"malformed dataset record: {line[:60]!r}")
            ep = int(parts[0])
            vals = np.array([float(v) for v in parts[2:]])
            episodes.setdefault(ep, []).append(vals)
    seqs = []
    for ep in sorted(episodes):
        block = np.array(episodes[ep])
        seqs.append((block[:, : covpred.INPUT_DIM], block[:, covpred.INPUT_DIM :]))
    return Dataset(episodes=seqs, dt=dt, params=params)
