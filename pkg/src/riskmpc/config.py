"""Structured run configuration with documented defaults.

A single nested key-value document (YAML on disk) drives every CLI
command. Unknown keys are rejected so typos fail loudly; the merged,
fully-resolved configuration is echoed next to every output artifact.
"""

from __future__ import annotations

import copy
import math
from typing import Optional

import numpy as np
import yaml

from . import mpc, viosim
from .geometry import Obstacle, RobotGeometry, State2, State3
from .perception import to_obstacle


class ConfigError(ValueError):
    pass


def default_config() -> dict:
    """Every knob with its default. Timing, radii, speed limit, start,
    goal, and obstacle follow the reference desk scenario."""
    return {
        "seed": 0,
        "scenario": {
            "start": [0.0, 0.0, 0.0],  # x, y, psi
            "goal": [8.0, 0.0],
            "goal_tolerance": 0.15,
            "max_time": 60.0,
            "mode": "baseline",  # baseline | naive | risk-averse
            "inflation": 2.0,  # naive-mode radius multiplier (0.7 -> 1.4 m)
            "body_radius": 0.7,
            "confidence_scale": 3.0,  # ~3-sigma ellipse on the covariance major axis;
            # 2.0 (~95%) leaves too little margin for tracking error in closed loop
            "sigma_w": 0.05,  # plant/process velocity noise, m/s
            "sigma_v": 0.1,  # landmark measurement noise, m
            "sensing_range": 5.0,
            "fov_half_angle": math.pi / 2.0,
            "camera_height": 0.3,
            "obstacle_cube": {"center": [4.0, 0.0, 0.5], "size": 1.0},
            "obstacles": None,  # explicit [[cx, cy, radius], ...] overrides the cube
            "landmarks": "cube_corners",  # or explicit [[x, y, z], ...]
            "feature_file": None,  # optional perception inputs instead of the cube
            "box_file": None,
        },
        "camera": {
            "fx": 600.0,
            "fy": 600.0,
            "cx": 320.0,
            "cy": 240.0,
        },
        "planner": {
            "N": 10,
            "dt_plan": 0.1,
            "q": 1.0,
            "r": 0.1,
            "slack_weight": 1.0e4,
            "u_limit": 1.5,  # max velocity, m/s
            "x_limit": None,
            "alpha_limit": None,
        },
        "tracker": {
            "N": 10,
            "dt_track": 0.005,
            "q_pos": 10.0,
            "q_psi": 1.0,
            "r_v": 0.05,
            "r_psidot": 0.05,
            "vx_body_limit": 1.5,
            "vy_body_limit": 1.5,
            "alpha_limit": None,
        },
        "oracle": {
            "maps": 1,
            "episodes_per_map": 4,
            "episode_length": 400,
            "landmarks_per_map": 12,
            "area": 10.0,
        },
        "net": {
            "hidden_width": 16,
            "epochs": 100,
            "step_size": 1.0e-3,
            "momentum": 0.9,
            "clip_norm": 5.0,
            "val_fraction": 0.25,
        },
        "solver": {
            "kkt_tol": 1.0e-6,
            "defect_tol": 1.0e-8,
        },
    }


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown configuration key: {here}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> dict:
    """Defaults merged with an optional YAML file and explicit overrides."""
    cfg = default_config()
    if path is not None:
        with open(path) as fh:
            user = yaml.safe_load(fh)
        if user is None:
            user = {}
        if not isinstance(user, dict):
            raise ConfigError("configuration file must be a mapping")
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=None)


def cube_corners(center, size: float):
    cx, cy, cz = center
    h = 0.5 * size
    corners = []
    for sx in (-h, h):
        for sy in (-h, h):
            for sz in (-h, h):
                corners.append(np.array([cx + sx, cy + sy, cz + sz]))
    return corners


def build_planner(cfg: dict) -> mpc.PlannerConfig:
    p = cfg["planner"]

    def pair(v):
        return None if v is None else np.array([float(v)] * 2)

    return mpc.PlannerConfig(
        N=int(p["N"]),
        dt_plan=float(p["dt_plan"]),
        Q=float(p["q"]) * np.eye(2),
        R=float(p["r"]) * np.eye(2),
        slack_weight=float(p["slack_weight"]),
        x_limit=pair(p["x_limit"]),
        u_limit=pair(p["u_limit"]),
        alpha_limit=pair(p["alpha_limit"]),
    )


def build_tracker(cfg: dict) -> mpc.TrackerConfig:
    t = cfg["tracker"]
    Q = np.diag([float(t["q_pos"]), float(t["q_pos"]), float(t["q_psi"])])
    R = np.diag([float(t["r_v"]), float(t["r_v"]), float(t["r_psidot"])])
    body = None
    if t["vx_body_limit"] is not None and t["vy_body_limit"] is not None:
        body = np.array([float(t["vx_body_limit"]), float(t["vy_body_limit"])])
    alpha = (
        None
        if t["alpha_limit"] is None
        else np.array([float(t["alpha_limit"])] * 3)
    )
    return mpc.TrackerConfig(
        N=int(t["N"]),
        dt_track=float(t["dt_track"]),
        Q=Q,
        R=R,
        body_limits=body,
        alpha_limit=alpha,
    )


def build_obstacles(cfg: dict) -> tuple:
    sc = cfg["scenario"]
    if sc["obstacles"] is not None:
        return tuple(Obstacle(*map(float, row)) for row in sc["obstacles"])
    cube = sc["obstacle_cube"]
    if cube is None:
        return ()
    corners = cube_corners(cube["center"], float(cube["size"]))
    return (to_obstacle(corners),)


def build_landmarks(cfg: dict) -> tuple:
    sc = cfg["scenario"]
    spec = sc["landmarks"]
    if spec == "cube_corners":
        cube = sc["obstacle_cube"]
        if cube is None:
            return ()
        corners = cube_corners(cube["center"], float(cube["size"]))
        return tuple(
            viosim.Landmark(c[0], c[1], c[2], id=i) for i, c in enumerate(corners)
        )
    return tuple(
        viosim.Landmark(float(r[0]), float(r[1]), float(r[2]), id=i)
        for i, r in enumerate(spec)
    )


def training_maps(cfg: dict, seed: int):
    """Random landmark layouts for oracle data generation."""
    o = cfg["oracle"]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6D617073]))
    maps = []
    for _ in range(int(o["maps"])):
        pts = rng.uniform(-0.5 * o["area"], 0.5 * o["area"], size=(int(o["landmarks_per_map"]), 2))
        zs = rng.uniform(0.0, 1.0, size=int(o["landmarks_per_map"]))
        maps.append(
            [
                viosim.Landmark(p[0], p[1], z, id=i)
                for i, (p, z) in enumerate(zip(pts, zs))
            ]
        )
    return maps


def build_scenario(cfg: dict, mode: str, seed: int, obstacles=None) -> "object":
    from . import simcore

    sc = cfg["scenario"]
    return simcore.Scenario(
        start=State3(*map(float, sc["start"])),
        goal=State2(*map(float, sc["goal"])),
        obstacles=build_obstacles(cfg) if obstacles is None else tuple(obstacles),
        landmarks=build_landmarks(cfg),
        planner=build_planner(cfg),
        tracker=build_tracker(cfg),
        geom=RobotGeometry(
            body_radius=float(sc["body_radius"]),
            confidence_scale=float(sc["confidence_scale"]),
        ),
        mode=mode,
        seed=seed,
        goal_tolerance=float(sc["goal_tolerance"]),
        max_time=float(sc["max_time"]),
        inflation=float(sc["inflation"]),
        sigma_w=float(sc["sigma_w"]),
        sigma_v=float(sc["sigma_v"]),
        sensing_range=float(sc["sensing_range"]),
        fov_half_angle=float(sc["fov_half_angle"]),
        camera_height=float(sc["camera_height"]),
    )
