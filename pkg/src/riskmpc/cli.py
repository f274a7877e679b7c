"""Command-line front end: data generation, training, episode runs, and
the three-mode comparison, all reproducible from a config + seed.

Exit status: 0 success, 1 domain failure (collision, timeout, training
divergence), 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import math
import os
import sys

import numpy as np

from . import config as cfgmod
from . import covpred, nlp, perception, simcore, viosim
from .config import ConfigError
from .geometry import State3
from .simcore import _atomic_write

SCHEMA = "riskmpc-table v1"


def _prepare_out(cfg: dict, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    _atomic_write(
        os.path.join(out_dir, "resolved_config.yaml"), cfgmod.dump_config(cfg)
    )


def _apply_solver_tolerances(cfg: dict) -> None:
    nlp.KKT_TOL = float(cfg["solver"]["kkt_tol"])
    nlp.DEFECT_TOL = float(cfg["solver"]["defect_tol"])


def _net_spec(cfg: dict) -> covpred.NetSpec:
    w = int(cfg["net"]["hidden_width"])
    return covpred.NetSpec(recurrent_widths=(w,) * 5, fc_width=w)


def _load_model(path: str):
    if not os.path.exists(path):
        raise ConfigError(f"model checkpoint not found: {path}")
    return covpred.load_checkpoint(path)


def cmd_gen_data(cfg: dict, out_dir: str) -> int:
    seed = int(cfg["seed"])
    o = cfg["oracle"]
    if int(o["episodes_per_map"]) < 1 or int(o["episode_length"]) < 1:
        raise ConfigError("empty dataset: episode counts must be positive")
    maps = cfgmod.training_maps(cfg, seed)
    sc = cfg["scenario"]
    ds = viosim.gen_dataset(
        maps,
        episodes_per_map=int(o["episodes_per_map"]),
        episode_length=int(o["episode_length"]),
        seed=seed,
        dt_plan=float(cfg["planner"]["dt_plan"]),
        sigma_w=float(sc["sigma_w"]),
        sigma_v=float(sc["sigma_v"]),
        sensing_range=float(sc["sensing_range"]),
        fov_half_angle=float(sc["fov_half_angle"]),
        camera_height=float(sc["camera_height"]),
        area=float(o["area"]),
        u_max=float(cfg["planner"]["u_limit"]),
    )
    path = os.path.join(out_dir, "dataset.txt")
    viosim.save_dataset(path, ds)
    with open(path, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    print(f"wrote {ds.n_records()} records across {len(ds.episodes)} episodes")
    print(f"dataset sha256 {digest}")
    return 0


def cmd_train(cfg: dict, dataset_path: str, out_dir: str) -> int:
    ds = viosim.load_dataset(dataset_path)
    net = cfg["net"]
    spec = _net_spec(cfg)
    try:
        params, history = covpred.train(
            ds.sequences(),
            spec,
            epochs=int(net["epochs"]),
            step_size=float(net["step_size"]),
            seed=int(cfg["seed"]),
            momentum=float(net["momentum"]),
            clip_norm=float(net["clip_norm"]),
            val_fraction=float(net["val_fraction"]),
        )
    except covpred.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    covpred.save_checkpoint(os.path.join(out_dir, "model.npz"), spec, params)
    lines = [SCHEMA, "epoch,train_mse,val_mse"]
    for e, (tr, va) in enumerate(history):
        lines.append(f"{e},{tr!r},{va!r}")
    _atomic_write(os.path.join(out_dir, "loss_history.csv"), "\n".join(lines) + "\n")
    print(
        f"trained {len(history)} epochs: train MSE {history[0][0]:.3e} -> "
        f"{history[-1][0]:.3e}"
    )
    return 0


def _file_obstacles(cfg: dict):
    sc = cfg["scenario"]
    if sc["feature_file"] is None or sc["box_file"] is None:
        return None
    cam = cfg["camera"]
    K = np.array(
        [
            [float(cam["fx"]), 0.0, float(cam["cx"])],
            [0.0, float(cam["fy"]), float(cam["cy"])],
            [0.0, 0.0, 1.0],
        ]
    )
    # camera z-forward / x-right / y-down mounted looking along body +x
    R_bc = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    camera = perception.CameraModel(K=K, R_bc=R_bc, T_bc=np.zeros(3))
    start = State3(*map(float, sc["start"]))
    c, s = math.cos(start.psi), math.sin(start.psi)
    R_sb = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    pose = perception.BodyPose(
        R_sb=R_sb, T_sb=np.array([start.x, start.y, float(sc["camera_height"])])
    )
    return perception.obstacles_from_files(
        sc["feature_file"], sc["box_file"], camera, pose
    )


def _run_one(cfg: dict, mode: str, seed: int, net):
    scenario = cfgmod.build_scenario(cfg, mode, seed, obstacles=_file_obstacles(cfg))
    return simcore.run_episode(scenario, net)


def cmd_run(cfg: dict, mode: str, model_path, out_dir: str) -> int:
    net = None
    if mode == "risk-averse":
        if model_path is None:
            raise ConfigError("risk-averse mode requires --model")
        net = _load_model(model_path)
    seed = int(cfg["seed"])
    log = _run_one(cfg, mode, seed, net)
    simcore.save_log(os.path.join(out_dir, "episode.csv"), log)
    extra = {"mode": mode, "seed": seed}
    if mode == "naive":
        extra["effective_radius"] = (
            float(cfg["scenario"]["inflation"]) * float(cfg["scenario"]["body_radius"])
        )
    simcore.save_summary(os.path.join(out_dir, "summary.txt"), log, extra=extra)
    m = simcore.metrics(log)
    print(
        f"mode={mode} seed={seed} outcome={m.outcome} "
        f"path={m.path_length:.3f} m time={m.time_to_goal:.2f} s "
        f"min_clearance={m.min_clearance:.3f} m"
    )
    return 0 if m.outcome == "reached" else 1


def cmd_compare(cfg: dict, model_path, seeds: int, out_dir: str) -> int:
    if model_path is None:
        raise ConfigError("compare requires --model for the risk-averse mode")
    net = _load_model(model_path)
    base_seed = int(cfg["seed"])
    table = [SCHEMA, "mode,seeds,collision_rate,mean_path_length,mean_time_to_goal,min_clearance"]
    traj = [SCHEMA, "mode,seed,t,x,y"]
    failures = 0
    for mode in simcore.MODES:
        paths, times, clears, collisions = [], [], [], 0
        for i in range(seeds):
            log = _run_one(cfg, mode, base_seed + i, net if mode == "risk-averse" else None)
            m = simcore.metrics(log)
            collisions += int(m.collided)
            failures += log.solver_failures
            if m.outcome == "reached":
                paths.append(m.path_length)
                times.append(m.time_to_goal)
            clears.append(m.min_clearance)
            for r in log.records:
                traj.append(
                    f"{mode},{base_seed + i},{r.t!r},{r.true_state.x!r},{r.true_state.y!r}"
                )
        mean_path = float(np.mean(paths)) if paths else math.nan
        mean_time = float(np.mean(times)) if times else math.nan
        table.append(
            f"{mode},{seeds},{collisions / seeds!r},{mean_path!r},{mean_time!r},"
            f"{float(np.min(clears))!r}"
        )
        print(
            f"{mode:12s} collisions {collisions}/{seeds} "
            f"mean path {mean_path:.3f} m mean time {mean_time:.2f} s"
        )
    _atomic_write(os.path.join(out_dir, "comparison.csv"), "\n".join(table) + "\n")
    _atomic_write(os.path.join(out_dir, "trajectories.csv"), "\n".join(traj) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="riskmpc",
        description="Risk-averse MPC path planning: data generation, "
        "covariance-predictor training, and closed-loop evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML configuration file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-data", help="generate a synthetic training dataset")
    common(p)

    p = sub.add_parser("train", help="train the covariance predictor")
    common(p)
    p.add_argument("--dataset", required=True, help="dataset file from gen-data")

    p = sub.add_parser("run", help="run one closed-loop episode")
    common(p)
    p.add_argument("--mode", choices=simcore.MODES, required=True)
    p.add_argument("--model", help="model checkpoint (risk-averse mode)")

    p = sub.add_parser("compare", help="run all three modes over a seed set")
    common(p)
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--seeds", type=int, default=20, help="number of seeds")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = {} if args.seed is None else {"seed": args.seed}
        cfg = cfgmod.load_config(args.config, overrides)
        _apply_solver_tolerances(cfg)
        _prepare_out(cfg, args.out)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.dataset, args.out)
        if args.command == "run":
            return cmd_run(cfg, args.mode, args.model, args.out)
        if args.command == "compare":
            return cmd_compare(cfg, args.model, args.seeds, args.out)
        raise AssertionError(args.command)
    except (ConfigError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
