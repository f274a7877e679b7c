"""End-to-end acceptance gate.

Each test covers one headline requirement and prints a single
``[criterion N] ... PASS``/``FAIL`` line. The expensive pipeline steps
(dataset generation, training, the 20-seed comparison) run once in
module-scoped fixtures and are shared.
"""

import math
import time

import numpy as np
import pytest

from riskmpc import config as cfgmod
from riskmpc import covpred, nlp, perception, simcore, viosim
from riskmpc.cli import main
from riskmpc.geometry import Covariance2, Obstacle, State3, psd_correct


def _verdict(number, label, checks):
    failed = [name for name, ok in checks if not ok]
    line = f"[criterion {number}] {label}: {'FAIL' if failed else 'PASS'}"
    if failed:
        line += f" ({', '.join(failed)})"
    print(line)
    assert not failed, line


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Default-config dataset + trained model, timed for the budgets."""
    root = tmp_path_factory.mktemp("acceptance")
    data_dir = root / "data"
    t0 = time.perf_counter()
    assert main(["gen-data", "--out", str(data_dir)]) == 0
    gen_seconds = time.perf_counter() - t0
    model_dir = root / "model"
    t0 = time.perf_counter()
    assert main(
        ["train", "--dataset", str(data_dir / "dataset.txt"), "--out", str(model_dir)]
    ) == 0
    train_seconds = time.perf_counter() - t0
    return {
        "root": root,
        "dataset": data_dir / "dataset.txt",
        "model": model_dir / "model.npz",
        "history": model_dir / "loss_history.csv",
        "gen_seconds": gen_seconds,
        "train_seconds": train_seconds,
    }


# ---------------------------------------------------------------------------
# 1. Three-mode closed-loop comparison on the default scenario
# ---------------------------------------------------------------------------


def test_criterion_1_three_mode_comparison(pipeline, tmp_path):
    out = tmp_path / "cmp"
    t0 = time.perf_counter()
    code = main(
        ["compare", "--model", str(pipeline["model"]), "--seeds", "20", "--out", str(out)]
    )
    elapsed = time.perf_counter() - t0
    rows = (out / "comparison.csv").read_text().splitlines()[2:]
    stats = {}
    for row in rows:
        mode, _, collision_rate, mean_path, mean_time, _ = row.split(",")
        stats[mode] = (float(collision_rate), float(mean_path), float(mean_time))
    _verdict(
        1,
        "three-mode closed loop, 20 seeds",
        [
            ("compare exit status", code == 0),
            ("risk-averse collision rate = 0", stats["risk-averse"][0] == 0.0),
            ("naive collision rate = 0", stats["naive"][0] == 0.0),
            ("baseline collision rate >= 50%", stats["baseline"][0] >= 0.5),
            ("risk-averse mean path < naive", stats["risk-averse"][1] < stats["naive"][1]),
            ("risk-averse mean time < naive", stats["risk-averse"][2] < stats["naive"][2]),
            ("runtime <= 5 min", elapsed <= 300.0),
        ],
    )


# ---------------------------------------------------------------------------
# 2. Solver correctness on random planning problems
# ---------------------------------------------------------------------------


def _lq_oracle(N, dt, q, r, x0, goal):
    """Finite-horizon LQ via backward Riccati recursion, goal-relative."""
    A = np.eye(2)
    B = dt * np.eye(2)
    Q = q * np.eye(2)
    R = r * np.eye(2)
    P = Q.copy()
    Ks = [None] * N
    for k in range(N - 1, -1, -1):
        K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P = A.T @ P @ (A - B @ K)
        if k >= 1:
            P = P + Q
        Ks[k] = K
    e = np.array(x0) - np.array(goal)
    X, U = [np.array(x0)], []
    for k in range(N):
        u = -Ks[k] @ e
        e = A @ e + B @ u
        U.append(u)
        X.append(e + np.array(goal))
    return np.array(X), np.array(U)


def test_criterion_2_solver_correctness():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    checks = []
    kkt_ok = defect_ok = margin_ok = lq_ok = True
    n_lq = 0
    for trial in range(100):
        N = int(rng.integers(2, 16))
        dt = float(rng.uniform(0.05, 0.2))
        q = float(rng.uniform(0.3, 2.0))
        r = float(rng.uniform(0.05, 0.5))
        x0 = rng.uniform(-3.0, 3.0, size=2)
        goal = rng.uniform(-3.0, 3.0, size=2)
        obstacles = ()
        r_sigma = None
        if trial % 2 == 1:
            r_s = float(rng.uniform(0.3, 0.8))
            while True:  # feasible start: strictly outside the inflated disc
                c = rng.uniform(-3.0, 3.0, size=2)
                radius = float(rng.uniform(0.2, 0.7))
                if np.hypot(*(x0 - c)) > radius + r_s + 0.1:
                    break
            obstacles = (Obstacle(c[0], c[1], radius),)
            r_sigma = np.full(N + 1, r_s)
        p = nlp.build_problem(
            "planning",
            N=N,
            A=np.eye(2),
            B=dt * np.eye(2),
            x0=x0,
            Q=q * np.eye(2),
            R=r * np.eye(2),
            dt=dt,
            slack_weight=1e4,
            goal=goal,
            # Obstacle-free instances stay unconstrained so the closed-form
            # LQ trajectory is the exact optimum to compare against.
            u_limit=np.array([1.5, 1.5]) if obstacles else None,
            obstacles=obstacles,
            r_sigma=r_sigma,
        )
        sol = nlp.solve_sqp(p)
        kkt_ok &= sol.status == "converged" and sol.kkt_residual <= 1e-6
        defects = sol.X[1:] - (sol.X[:-1] + dt * sol.U)
        defect_ok &= float(np.max(np.abs(defects))) <= 1e-8
        defect_ok &= float(np.max(np.abs(sol.X[0] - x0))) <= 1e-8
        for k in range(N + 1):
            eps_k = sol.eps[min(k, N - 1)] if obstacles else 0.0
            for obs in obstacles:
                m = nlp.collision_margin(sol.X[k, 0], sol.X[k, 1], obs, r_sigma[k], 0.0)
                margin_ok &= m <= eps_k + 1e-6
        if not obstacles:
            n_lq += 1
            X_ref, U_ref = _lq_oracle(N, dt, q, r, x0, goal)
            lq_ok &= float(np.max(np.abs(sol.X - X_ref))) <= 1e-6
            lq_ok &= float(np.max(np.abs(sol.U - U_ref))) <= 1e-6
    elapsed = time.perf_counter() - t0
    _verdict(
        2,
        "solver on 100 random planning problems",
        [
            ("KKT residual <= 1e-6", kkt_ok),
            ("dynamics defects <= 1e-8", defect_ok),
            ("collision margins <= eps + 1e-6", margin_ok),
            ("obstacle-free matches closed-form LQ to 1e-6", lq_ok and n_lq == 50),
            ("runtime <= 1 min", elapsed <= 60.0),
        ],
    )


# ---------------------------------------------------------------------------
# 3. BPTT gradients vs central finite differences
# ---------------------------------------------------------------------------


def _param_arrays(params):
    for layer in params.rec:
        yield from layer
    for layer in params.fc:
        yield from layer


def _min_preact(params, spec, inputs):
    """Smallest |pre-activation| over the unrolled sequence (kink guard)."""
    h = [np.zeros(w) for w in spec.recurrent_widths]
    worst = math.inf
    for x in np.asarray(inputs, dtype=float):
        a = x
        for l, (W, Wh, b) in enumerate(params.rec):
            z = W @ a + Wh @ h[l] + b
            worst = min(worst, float(np.min(np.abs(z))))
            h[l] = np.maximum(z, 0.0)
            a = h[l]
        z = params.fc[0][0] @ a + params.fc[0][1]
        worst = min(worst, float(np.min(np.abs(z))))
    return worst


def test_criterion_3_bptt_gradient_check():
    rng = np.random.default_rng(303)
    step = 1e-6
    all_ok = True
    checked = 0
    while checked < 10:
        widths = tuple(int(rng.integers(2, 6)) for _ in range(int(rng.integers(1, 3))))
        spec = covpred.NetSpec(
            recurrent_widths=widths,
            fc_width=int(rng.integers(2, 6)),
            input_dim=int(rng.integers(2, 6)),
            output_dim=int(rng.integers(1, 4)),
        )
        params = covpred.init_params(spec, rng)
        if covpred.flatten_params(params).size > 500:
            continue
        T = int(rng.integers(2, 6))
        batch = [
            (rng.normal(size=(T, spec.input_dim)), rng.normal(size=(T, spec.output_dim)))
        ]
        if _min_preact(params, spec, batch[0][0]) < 1e-5:
            continue  # reject ReLU-kink points
        grec, gfc, _ = covpred.bptt_grad(params, spec, batch)
        analytic = np.concatenate(
            [a.ravel() for layer in grec for a in layer]
            + [a.ravel() for layer in gfc for a in layer]
        )
        numeric = np.empty_like(analytic)
        i = 0
        for arr in _param_arrays(params):
            flat = arr.ravel()
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                lp = covpred.mse_loss(params, spec, batch)
                flat[j] = orig - step
                lm = covpred.mse_loss(params, spec, batch)
                flat[j] = orig
                numeric[i] = (lp - lm) / (2.0 * step)
                i += 1
        rel = np.linalg.norm(analytic - numeric) / max(
            np.linalg.norm(analytic), np.linalg.norm(numeric)
        )
        all_ok &= rel <= 1e-4
        checked += 1
    _verdict(
        3,
        "BPTT vs central differences on 10 random nets",
        [("relative error <= 1e-4", all_ok)],
    )


# ---------------------------------------------------------------------------
# 4. Camera unprojection round trip and cube-corner obstacle radius
# ---------------------------------------------------------------------------


def _random_rotation(rng):
    M = rng.normal(size=(3, 3))
    Q, R = np.linalg.qr(M)
    Q = Q * np.sign(np.diag(R))
    if np.linalg.det(Q) < 0.0:
        Q[:, 2] = -Q[:, 2]
    return Q


def test_criterion_4_unprojection_round_trip():
    rng = np.random.default_rng(404)
    round_trip_ok = True
    done = 0
    while done < 1000:
        K = np.array(
            [
                [rng.uniform(300, 900), 0.0, rng.uniform(200, 500)],
                [0.0, rng.uniform(300, 900), rng.uniform(150, 400)],
                [0.0, 0.0, 1.0],
            ]
        )
        cam = perception.CameraModel(
            K=K, R_bc=_random_rotation(rng), T_bc=rng.normal(size=3)
        )
        pose = perception.BodyPose(
            R_sb=_random_rotation(rng), T_sb=rng.normal(scale=2.0, size=3)
        )
        X_s = rng.normal(scale=3.0, size=3)
        try:
            obs = perception.project(X_s, cam, pose)
        except ValueError:
            continue  # behind the camera: not a valid sample
        if obs.depth <= 1e-3:
            continue  # grazing the image plane: not a valid sample
        back = perception.unproject(obs, cam, pose)
        round_trip_ok &= float(np.max(np.abs(back - X_s))) <= 1e-9
        done += 1
    corners = cfgmod.cube_corners([0.0, 0.0, 0.5], 1.0)
    disc = perception.to_obstacle(corners)
    _verdict(
        4,
        "project/unproject identity and cube-corner radius",
        [
            ("1000-sample round trip to 1e-9", round_trip_ok),
            (
                "unit-cube radius = sqrt(3)/2 to 1e-12",
                abs(disc.radius - math.sqrt(3.0) / 2.0) <= 1e-12,
            ),
        ],
    )


# ---------------------------------------------------------------------------
# 5. EKF closed forms
# ---------------------------------------------------------------------------


def test_criterion_5_ekf_closed_forms():
    from riskmpc.geometry import Control2

    sigma_w, sigma_v, dt = 0.05, 0.1, 0.1
    p0 = 1e-4
    state = viosim.EkfState(
        mean=np.zeros(2),
        P=Covariance2(p0, 0.0, 0.0, p0),
        sigma_w=sigma_w,
        sigma_v=sigma_v,
        sensing_range=5.0,
        fov_half_angle=math.pi / 2,
    )
    rng = np.random.default_rng(505)
    dead_ok = True
    s = state
    for k in range(1, 51):
        s = viosim.ekf_step(s, Control2(0.3, -0.1), dt, [], rng)
        expected = p0 + k * sigma_w**2 * dt**2
        P = s.P.as_matrix()
        if k <= 10:
            # Exact while the accumulated sum is exactly representable;
            # past ~k=17 sequential accumulation differs from the one-shot
            # closed form by 1 ulp, which is inherent to floats.
            dead_ok &= P[0, 0] == expected and P[1, 1] == expected
        else:
            dead_ok &= abs(P[0, 0] - expected) <= 16.0 * np.spacing(expected)
            dead_ok &= abs(P[1, 1] - expected) <= 16.0 * np.spacing(expected)
        dead_ok &= P[0, 1] == 0.0 and P[1, 0] == 0.0

    # One visible landmark: with isotropic P the matrix recursion reduces
    # per axis to the scalar Kalman filter p' = (1-K)^2 (p+q) + K^2 r.
    lm = [viosim.Landmark(1.0, 0.0, 0.3, id=0)]
    s = state
    p_scalar = p0
    q = sigma_w**2 * dt**2
    r = sigma_v**2
    scalar_ok = True
    for _ in range(50):
        s = viosim.ekf_step(s, Control2(0.1, 0.0), dt, lm, rng)
        pred = p_scalar + q
        K = pred / (pred + r)
        p_scalar = (1.0 - K) ** 2 * pred + K**2 * r
        P = s.P.as_matrix()
        scalar_ok &= abs(P[0, 0] - p_scalar) <= 1e-12 * max(1.0, p_scalar)
        scalar_ok &= abs(P[1, 1] - p_scalar) <= 1e-12 * max(1.0, p_scalar)
    _verdict(
        5,
        "EKF covariance closed forms",
        [
            ("dead reckoning P = P0 + k sw^2 dt^2 I exactly", dead_ok),
            ("one-landmark update matches scalar Kalman to 1e-12", scalar_ok),
        ],
    )


# ---------------------------------------------------------------------------
# 6. Learnability on the default dataset
# ---------------------------------------------------------------------------


def test_criterion_6_learnability(pipeline):
    lines = pipeline["history"].read_text().splitlines()[2:]
    history = [tuple(float(v) for v in line.split(",")[1:]) for line in lines]
    train0 = history[0][0]
    best_epoch = min(range(len(history)), key=lambda e: history[e][0])
    best_train, best_val = history[best_epoch]
    _verdict(
        6,
        "default-dataset training, 100 epochs",
        [
            ("100 epochs recorded", len(history) == 100),
            ("training MSE reduced >= 10x", history[-1][0] <= train0 / 10.0),
            ("validation within 2x training at best epoch", best_val <= 2.0 * best_train),
            ("runtime <= 10 min", pipeline["train_seconds"] <= 600.0),
        ],
    )


# ---------------------------------------------------------------------------
# 7. Feature visibility lowers the predicted covariance
# ---------------------------------------------------------------------------


def test_criterion_7_visibility_lowers_predicted_covariance(pipeline):
    spec, params = covpred.load_checkpoint(pipeline["model"])
    rng = np.random.default_rng(707)

    def mean_trace(with_landmarks):
        traces = []
        for _ in range(100):
            robot = np.array([*rng.uniform(-4.0, 4.0, size=2), 0.3])
            feats = []
            if with_landmarks:
                feats = [
                    robot + np.array([*rng.uniform(-1.5, 1.5, size=2), rng.uniform(-0.2, 0.5)])
                    for _ in range(5)
                ]
            inp = covpred.build_input(robot, covpred.nearest_five(robot, feats, 5.0))
            out, _ = covpred.predict(params, spec, inp[None, :])
            cov = psd_correct(Covariance2.from_flat(out[0]))
            traces.append(cov.sxx + cov.syy)
        return float(np.mean(traces))

    near = mean_trace(True)
    none = mean_trace(False)
    _verdict(
        7,
        "predicted covariance vs landmark visibility",
        [("mean trace with 5 nearby landmarks < with none", near < none)],
    )


# ---------------------------------------------------------------------------
# 8. Bit-identical reproducibility
# ---------------------------------------------------------------------------


def test_criterion_8_determinism(pipeline, tmp_path):
    # Dataset: same config + seed -> bit-identical file.
    again = tmp_path / "data2"
    assert main(["gen-data", "--out", str(again)]) == 0
    data_same = (
        (again / "dataset.txt").read_bytes() == pipeline["dataset"].read_bytes()
    )

    # Checkpoint: repeat a (shortened) training run twice with one config.
    cfg = tmp_path / "short.yaml"
    cfg.write_text("net:\n  epochs: 3\n")
    models = []
    for name in ("m1", "m2"):
        out = tmp_path / name
        assert main(
            [
                "train",
                "--config",
                str(cfg),
                "--dataset",
                str(pipeline["dataset"]),
                "--out",
                str(out),
            ]
        ) == 0
        models.append((out / "model.npz").read_bytes())
    model_same = models[0] == models[1]

    # Episode logs: same config + seed -> bit-identical log.
    logs = []
    for name in ("e1", "e2"):
        out = tmp_path / name
        code = main(["run", "--mode", "naive", "--out", str(out)])
        assert code in (0, 1)
        logs.append((out / "episode.csv").read_bytes())
    log_same = logs[0] == logs[1]

    _verdict(
        8,
        "bit-identical reproducibility",
        [
            ("dataset file", data_same),
            ("training checkpoint", model_same),
            ("episode log", log_same),
        ],
    )
