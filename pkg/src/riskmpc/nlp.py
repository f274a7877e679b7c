"""Multiple-shooting trajectory optimization for both MPC phases.

States and controls over the horizon are stacked into one dense decision
vector linked by per-step dynamics equalities. The planning phase adds
nonconvex circular collision constraints with a shared per-step slack;
these are handled by sequential quadratic programming: the collision
boundary is re-linearized each iteration (the linearization is an inner
approximation, so QP-feasible iterates are feasible for the true
constraints) and steps are accepted through an L1-merit backtracking
line search. The inner convex QP is solved with an equality-only KKT
fast path and a dense interior-point solve polished onto the detected
active set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .geometry import Obstacle, collision_margin

KKT_TOL = 1e-6
DEFECT_TOL = 1e-8
QP_TOL = 1e-8
MAX_SQP_ITERS = 50
LINESEARCH_CONTRACTION = 0.5


# ---------------------------------------------------------------------------
# Convex QP layer
# ---------------------------------------------------------------------------


@dataclass
class QpSolution:
    x: np.ndarray
    lam_eq: np.ndarray
    mu_in: np.ndarray
    objective: float
    kkt_residual: float
    status: str  # converged | max-iterations | infeasible


def _kkt_residual_qp(H, g, A_eq, b_eq, A_in, b_in, x, lam, mu) -> float:
    """Max-norm KKT residual of a convex QP (min 1/2 x'Hx + g'x)."""
    r = H @ x + g
    if A_eq.shape[0]:
        r = r + A_eq.T @ lam
    if A_in.shape[0]:
        r = r + A_in.T @ mu
    res = float(np.max(np.abs(r))) if r.size else 0.0
    if A_eq.shape[0]:
        res = max(res, float(np.max(np.abs(A_eq @ x - b_eq))))
    if A_in.shape[0]:
        s = A_in @ x - b_in
        res = max(res, float(max(0.0, np.max(s))))
        res = max(res, float(max(0.0, -np.min(mu))))
        res = max(res, float(np.max(np.abs(mu * s))))
    return res


def _solve_kkt(H, g, A, b):
    """Solve the equality-constrained QP [H A'; A 0] [x; lam] = [-g; b]."""
    n = H.shape[0]
    m = A.shape[0]
    if m == 0:
        try:
            x = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            x = np.linalg.lstsq(H, -g, rcond=None)[0]
        return x, np.zeros(0)
    K = np.zeros((n + m, n + m))
    K[:n, :n] = H
    K[:n, n:] = A.T
    K[n:, :n] = A
    rhs = np.concatenate([-g, b])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        # Degenerate working set: a regularized solve is cheap and the
        # caller always re-checks the KKT residual of the result.
        K[np.diag_indices_from(K)] += 1e-10
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:n], sol[n:]


def _cvxopt_qp(H, g, A_eq, b_eq, A_in, b_in):
    from cvxopt import matrix, solvers

    opts = {
        "show_progress": False,
        "abstol": 1e-10,
        "reltol": 1e-10,
        "feastol": 1e-10,
        "maxiters": 200,
    }
    n = H.shape[0]
    P = matrix(H)
    q = matrix(g)
    G = matrix(A_in) if A_in.shape[0] else matrix(np.zeros((1, n)))
    h = matrix(b_in) if A_in.shape[0] else matrix(np.ones(1))
    kwargs = {}
    if A_eq.shape[0]:
        kwargs["A"] = matrix(A_eq)
        kwargs["b"] = matrix(b_eq)
    try:
        sol = solvers.qp(P, q, G, h, options=opts, **kwargs)
    except (ValueError, ArithmeticError):
        # Singular KKT system (e.g. cost-free variables pinned only by
        # equalities): retry with a tiny regularization; the active-set
        # polish afterwards uses the exact matrices.
        P = matrix(H + 1e-9 * np.eye(n))
        try:
            sol = solvers.qp(P, q, G, h, options=opts, **kwargs)
        except (ValueError, ArithmeticError):
            # No solvable KKT system even when regularized: report the
            # problem as infeasible rather than crashing the caller.
            zeros = np.zeros(n)
            return (
                zeros,
                np.zeros(A_eq.shape[0]) if A_eq.shape[0] else np.zeros(0),
                np.zeros(A_in.shape[0]) if A_in.shape[0] else np.zeros(0),
                "primal infeasible",
            )
    x = np.array(sol["x"]).ravel()
    lam = np.array(sol["y"]).ravel() if A_eq.shape[0] else np.zeros(0)
    mu = np.array(sol["z"]).ravel() if A_in.shape[0] else np.zeros(0)
    return x, lam, mu, sol["status"]


def solve_qp(H, g, A_eq=None, b_eq=None, A_in=None, b_in=None) -> QpSolution:
    """Solve min 1/2 x'Hx + g'x s.t. A_eq x = b_eq, A_in x <= b_in.

    H must be positive semidefinite. The solution is polished onto the
    active set so that the KKT residual reaches ~machine precision on
    non-degenerate problems.
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float).ravel()
    n = H.shape[0]
    A_eq = np.zeros((0, n)) if A_eq is None else np.asarray(A_eq, dtype=float)
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float).ravel()
    A_in = np.zeros((0, n)) if A_in is None else np.asarray(A_in, dtype=float)
    b_in = np.zeros(0) if b_in is None else np.asarray(b_in, dtype=float).ravel()
    m_in = A_in.shape[0]

    def finish(x, lam, mu, status_hint=None):
        res = _kkt_residual_qp(H, g, A_eq, b_eq, A_in, b_in, x, lam, mu)
        obj = float(0.5 * x @ H @ x + g @ x)
        status = "converged" if res <= QP_TOL else (status_hint or "max-iterations")
        return QpSolution(x, lam, mu, obj, res, status)

    def active_set(active, best):
        seen = set()
        for _ in range(3 * m_in + 10):
            key = frozenset(active)
            if key in seen:
                # Working-set cycle: this simple add/drop scheme will not
                # terminate; let the interior-point fallback handle it.
                return best
            seen.add(key)
            act = sorted(active)
            A_w = np.vstack([A_eq, A_in[act]]) if act else A_eq
            b_w = np.concatenate([b_eq, b_in[act]]) if act else b_eq
            x, lam_all = _solve_kkt(H, g, A_w, b_w)
            lam = lam_all[: A_eq.shape[0]]
            mu_act = lam_all[A_eq.shape[0] :]
            mu = np.zeros(m_in)
            mu[act] = mu_act
            viol = A_in @ x - b_in
            viol[act] = 0.0
            entering = np.nonzero(viol > 1e-10)[0]
            if entering.size:
                active.update(entering.tolist())
                continue
            if act and np.min(mu_act) < -1e-10:
                for i in np.nonzero(mu_act < -1e-10)[0]:
                    active.discard(act[int(i)])
                continue
            cand = finish(x, lam, mu)
            if best is None or cand.kkt_residual <= best.kkt_residual:
                return cand
            return best
        return best

    # Fast path: ignore inequalities, check them afterwards.
    x, lam = _solve_kkt(H, g, A_eq, b_eq)
    viol0 = A_in @ x - b_in if m_in else np.zeros(0)
    if m_in == 0 or np.all(viol0 <= 1e-10):
        return finish(x, lam, np.zeros(m_in))

    # Cheap second chance: a plain primal active-set pass seeded with the
    # violated rows. On the small, well-conditioned subproblems the MPC
    # generates this almost always terminates in a few dense solves.
    cand = active_set(set(np.nonzero(viol0 > 1e-10)[0].tolist()), None)
    if cand is not None and cand.kkt_residual <= QP_TOL:
        return cand

    x_ip, lam_ip, mu_ip, ip_status = _cvxopt_qp(H, g, A_eq, b_eq, A_in, b_in)
    if ip_status not in ("optimal", "unknown"):
        return finish(x_ip, lam_ip, mu_ip, "infeasible")

    # Active-set polish seeded by the interior-point solution.
    slack = b_in - A_in @ x_ip
    active = set(np.nonzero((mu_ip > 1e-7) | (slack < 1e-7))[0].tolist())
    best = active_set(active, finish(x_ip, lam_ip, mu_ip))
    return best


# ---------------------------------------------------------------------------
# Problem description
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NlpProblem:
    """One multiple-shooting instance for a single MPC solve."""

    phase: str  # "planning" | "tracking"
    N: int
    nx: int
    nu: int
    A: np.ndarray
    B: np.ndarray
    x0: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    dt: float
    slack_weight: float = 0.0
    goal: Optional[np.ndarray] = None
    x_ref: Optional[np.ndarray] = None  # (N+1, nx)
    u_ref: Optional[np.ndarray] = None  # (N, nu)
    x_limit: Optional[np.ndarray] = None  # (nx,) absolute-value bounds
    u_limit: Optional[np.ndarray] = None  # (nu,)
    alpha_limit: Optional[np.ndarray] = None  # (nu,)
    body_limits: Optional[np.ndarray] = None  # (vx_lim, vy_lim), tracking only
    body_angles: Optional[np.ndarray] = None  # (N,) frozen per-step rotation
    obstacles: tuple = ()
    r_sigma: Optional[np.ndarray] = None  # (N+1,)

    @property
    def has_slack(self) -> bool:
        return self.phase == "planning" and len(self.obstacles) > 0

    @property
    def n_slack(self) -> int:
        return self.N if self.has_slack else 0

    @property
    def n_var(self) -> int:
        return self.nx * (self.N + 1) + self.nu * self.N + self.n_slack

    def x_slice(self, k: int) -> slice:
        return slice(self.nx * k, self.nx * (k + 1))

    def u_slice(self, k: int) -> slice:
        off = self.nx * (self.N + 1)
        return slice(off + self.nu * k, off + self.nu * (k + 1))

    def eps_index(self, k: int) -> int:
        # The terminal state shares the last slack.
        return self.nx * (self.N + 1) + self.nu * self.N + min(k, self.N - 1)


@dataclass
class NlpSolution:
    X: np.ndarray  # (N+1, nx)
    U: np.ndarray  # (N, nu)
    eps: np.ndarray  # (N,)
    objective: float
    kkt_residual: float
    status: str  # converged | max-iterations | infeasible-relaxed
    iterations: int = 0


def _check_limits(name, v, dim):
    if v is None:
        return None
    v = np.asarray(v, dtype=float).ravel()
    if v.shape != (dim,):
        raise ValueError(f"{name} must have {dim} entries, got {v.shape}")
    if np.any(v < 0.0):
        raise ValueError(f"{name} entries must be non-negative")
    return v


def build_problem(
    phase: str,
    N: int,
    A: np.ndarray,
    B: np.ndarray,
    x0,
    Q: np.ndarray,
    R: np.ndarray,
    dt: float,
    slack_weight: float = 0.0,
    goal=None,
    x_ref=None,
    u_ref=None,
    x_limit=None,
    u_limit=None,
    alpha_limit=None,
    body_limits=None,
    body_angles=None,
    obstacles: Sequence[Obstacle] = (),
    r_sigma=None,
) -> NlpProblem:
    """Validate dimensions and assemble an NlpProblem.

    The planning phase activates dynamics, bound, acceleration, and
    collision constraints; the tracking phase swaps the collision
    constraints for body-frame velocity limits.
    """
    if phase not in ("planning", "tracking"):
        raise ValueError(f"unknown phase {phase!r}")
    if N < 1:
        raise ValueError("horizon must be at least 1")
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    nx, nu = B.shape
    if A.shape != (nx, nx):
        raise ValueError("A/B dimension mismatch")
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.shape != (nx,):
        raise ValueError("x0 dimension mismatch")
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    if Q.shape != (nx, nx) or R.shape != (nu, nu):
        raise ValueError("Q/R dimension mismatch")
    for name, M in (("Q", Q), ("R", R)):
        if not np.allclose(M, M.T):
            raise ValueError(f"{name} must be symmetric")
        if np.any(np.diag(M) < 0.0):
            raise ValueError(f"{name} diagonal must be non-negative")
    if dt <= 0.0:
        raise ValueError("dt must be positive")

    x_limit = _check_limits("x_limit", x_limit, nx)
    u_limit = _check_limits("u_limit", u_limit, nu)
    alpha_limit = _check_limits("alpha_limit", alpha_limit, nu)

    if phase == "planning":
        if goal is None:
            raise ValueError("planning phase requires a goal")
        goal = np.asarray(goal, dtype=float).ravel()
        if goal.shape != (nx,):
            raise ValueError("goal dimension mismatch")
        if body_limits is not None:
            raise ValueError("body-frame limits are a tracking-phase constraint")
        if slack_weight < 0.0:
            raise ValueError("slack weight must be non-negative")
        obstacles = tuple(obstacles)
        if obstacles:
            if r_sigma is None:
                raise ValueError("obstacles require an r_sigma horizon")
            r_sigma = np.asarray(r_sigma, dtype=float).ravel()
            if r_sigma.shape != (N + 1,):
                raise ValueError(f"r_sigma must have length N+1={N + 1}")
        x_ref = u_ref = None
    else:
        if x_ref is None or u_ref is None:
            raise ValueError("tracking phase requires state and control references")
        x_ref = np.asarray(x_ref, dtype=float)
        u_ref = np.asarray(u_ref, dtype=float)
        if x_ref.shape != (N + 1, nx) or u_ref.shape != (N, nu):
            raise ValueError("reference dimension mismatch")
        if obstacles:
            raise ValueError("collision constraints are a planning-phase constraint")
        if body_limits is not None:
            body_limits = _check_limits("body_limits", body_limits, 2)
            if body_angles is None:
                raise ValueError("body-frame limits require per-step angles")
            body_angles = np.asarray(body_angles, dtype=float).ravel()
            if body_angles.shape != (N,):
                raise ValueError("body_angles must have length N")
        goal = None
        obstacles = ()
        r_sigma = None

    return NlpProblem(
        phase=phase,
        N=N,
        nx=nx,
        nu=nu,
        A=A,
        B=B,
        x0=x0,
        Q=Q,
        R=R,
        dt=dt,
        slack_weight=float(slack_weight),
        goal=goal,
        x_ref=x_ref,
        u_ref=u_ref,
        x_limit=x_limit,
        u_limit=u_limit,
        alpha_limit=alpha_limit,
        body_limits=body_limits,
        body_angles=body_angles,
        obstacles=obstacles,
        r_sigma=r_sigma,
    )


def linearize_collision(x_k: float, y_k: float, obstacle: Obstacle, r_sigma_k: float):
    """First-order expansion of the collision margin at (x_k, y_k).

    Returns (gradient wrt position, margin value at the point, degenerate
    flag). At the obstacle center the distance gradient is undefined; a
    fixed fallback is returned that pushes the expansion point toward +x.
    """
    dx = x_k - obstacle.cx
    dy = y_k - obstacle.cy
    d = math.hypot(dx, dy)
    if d < 1e-12:
        grad = np.array([-1.0, 0.0])
        const = r_sigma_k + obstacle.radius
        return grad, const, True
    grad = np.array([-dx / d, -dy / d])
    const = -d + r_sigma_k + obstacle.radius
    return grad, const, False


# ---------------------------------------------------------------------------
# SQP
# ---------------------------------------------------------------------------


def _cost_terms(p: NlpProblem):
    """Assemble H, g, c so that the objective is 1/2 z'Hz + g'z + c."""
    n = p.n_var
    H = np.zeros((n, n))
    g = np.zeros(n)
    c = 0.0
    if p.phase == "planning":
        for k in range(1, p.N + 1):
            sl = p.x_slice(k)
            H[sl, sl] += 2.0 * p.Q
            g[sl] += -2.0 * (p.Q @ p.goal)
            c += float(p.goal @ p.Q @ p.goal)
        for k in range(p.N):
            sl = p.u_slice(k)
            H[sl, sl] += 2.0 * p.R
        for k in range(p.n_slack):
            i = p.nx * (p.N + 1) + p.nu * p.N + k
            H[i, i] += 2.0 * p.slack_weight
    else:
        for k in range(p.N + 1):
            sl = p.x_slice(k)
            r = p.x_ref[k]
            H[sl, sl] += 2.0 * p.Q
            g[sl] += -2.0 * (p.Q @ r)
            c += float(r @ p.Q @ r)
        for k in range(p.N):
            sl = p.u_slice(k)
            r = p.u_ref[k]
            H[sl, sl] += 2.0 * p.R
            g[sl] += -2.0 * (p.R @ r)
            c += float(r @ p.R @ r)
    return H, g, c


def _equality_rows(p: NlpProblem):
    n = p.n_var
    rows = np.zeros((p.nx * (p.N + 1), n))
    rhs = np.zeros(p.nx * (p.N + 1))
    rows[: p.nx, p.x_slice(0)] = np.eye(p.nx)
    rhs[: p.nx] = p.x0
    for k in range(p.N):
        r = slice(p.nx * (k + 1), p.nx * (k + 2))
        rows[r, p.x_slice(k + 1)] = np.eye(p.nx)
        rows[r, p.x_slice(k)] = -p.A
        rows[r, p.u_slice(k)] = -p.B
    return rows, rhs


def _static_inequality_rows(p: NlpProblem):
    n = p.n_var
    rows, rhs = [], []

    def add(vec, bound):
        rows.append(vec)
        rhs.append(bound)

    if p.x_limit is not None:
        for k in range(1, p.N + 1):
            for j in range(p.nx):
                if not np.isfinite(p.x_limit[j]):
                    continue
                for s in (1.0, -1.0):
                    v = np.zeros(n)
                    v[p.nx * k + j] = s
                    add(v, p.x_limit[j])
    if p.u_limit is not None:
        for k in range(p.N):
            for j in range(p.nu):
                if not np.isfinite(p.u_limit[j]):
                    continue
                for s in (1.0, -1.0):
                    v = np.zeros(n)
                    v[p.u_slice(k).start + j] = s
                    add(v, p.u_limit[j])
    if p.alpha_limit is not None:
        for k in range(p.N - 1):
            for j in range(p.nu):
                if not np.isfinite(p.alpha_limit[j]):
                    continue
                for s in (1.0, -1.0):
                    v = np.zeros(n)
                    v[p.u_slice(k + 1).start + j] = s
                    v[p.u_slice(k).start + j] = -s
                    add(v, p.alpha_limit[j] * p.dt)
    if p.body_limits is not None:
        for k in range(p.N):
            th = p.body_angles[k]
            rot = np.array(
                [[math.cos(th), math.sin(th)], [-math.sin(th), math.cos(th)]]
            )
            for axis in range(2):
                if not np.isfinite(p.body_limits[axis]):
                    continue
                for s in (1.0, -1.0):
                    v = np.zeros(n)
                    v[p.u_slice(k).start + 0] = s * rot[axis, 0]
                    v[p.u_slice(k).start + 1] = s * rot[axis, 1]
                    add(v, p.body_limits[axis])
    for k in range(p.n_slack):
        v = np.zeros(n)
        v[p.nx * (p.N + 1) + p.nu * p.N + k] = -1.0
        add(v, 0.0)
    if rows:
        return np.array(rows), np.array(rhs)
    return np.zeros((0, n)), np.zeros(0)


def _collision_rows(p: NlpProblem, z: np.ndarray):
    """Linearized collision constraints at the current iterate."""
    n = p.n_var
    rows, rhs = [], []
    for k in range(p.N + 1):
        sl = p.x_slice(k)
        pos = z[sl][:2]
        for obs in p.obstacles:
            grad, const, _ = linearize_collision(pos[0], pos[1], obs, p.r_sigma[k])
            v = np.zeros(n)
            v[sl.start : sl.start + 2] = grad
            v[p.eps_index(k)] = -1.0
            rows.append(v)
            rhs.append(float(grad @ pos) - const)
    if rows:
        return np.array(rows), np.array(rhs)
    return np.zeros((0, n)), np.zeros(0)


def _true_collision_margins(p: NlpProblem, z: np.ndarray) -> np.ndarray:
    vals = []
    for k in range(p.N + 1):
        pos = z[p.x_slice(k)][:2]
        eps_k = z[p.eps_index(k)] if p.has_slack else 0.0
        for obs in p.obstacles:
            vals.append(
                collision_margin(pos[0], pos[1], obs, p.r_sigma[k], 0.0) - eps_k
            )
    return np.array(vals)


def _collision_gradients(p: NlpProblem, z: np.ndarray) -> np.ndarray:
    grads = []
    for k in range(p.N + 1):
        pos = z[p.x_slice(k)][:2]
        for obs in p.obstacles:
            grad, _, _ = linearize_collision(pos[0], pos[1], obs, p.r_sigma[k])
            v = np.zeros(p.n_var)
            sl = p.x_slice(k)
            v[sl.start : sl.start + 2] = grad
            v[p.eps_index(k)] = -1.0
            grads.append(v)
    return np.array(grads) if grads else np.zeros((0, p.n_var))


def _unpack(p: NlpProblem, z: np.ndarray):
    X = z[: p.nx * (p.N + 1)].reshape(p.N + 1, p.nx)
    U = z[p.nx * (p.N + 1) : p.nx * (p.N + 1) + p.nu * p.N].reshape(p.N, p.nu)
    eps = (
        z[p.nx * (p.N + 1) + p.nu * p.N :].copy()
        if p.has_slack
        else np.zeros(p.N)
    )
    return X, U, eps


def pack_warm_start(p: NlpProblem, sol: NlpSolution) -> np.ndarray:
    z = np.zeros(p.n_var)
    z[: p.nx * (p.N + 1)] = sol.X.ravel()
    z[p.nx * (p.N + 1) : p.nx * (p.N + 1) + p.nu * p.N] = sol.U.ravel()
    if p.has_slack:
        z[p.nx * (p.N + 1) + p.nu * p.N :] = np.maximum(sol.eps, 0.0)
    return z


def _nlp_kkt_residual(p, H, g, A_eq, b_eq, A_static, b_static, z, lam, mu_static, mu_coll):
    """KKT residual of the true NLP with exact collision gradients at z."""
    r = H @ z + g + A_eq.T @ lam
    if A_static.shape[0]:
        r = r + A_static.T @ mu_static
    coll_grads = _collision_gradients(p, z)
    if coll_grads.shape[0]:
        r = r + coll_grads.T @ mu_coll
    res = float(np.max(np.abs(r)))
    res = max(res, float(np.max(np.abs(A_eq @ z - b_eq))))
    if A_static.shape[0]:
        s = A_static @ z - b_static
        res = max(res, float(max(0.0, np.max(s))))
        res = max(res, float(np.max(np.abs(mu_static * s))))
    margins = _true_collision_margins(p, z)
    if margins.size:
        res = max(res, float(max(0.0, np.max(margins))))
        res = max(res, float(np.max(np.abs(mu_coll * margins))))
    if mu_static.size:
        res = max(res, float(max(0.0, -np.min(mu_static))))
    if mu_coll.size:
        res = max(res, float(max(0.0, -np.min(mu_coll))))
    return res


def _least_squares_multipliers(
    p, H, g, A_eq, A_static, b_static, z, mu_static, mu_coll
):
    """Re-estimate multipliers with exact gradients at z.

    The QP multipliers belong to the previous linearization point; when
    the primal iterate has already settled, re-fitting the duals against
    the current gradients removes that mismatch. Only constraints the QP
    considered active keep a (non-negative) multiplier.
    """
    act_s = np.nonzero(mu_static > 1e-12)[0]
    act_c = np.nonzero(mu_coll > 1e-12)[0]
    coll_grads = _collision_gradients(p, z)
    blocks = [A_eq]
    if act_s.size:
        blocks.append(A_static[act_s])
    if act_c.size:
        blocks.append(coll_grads[act_c])
    J = np.vstack(blocks)
    nu, *_ = np.linalg.lstsq(J.T, -(H @ z + g), rcond=None)
    m_eq = A_eq.shape[0]
    lam = nu[:m_eq]
    mu_s = np.zeros_like(mu_static)
    mu_c = np.zeros_like(mu_coll)
    k = m_eq
    if act_s.size:
        mu_s[act_s] = np.maximum(nu[k : k + act_s.size], 0.0)
        k += act_s.size
    if act_c.size:
        mu_c[act_c] = np.maximum(nu[k : k + act_c.size], 0.0)
    return lam, mu_s, mu_c


def solve_sqp(
    p: NlpProblem,
    warm_start: Optional[NlpSolution] = None,
    trace: Optional[Callable[[dict], None]] = None,
) -> NlpSolution:
    """Solve a planning or tracking problem.

    Without obstacles the problem is a convex QP and terminates in one
    iteration. With obstacles, collision constraints are re-linearized
    around each iterate; slack variables keep every subproblem feasible.
    """
    H, g, c0 = _cost_terms(p)
    A_eq, b_eq = _equality_rows(p)
    A_static, b_static = _static_inequality_rows(p)

    if warm_start is not None and warm_start.X.shape == (p.N + 1, p.nx):
        z = pack_warm_start(p, warm_start)
    else:
        # Cold start: zero controls rolled out from the initial state.
        z = np.zeros(p.n_var)
        xk = p.x0.copy()
        for k in range(p.N + 1):
            z[p.x_slice(k)] = xk
            xk = p.A @ xk

    def objective(zv):
        return float(0.5 * zv @ H @ zv + g @ zv + c0)

    def merit(zv, pen):
        viol = float(np.sum(np.abs(A_eq @ zv - b_eq)))
        if A_static.shape[0]:
            viol += float(np.sum(np.maximum(A_static @ zv - b_static, 0.0)))
        margins = _true_collision_margins(p, zv)
        if margins.size:
            viol += float(np.sum(np.maximum(margins, 0.0)))
        if p.has_slack:
            viol += float(np.sum(np.maximum(-zv[p.eps_index(0) :], 0.0)))
        return objective(zv) + pen * viol, viol

    status = "max-iterations"
    kkt_res = np.inf
    iterations = 0
    for it in range(1, MAX_SQP_ITERS + 1):
        iterations = it
        A_coll, b_coll = _collision_rows(p, z)
        A_in = np.vstack([A_static, A_coll])
        b_in = np.concatenate([b_static, b_coll])
        qp = solve_qp(H, g, A_eq, b_eq, A_in, b_in)
        if qp.status == "infeasible":
            status = "infeasible-relaxed"
            break
        dz = qp.x - z
        if np.any(~np.isfinite(dz)):
            raise FloatingPointError("NaN in SQP iterate")

        mult_scale = 0.0
        if qp.mu_in.size:
            mult_scale = float(np.max(np.abs(qp.mu_in)))
        if qp.lam_eq.size:
            mult_scale = max(mult_scale, float(np.max(np.abs(qp.lam_eq))))
        pen = max(10.0 * mult_scale, 10.0)

        n_static = A_static.shape[0]
        if float(np.max(np.abs(dz))) <= 1e-9 * (1.0 + float(np.max(np.abs(z)))):
            # Fixed point of the SQP map: the QP re-linearized here returns
            # (essentially) the same point, so its multipliers are fresh.
            z = qp.x
            kkt_res = _nlp_kkt_residual(
                p, H, g, A_eq, b_eq, A_static, b_static, z,
                qp.lam_eq, qp.mu_in[:n_static], qp.mu_in[n_static:],
            )
            if trace is not None:
                margins = _true_collision_margins(p, z)
                trace(
                    {
                        "iteration": it,
                        "objective": objective(z),
                        "kkt_residual": kkt_res,
                        "max_margin": float(np.max(margins)) if margins.size else 0.0,
                    }
                )
            defects = float(np.max(np.abs(A_eq @ z - b_eq)))
            if kkt_res <= KKT_TOL and defects <= DEFECT_TOL:
                status = "converged"
            break

        phi0, viol0 = merit(z, pen)
        pred = max(phi0 - (objective(qp.x) + 0.0), 1e-16)
        alpha = 1.0
        z_new = qp.x
        while alpha > 1e-4:
            z_try = z + alpha * dz
            phi_try, _ = merit(z_try, pen)
            if phi_try <= phi0 - 1e-4 * alpha * pred:
                z_new = z_try
                break
            alpha *= LINESEARCH_CONTRACTION
        z = z_new

        n_static = A_static.shape[0]
        mu_static = qp.mu_in[:n_static]
        mu_coll = qp.mu_in[n_static:]
        kkt_res = _nlp_kkt_residual(
            p, H, g, A_eq, b_eq, A_static, b_static, z, qp.lam_eq, mu_static, mu_coll
        )
        if kkt_res > KKT_TOL:
            lam_ls, mu_s_ls, mu_c_ls = _least_squares_multipliers(
                p, H, g, A_eq, A_static, b_static, z, mu_static, mu_coll
            )
            res_ls = _nlp_kkt_residual(
                p, H, g, A_eq, b_eq, A_static, b_static, z, lam_ls, mu_s_ls, mu_c_ls
            )
            if res_ls < kkt_res:
                kkt_res = res_ls
        if trace is not None:
            margins = _true_collision_margins(p, z)
            trace(
                {
                    "iteration": it,
                    "objective": objective(z),
                    "kkt_residual": kkt_res,
                    "max_margin": float(np.max(margins)) if margins.size else 0.0,
                }
            )
        defects = float(np.max(np.abs(A_eq @ z - b_eq)))
        if kkt_res <= KKT_TOL and defects <= DEFECT_TOL:
            status = "converged"
            break
        if float(np.max(np.abs(dz))) <= 1e-12:
            break

    X, U, eps = _unpack(p, z)
    return NlpSolution(
        X=X,
        U=U,
        eps=eps,
        objective=objective(z),
        kkt_residual=float(kkt_res),
        status=status,
        iterations=iterations,
    )
