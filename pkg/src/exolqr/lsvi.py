"""Least-squares value iteration for the exogenous-state LQR.

Per episode, the learner re-fits the stacked affine value weights theta_t
(one vector of length d(n+1) per time step) by ridge regression against
closed-form Bellman targets, sweeping backward in time, then rolls out the
greedy policy.  The regression design row for a transition is

    psi = Y(x, u)' phi(s) = phi(s) kron [2 x_next; 1],

since the plant is deterministic (x_next = Ax + Bu exactly).

Step-index convention for the target: the pair (h_step, q_step) evaluated
on the landing state uses the feedback gains at `step` together with
theta_{step+1}; the terminal pair is h_T(s) = F s, q_T(s) = s'Ms, matching
V_T = c(x, s, 0).  The main text prints the gains one step earlier in its
inline h/q formulas, but the derivation and the true-weight recursion both
use the convention implemented here, and the empirical Bellman identity
holds only for it (see tests).
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .environment import phi_eval, sample_next
from .riccati import riccati_backward, stage_cost

__all__ = [
    "ThetaStack",
    "Dataset",
    "Trajectory",
    "LearnerConfig",
    "DesignState",
    "LearningHistory",
    "z_mat",
    "z_bar",
    "y_vec",
    "build_Y",
    "notation_matrices",
    "value_affine_terms",
    "bellman_target",
    "backward_update",
    "greedy_action",
    "run_episode",
    "run_lsvi",
]

DESIGN_EIG_SLACK = 1e-10


def z_mat(n):
    """Selector [I_n, 0] pulling the h part out of a weight block."""
    return np.hstack([np.eye(n), np.zeros((n, 1))])


def z_bar(n):
    """Selector [0, ..., 0, 1] pulling the q part out of a weight block."""
    out = np.zeros((1, n + 1))
    out[0, n] = 1.0
    return out


def y_vec(x_next):
    """Regression feature of a landing state: [2 x_next; 1]."""
    x_next = np.atleast_1d(np.asarray(x_next, dtype=float))
    return np.concatenate([2.0 * x_next, [1.0]])


def build_Y(sys, d, x, u):
    """Block row map Y(x, u) = I_d kron [2(Ax + Bu)', 1], shape d by d(n+1)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if x.shape != (sys.n,) or u.shape != (sys.m,):
        raise ValueError(
            f"expected x of shape ({sys.n},) and u of shape ({sys.m},), "
            f"got {x.shape} and {u.shape}"
        )
    row = y_vec(sys.A @ x + sys.B @ u)[None, :]
    return np.kron(np.eye(int(d)), row)


class ThetaStack:
    """Stacked value weights theta_t for t = 1..T (row 0 is padding).

    data[t] has length d(n+1); block i holds (h_bar_{i,t}, q_bar_{i,t}).
    """

    def __init__(self, data, d, n):
        data = np.asarray(data, dtype=float)
        if data.ndim != 2 or data.shape[1] != d * (n + 1):
            raise ValueError(
                f"theta rows must have length d(n+1) = {d * (n + 1)}, "
                f"got shape {data.shape}"
            )
        self.data = data
        self.d = int(d)
        self.n = int(n)
        self.T = data.shape[0] - 1
        self.projected = np.zeros(data.shape[0], dtype=bool)

    @classmethod
    def zeros(cls, T, d, n):
        return cls(np.zeros((T + 1, d * (n + 1))), d, n)

    def theta(self, t):
        return self.data[t]

    def h_block(self, t):
        """(d, n) matrix whose rows are h_bar_{i,t}."""
        return self.data[t].reshape(self.d, self.n + 1)[:, : self.n]

    def q_block(self, t):
        """(d,) vector of q_bar_{i,t}."""
        return self.data[t].reshape(self.d, self.n + 1)[:, self.n]

    def norms(self):
        return np.linalg.norm(self.data, axis=1)


@dataclass
class Trajectory:
    """One episode: states x (T+1, n), s (T+1, p), inputs u (T, m), costs (T+1,)."""

    x: np.ndarray
    s: np.ndarray
    u: np.ndarray
    costs: np.ndarray

    @property
    def total_cost(self):
        return float(self.costs.sum())


class Dataset:
    """Completed-episode transition store with cached regression features.

    Arrays are indexed [episode, t].  PSI caches the design rows
    phi(s_t) kron [2 x_{t+1}; 1]; PHI caches phi(s_t) for all t = 0..T.
    """

    def __init__(self, n, p, m, d, T):
        self.n, self.p, self.m, self.d, self.T = n, p, m, d, T
        self.D = d * (n + 1)
        self.count = 0
        cap = 4
        self.X = np.empty((cap, T + 1, n))
        self.S = np.empty((cap, T + 1, p))
        self.U = np.empty((cap, T, m))
        self.COST = np.empty((cap, T + 1))
        self.PHI = np.empty((cap, T + 1, d))
        self.PSI = np.empty((cap, T, self.D))

    def _grow(self):
        cap = self.X.shape[0]
        if self.count < cap:
            return
        for name in ("X", "S", "U", "COST", "PHI", "PSI"):
            old = getattr(self, name)
            new = np.empty((2 * cap,) + old.shape[1:])
            new[:cap] = old
            setattr(self, name, new)

    def append(self, traj, fm):
        if traj.u.shape[0] != self.T:
            raise ValueError(f"episode must hold exactly T={self.T} transitions")
        if not (np.all(np.isfinite(traj.x)) and np.all(np.isfinite(traj.s))):
            raise ValueError("non-finite states in episode")
        self._grow()
        e = self.count
        self.X[e], self.S[e], self.U[e], self.COST[e] = (
            traj.x,
            traj.s,
            traj.u,
            traj.costs,
        )
        phi = fm.batch(traj.s)
        self.PHI[e] = phi
        y = np.hstack([2.0 * traj.x[1:], np.ones((self.T, 1))])
        self.PSI[e] = np.einsum("ta,tb->tab", phi[: self.T], y).reshape(self.T, self.D)
        self.count += 1

    def psi_at(self, t):
        return self.PSI[: self.count, t]


@dataclass
class LearnerConfig:
    """Episode loop inputs: ridge weight, projection radius, horizon, seeding."""

    lam: float
    R_theta: float
    L: int
    T: int
    x0_mean: np.ndarray
    x0_cov: np.ndarray
    s0_mean: np.ndarray
    s0_cov: np.ndarray
    seed: int
    incremental: bool = False

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if self.R_theta <= 0:
            raise ValueError("R_theta must be positive")
        if self.L < 1 or self.T < 1:
            raise ValueError("L and T must be at least 1")
        self.x0_mean = np.atleast_1d(np.asarray(self.x0_mean, dtype=float))
        self.s0_mean = np.atleast_1d(np.asarray(self.s0_mean, dtype=float))
        self.x0_cov = np.atleast_2d(np.asarray(self.x0_cov, dtype=float))
        self.s0_cov = np.atleast_2d(np.asarray(self.s0_cov, dtype=float))
        self._x0_chol = np.linalg.cholesky(self.x0_cov)
        self._s0_chol = np.linalg.cholesky(self.s0_cov)

    def draw_initials(self, rng, delta_s):
        x0 = self.x0_mean + self._x0_chol @ rng.standard_normal(self.x0_mean.size)
        for _ in range(10_000):
            s0 = self.s0_mean + self._s0_chol @ rng.standard_normal(self.s0_mean.size)
            if np.linalg.norm(s0) <= delta_s:
                return x0, s0
        raise RuntimeError("could not draw an initial s inside the delta_s ball")


@dataclass
class DesignState:
    """Realized normal equations of one backward sweep: Lambda theta = rhs."""

    Lambda: np.ndarray  # (T, D, D), ridge term included
    rhs: np.ndarray  # (T, D)


def notation_matrices(step, sol, cost):
    """Closed-loop notation at a step: X1 = Ac', X2 = F + Kx'H', Y1, Y2, Y3."""
    Kx, Ks, Kh = sol.gains(step)
    X1 = sol.Ac[step].T
    X2 = cost.F + Kx.T @ cost.H.T
    Y1 = cost.M + cost.H @ Ks
    Y2 = sol.sys.B @ Kh
    Y3 = cost.H @ Kh
    return X1, X2, Y1, Y2, Y3


def _value_affine_batch(PHI, S, step, theta_next, sol, cost):
    """(h_step, q_step) evaluated at rows of S with features PHI.

    step == sol.T uses the terminal forms and ignores theta_next; otherwise
    theta_next is the stacked vector theta_{step+1}.
    Returns h (E, n) and q (E,).
    """
    if step == sol.T:
        h = S @ cost.F.T
        q = np.einsum("ka,ab,kb->k", S, cost.M, S)
        return h, q
    if theta_next is None:
        raise ValueError(f"theta_{step + 1} is required for non-terminal step {step}")
    d = PHI.shape[1]
    n = cost.n
    theta_next = np.asarray(theta_next, dtype=float).reshape(d, n + 1)
    hb, qb = theta_next[:, :n], theta_next[:, n]
    X1, X2, Y1, Y2, Y3 = notation_matrices(step, sol, cost)
    v = PHI @ hb  # rows are (phi' kron Z) theta_{step+1}
    h = v @ X1.T + S @ X2.T
    q = (
        PHI @ qb
        + np.einsum("ka,ab,kb->k", S, Y1, S)
        + np.einsum("ka,ab,kb->k", v, Y2, v)
        + 2.0 * np.einsum("ka,ab,kb->k", S, Y3, v)
    )
    return h, q


def value_affine_terms(s, step, theta_next, sol, cost, fm):
    """Scalar-state version of the affine value pair (h_step(s), q_step(s))."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    phi = phi_eval(fm, s)
    h, q = _value_affine_batch(phi[None, :], s[None, :], step, theta_next, sol, cost)
    return h[0], float(q[0])


def bellman_target(x_next, s_next, t, theta_next2, sol, cost, fm):
    """Regression target at step t: 2 x_next' h_{t+1}(s_next) + q_{t+1}(s_next).

    theta_next2 is the stacked theta_{t+2} vector; pass None at t = T-1,
    where the terminal forms take over.
    """
    if not 0 <= t <= sol.T - 1:
        raise ValueError(f"t must lie in 0..{sol.T - 1}, got {t}")
    x_next = np.atleast_1d(np.asarray(x_next, dtype=float))
    h, q = value_affine_terms(s_next, t + 1, theta_next2, sol, cost, fm)
    return float(2.0 * x_next @ h + q)


def backward_update(data, cfg, sol, fm, gram=None):
    """One full backward sweep over the collected dataset.

    Rebuilds Lambda_t from scratch unless a precomputed Gram stack (the
    incremental path) is supplied; either way theta is solved per t by a
    symmetric factorization and projected onto the R_theta ball.
    Returns the new ThetaStack and the realized DesignState.
    """
    T, D = cfg.T, data.D
    d, n = data.d, data.n
    stack = ThetaStack.zeros(T, d, n)
    eye = np.eye(D)
    Lambda = np.empty((T, D, D))
    rhs = np.zeros((T, D))
    E = data.count

    if E == 0:
        Lambda[:] = cfg.lam * eye
        return stack, DesignState(Lambda, rhs)

    X, S, PHI = data.X[:E], data.S[:E], data.PHI[:E]
    for t in range(T - 1, -1, -1):
        PSI_t = data.psi_at(t)
        Gr = PSI_t.T @ PSI_t if gram is None else gram[t]
        Lam = Gr + cfg.lam * eye
        theta_next2 = stack.data[t + 2] if t + 2 <= T else None
        h, q = _value_affine_batch(
            PHI[:, t + 1], S[:, t + 1], t + 1, theta_next2, sol, sol.cost
        )
        eps = 2.0 * np.einsum("ka,ka->k", X[:, t + 1], h) + q
        if not np.all(np.isfinite(eps)):
            raise ValueError(f"non-finite Bellman targets at t={t}")
        b = PSI_t.T @ eps
        np.linalg.cholesky(0.5 * (Lam + Lam.T))
        theta = np.linalg.solve(Lam, b)
        nrm = float(np.linalg.norm(theta))
        if nrm > cfg.R_theta:
            theta = (cfg.R_theta / nrm) * theta
            stack.projected[t + 1] = True
        stack.data[t + 1] = theta
        Lambda[t], rhs[t] = Lam, b
    return stack, DesignState(Lambda, rhs)


def greedy_action(x, s, t, theta, sol, fm):
    """Greedy input Kx x + Ks s + Kh (phi(s)' kron Z) theta_{t+1}."""
    if not 0 <= t <= sol.T - 1:
        raise ValueError(f"t must lie in 0..{sol.T - 1}, got {t}")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    s = np.atleast_1d(np.asarray(s, dtype=float))
    Kx, Ks, Kh = sol.gains(t)
    v = theta.h_block(t + 1).T @ phi_eval(fm, s)
    return Kx @ x + Ks @ s + Kh @ v


def run_episode(theta, sol, sys, kern, x0, s0, rng):
    """Roll the greedy policy for T steps; returns the trajectory.

    The terminal input is pinned at zero, so the last cost entry is
    c(x_T, s_T, 0).  A non-finite state raises instead of being clipped.
    """
    T = sol.T
    cost = sol.cost
    x = np.empty((T + 1, sys.n))
    s = np.empty((T + 1, kern.p))
    u = np.empty((T, sys.m))
    costs = np.empty(T + 1)
    x[0] = np.atleast_1d(np.asarray(x0, dtype=float))
    s[0] = np.atleast_1d(np.asarray(s0, dtype=float))
    for t in range(T):
        u[t] = greedy_action(x[t], s[t], t, theta, sol, kern.feature)
        costs[t] = stage_cost(x[t], s[t], u[t], cost)
        x[t + 1] = sys.step(x[t], u[t])
        s[t + 1] = sample_next(kern, s[t], rng, t=t)
        if not np.all(np.isfinite(x[t + 1])):
            raise RuntimeError(f"rollout diverged at t={t + 1}")
    costs[T] = stage_cost(x[T], s[T], np.zeros(sys.m), cost)
    return Trajectory(x=x, s=s, u=u, costs=costs)


@dataclass
class LearningHistory:
    """Everything the analysis stages need from one learning run."""

    config: LearnerConfig
    sol: object
    theta: np.ndarray  # (L, T+1, D); theta[e] is the stack used in episode e+1
    dataset: Dataset
    episode_cost: np.ndarray  # (L,)
    wall_time: np.ndarray  # (L,)
    projected: np.ndarray  # (L, T+1) bool

    @property
    def L(self):
        return self.theta.shape[0]

    def stack_at(self, e):
        st = ThetaStack(self.theta[e].copy(), self.dataset.d, self.dataset.n)
        st.projected = self.projected[e].copy()
        return st


def run_lsvi(cfg, sys, cost, kern, fm):
    """Episodic loop: refit from all prior data, then roll out greedily.

    Episode e draws its own RNG stream from (seed, e), covering the initial
    states and the kernel transitions, so runs are reproducible bit for bit.
    """
    sol = riccati_backward(sys, cost, cfg.T)
    data = Dataset(sys.n, kern.p, sys.m, fm.d, cfg.T)
    D = data.D

    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.L)
    theta_hist = np.empty((cfg.L, cfg.T + 1, D))
    projected = np.zeros((cfg.L, cfg.T + 1), dtype=bool)
    episode_cost = np.empty(cfg.L)
    wall = np.empty(cfg.L)
    gram = np.zeros((cfg.T, D, D)) if cfg.incremental else None

    for e in range(cfg.L):
        tic = time.perf_counter()
        rng = np.random.default_rng(streams[e])
        stack, _ = backward_update(data, cfg, sol, fm, gram=gram)
        x0, s0 = cfg.draw_initials(rng, kern.delta_s)
        traj = run_episode(stack, sol, sys, kern, x0, s0, rng)
        data.append(traj, fm)
        if cfg.incremental:
            psi_new = data.PSI[data.count - 1]  # (T, D)
            gram += np.einsum("ta,tb->tab", psi_new, psi_new)
        theta_hist[e] = stack.data
        projected[e] = stack.projected
        episode_cost[e] = traj.total_cost
        wall[e] = time.perf_counter() - tic

    return LearningHistory(
        config=cfg,
        sol=sol,
        theta=theta_hist,
        dataset=data,
        episode_cost=episode_cost,
        wall_time=wall,
        projected=projected,
    )
