"""Ground truth: true weight stacks, optimal values, and measured regret.

The true weights come from a backward recursion over per-component moments
of the transition kernel.  Those moments are Monte-Carlo estimates, so
their uncertainty is pushed through to theta* by splitting the sample
budget into batches and re-running the whole recursion on each batch; the
spread of the batch results gives the propagated standard error.

Policy values are measured by rolling the greedy policy on pre-sampled
environment paths.  The s-process never sees the control input, which lets
one batch of paths serve a whole vectorized cost evaluation.
"""

import numpy as np
from dataclasses import dataclass, field

from .environment import (
    MIN_MC_SAMPLES,
    draw_component_samples,
    moments_from_samples,
    sample_paths,
)
from .lsvi import ThetaStack, notation_matrices, value_affine_terms
from .riccati import stage_cost

__all__ = [
    "TrueTheta",
    "RegretReport",
    "ThetaNormBound",
    "true_theta_backward",
    "optimal_value",
    "policy_value_mc",
    "policy_costs_on_paths",
    "regret_curve",
    "theta_norm_bound",
]


@dataclass
class TrueTheta:
    """True weight stack with the moment estimates that produced it.

    stack.data[t] holds theta*_t for t = 1..T (row 0 is padding, as in the
    learner's stacks); the instance carries a ground_truth marker.  moments
    is indexed by arrival time, entry 0 unused.  theta_stderr has the shape
    of stack.data and reflects batch-split Monte-Carlo spread.
    """

    stack: ThetaStack
    moments: list = field(repr=False)
    theta_stderr: np.ndarray = field(repr=False)
    fm: object = field(repr=False)
    cost: object = field(repr=False)
    kern: object = field(repr=False)
    mc_samples: int = 0
    n_batches: int = 0


def _interleave(Hm, qv):
    """Stack per-component (h row, q scalar) pairs into one flat vector."""
    return np.concatenate([Hm, qv[:, None]], axis=1).reshape(-1)


def _terminal_Y(cost):
    """Moment contractions needed at the horizon: quad against M, no cross."""
    return cost.M, np.zeros((cost.p, cost.n))


def _recursion(moms, sol, cost, T, d, n):
    """Run the backward true-weight recursion on one set of per-t moments."""
    data = np.zeros((T + 1, d * (n + 1)))
    Hm = moms[T].m_rows() @ cost.F.T
    qv = moms[T].quad_Y1.copy()
    data[T] = _interleave(Hm, qv)
    for t in range(T - 1, 0, -1):
        X1, X2, Y1, Y2, Y3 = notation_matrices(t, sol, cost)
        mt = moms[t]
        Hm_next = Hm
        Hm = (mt.Phi @ Hm_next) @ X1.T + mt.m_rows() @ X2.T
        quadform = np.einsum("ijk,ja,ab,kb->i", mt.phi_outer, Hm_next, Y2, Hm_next)
        qv = mt.Phi @ qv + mt.quad_Y1 + quadform + 2.0 * (mt.cross_Y3 @ Hm_next.reshape(-1))
        data[t] = _interleave(Hm, qv)
    return data


def true_theta_backward(kern, fm, cost, sol, T, mc_samples, rng, n_batches=10):
    """Estimate theta*_t for t = 1..T by the moment-based backward recursion.

    A time-invariant kernel is sampled once and the draws are reused at
    every step (only the gain-dependent contractions change with t); a
    kernel with a components_at hook is re-sampled per arrival time.  The
    returned standard errors come from re-running the recursion on
    n_batches disjoint slices of the sample budget.
    """
    if sol.T != T:
        raise ValueError(f"Riccati solution has T={sol.T}, expected {T}")
    mc_samples = int(mc_samples)
    if mc_samples < MIN_MC_SAMPLES:
        raise ValueError(f"mc_samples must be at least {MIN_MC_SAMPLES}")
    n_batches = int(n_batches)
    if n_batches < 2:
        raise ValueError("need at least 2 batches for error propagation")
    d, n = fm.d, cost.n

    time_varying = kern._components_at is not None
    # Arrival time t is reached through the kernel at departure step t-1.
    if time_varying:
        draws = {t: draw_component_samples(kern, mc_samples, rng, t=t - 1) for t in range(1, T + 1)}
    else:
        shared = draw_component_samples(kern, mc_samples, rng)
        draws = {t: shared for t in range(1, T + 1)}

    def moments_for(t, sl):
        samples, features = draws[t]
        if t == T:
            Y1, Y3 = _terminal_Y(cost)
        else:
            _, _, Y1, _, Y3 = notation_matrices(t, sol, cost)
        return moments_from_samples(
            [S[sl] for S in samples], [F[sl] for F in features], Y1, Y3
        )

    full = slice(None)
    moms = [None] + [moments_for(t, full) for t in range(1, T + 1)]
    data = _recursion(moms, sol, cost, T, d, n)

    b = mc_samples // n_batches
    if b < 2:
        raise ValueError("batches need at least 2 samples each")
    batch_data = np.empty((n_batches, T + 1, d * (n + 1)))
    for k in range(n_batches):
        sl = slice(k * b, (k + 1) * b)
        moms_k = [None] + [moments_for(t, sl) for t in range(1, T + 1)]
        batch_data[k] = _recursion(moms_k, sol, cost, T, d, n)
    stderr = batch_data.std(axis=0, ddof=1) / np.sqrt(n_batches)

    stack = ThetaStack(data, d, n)
    stack.ground_truth = True
    return TrueTheta(
        stack=stack,
        moments=moms,
        theta_stderr=stderr,
        fm=fm,
        cost=cost,
        kern=kern,
        mc_samples=mc_samples,
        n_batches=n_batches,
    )


def optimal_value(x, s, t, tt, sol):
    """Optimal cost-to-go x'G_t x + 2 h_t(s)'x + q_t(s) under theta*."""
    if not 0 <= t <= sol.T:
        raise ValueError(f"t must lie in 0..{sol.T}, got {t}")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    s = np.atleast_1d(np.asarray(s, dtype=float))
    theta_next = tt.stack.data[t + 1] if t < sol.T else None
    h, q = value_affine_terms(s, t, theta_next, sol, sol.cost, tt.fm)
    return float(x @ sol.G[t] @ x + 2.0 * h @ x + q)


def _stage_cost_rows(X, S, U, cost):
    """Row-wise z'Pz over matched batches of states and inputs."""
    return (
        np.einsum("ka,ab,kb->k", X, cost.W, X)
        + np.einsum("ka,ab,kb->k", S, cost.M, S)
        + np.einsum("ka,ab,kb->k", U, cost.R, U)
        + 2.0 * np.einsum("ka,ab,kb->k", X, cost.F, S)
        + 2.0 * np.einsum("ka,ab,kb->k", X, cost.D, U)
        + 2.0 * np.einsum("ka,ab,kb->k", S, cost.H, U)
    )


def policy_costs_on_paths(policy, sol, sys, cost, fm, x0, S_paths):
    """Total episode cost of the greedy policy along each pre-sampled path.

    S_paths is (N, T+1, p).  The plant rolls deterministically, so all N
    copies share x0 and diverge only through the s-dependence of the input.
    """
    N, Tp1, _ = S_paths.shape
    T = sol.T
    if Tp1 != T + 1:
        raise ValueError(f"paths must hold T+1={T + 1} states, got {Tp1}")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    X = np.tile(x0, (N, 1))
    total = np.zeros(N)
    for t in range(T):
        St = S_paths[:, t]
        PHI = fm.batch(St)
        Kx, Ks, Kh = sol.gains(t)
        V = PHI @ policy.h_block(t + 1)
        U = X @ Kx.T + St @ Ks.T + V @ Kh.T
        total += _stage_cost_rows(X, St, U, cost)
        X = X @ sys.A.T + U @ sys.B.T
        if not np.all(np.isfinite(X)):
            raise RuntimeError(f"batch rollout diverged at t={t + 1}")
    total += _stage_cost_rows(X, S_paths[:, T], np.zeros((N, sys.m)), cost)
    return total


def policy_value_mc(policy, x0, s0, sys, kern, cost, sol, N_eval, rng):
    """Mean episode cost of a theta-stack policy over N_eval fresh rollouts."""
    N_eval = int(N_eval)
    if N_eval < 100:
        raise ValueError("N_eval must be at least 100")
    S_paths = sample_paths(kern, s0, sol.T, N_eval, rng)
    costs = policy_costs_on_paths(policy, sol, sys, cost, kern.feature, x0, S_paths)
    return float(costs.mean()), float(costs.std(ddof=1) / np.sqrt(N_eval))


@dataclass
class RegretReport:
    """Per-episode value gaps and their running sum.

    regret_cum[k] sums per_episode[:k+1]; regret_cum_stderr propagates the
    per-episode variances as sqrt of their running sum.  With common random
    numbers on, per_episode is the paired-difference estimate (tighter than
    V_learned - V_opt, which mixes an MC mean with an exact value).
    """

    episode: np.ndarray
    V_learned: np.ndarray
    V_learned_stderr: np.ndarray
    V_opt: np.ndarray
    per_episode: np.ndarray
    per_episode_stderr: np.ndarray
    regret_cum: np.ndarray
    regret_avg: np.ndarray
    regret_cum_stderr: np.ndarray
    N_eval: int
    common_random_numbers: bool = False

    @property
    def total(self):
        return float(self.regret_cum[-1])


def regret_curve(history, tt, N_eval=500, rng=None, common_random_numbers=False):
    """Measure the regret curve of a learning run against theta*.

    Each episode's learned stack is re-evaluated from that episode's
    realized initial states.  rng may be a Generator, a seed, or None (OS
    entropy); pass something explicit for reproducible curves.
    """
    rng = np.random.default_rng(rng)
    sol = history.sol
    if tt.stack.T != sol.T:
        raise ValueError(
            f"horizon mismatch: history has T={sol.T}, theta* has T={tt.stack.T}"
        )
    L = history.L
    V_learned = np.empty(L)
    V_se = np.empty(L)
    V_opt = np.empty(L)
    diff = np.empty(L)
    diff_se = np.empty(L)

    for e in range(L):
        x0 = history.dataset.X[e, 0]
        s0 = history.dataset.S[e, 0]
        stack = history.stack_at(e)
        V_opt[e] = optimal_value(x0, s0, 0, tt, sol)
        if common_random_numbers:
            S_paths = sample_paths(tt.kern, s0, sol.T, N_eval, rng)
            cl = policy_costs_on_paths(stack, sol, sol.sys, sol.cost, tt.fm, x0, S_paths)
            co = policy_costs_on_paths(tt.stack, sol, sol.sys, sol.cost, tt.fm, x0, S_paths)
            V_learned[e] = cl.mean()
            V_se[e] = cl.std(ddof=1) / np.sqrt(N_eval)
            paired = cl - co
            diff[e] = paired.mean()
            diff_se[e] = paired.std(ddof=1) / np.sqrt(N_eval)
        else:
            V_learned[e], V_se[e] = policy_value_mc(
                stack, x0, s0, sol.sys, tt.kern, sol.cost, sol, N_eval, rng
            )
            diff[e] = V_learned[e] - V_opt[e]
            diff_se[e] = V_se[e]

    cum = np.cumsum(diff)
    episodes = np.arange(1, L + 1)
    return RegretReport(
        episode=episodes,
        V_learned=V_learned,
        V_learned_stderr=V_se,
        V_opt=V_opt,
        per_episode=diff,
        per_episode_stderr=diff_se,
        regret_cum=cum,
        regret_avg=cum / episodes,
        regret_cum_stderr=np.sqrt(np.cumsum(diff_se**2)),
        N_eval=N_eval,
        common_random_numbers=common_random_numbers,
    )


@dataclass
class ThetaNormBound:
    """Evaluated norm caps on the true weights.

    theta_bounds[t] caps ||theta*_t||; c_theta scales it so that
    ||theta*_t|| <= c_theta sqrt(d) for every t.  vacuous_rho records that
    the supplied contraction rate was >= 1, in which case the geometric
    series was clamped and the numbers certify nothing (finite horizon
    keeps everything finite regardless).
    """

    c_theta: float
    h_bounds: np.ndarray
    q_bounds: np.ndarray
    theta_bounds: np.ndarray
    norm_caps: dict
    alpha: float
    rho: float
    vacuous_rho: bool

    def __str__(self):
        flag = " (rho >= 1, bound vacuous)" if self.vacuous_rho else ""
        return f"c_theta = {self.c_theta:.6g}{flag}"


def theta_norm_bound(sys, cost, sol, fm, delta_s, alpha, rho):
    """Evaluate the printed caps on ||h_bar_t||, ||q_bar_t||, ||theta*_t||.

    The time-varying operator norms are maximized over t rather than
    assumed.  rho >= 1 is reported, not fatal: the rate is clamped just
    below 1 so the formula stays finite, and vacuous_rho is set.
    """
    T = sol.T
    d = fm.d
    caps = {"X1": 0.0, "X2": 0.0, "Y1": 0.0, "Y2": 0.0, "Y3": 0.0}
    for t in range(T):
        X1, X2, Y1, Y2, Y3 = notation_matrices(t, sol, cost)
        for name, M in (("X1", X1), ("X2", X2), ("Y1", Y1), ("Y2", Y2), ("Y3", Y3)):
            caps[name] = max(caps[name], float(np.linalg.norm(M, 2)))

    vacuous = rho >= 1.0
    rho_eff = min(float(rho), 1.0 - 1e-9)
    root_d = np.sqrt(d)
    F_norm = float(np.linalg.norm(cost.F, 2))
    M_norm = float(np.linalg.norm(cost.M, 2))

    tgrid = np.arange(T + 1)
    h_b = F_norm * delta_s * alpha * rho_eff ** (T - tgrid) + caps[
        "X2"
    ] * delta_s * alpha * root_d / (1.0 - rho_eff)
    h_next = np.append(h_b[1:], 0.0)
    q_b = (
        delta_s**2 * M_norm
        + delta_s**2 * caps["Y1"] * root_d
        + caps["Y2"] * h_next**2 / root_d
        + delta_s * caps["Y3"] * h_next
    )
    theta_b = np.hypot(h_b, q_b)
    return ThetaNormBound(
        c_theta=float(theta_b.max() / root_d),
        h_bounds=h_b,
        q_bounds=q_b,
        theta_bounds=theta_b,
        norm_caps=caps,
        alpha=float(alpha),
        rho=float(rho),
        vacuous_rho=vacuous,
    )
