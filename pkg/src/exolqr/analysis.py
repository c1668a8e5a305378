"""Stability envelopes, the regret bound overlay, and parameter error.

Everything here runs after the fact, on completed histories.  The envelope
constants are not taken on faith from a general argument; they are fitted
to the realized gain sequence and re-verified window by window, so a
passing report certifies the actual instance rather than an asymptotic
claim.
"""

import numpy as np
from dataclasses import dataclass, field

from .environment import mixture_step_batch
from .lsvi import notation_matrices

__all__ = [
    "IssConstants",
    "IssReport",
    "BoundConstants",
    "iss_constants",
    "iss_check",
    "bound_constants",
    "regret_bound_eval",
    "param_error_curve",
]

RHO_CEILING = 1.0 - 1e-09


@dataclass(frozen=True)
class IssConstants:
    """Envelope pair with its certification record.

    rho is always kept strictly below 1 so downstream formulas stay finite;
    rho_raw preserves what the gain products actually demanded, and
    contractive records whether the clamp mattered.  provenance carries the
    horizon, the window count, and the minimum singular value of the
    transition products from time 0 (a degenerate product is reported, not
    repaired).
    """

    alpha: float
    rho: float
    rho_raw: float
    contractive: bool
    provenance: dict = field(repr=False)


def iss_constants(sol, sys=None):
    """Fit (alpha, rho) to the closed-loop products and certify them.

    rho is the largest per-step decay any window exhibits; alpha then
    absorbs whatever transient the windows need on top of that rate.  The
    resulting pair satisfies every contiguous product bound by
    construction, which is re-checked exhaustively before returning.
    """
    if sys is None:
        sys = sol.sys
    T = sol.T
    n = sys.n
    window_norms = {}
    min_sv = 1.0  # phi(0, 0) = I
    prod_from_zero = np.eye(n)
    for t1 in range(T + 1):
        prod = np.eye(n)
        for t2 in range(t1 + 1, T + 1):
            prod = sol.Ac[t2 - 1] @ prod
            window_norms[(t1, t2)] = float(np.linalg.norm(prod, 2))
        if t1 < T:
            prod_from_zero = sol.Ac[t1] @ prod_from_zero
            min_sv = min(min_sv, float(np.linalg.svd(prod_from_zero, compute_uv=False)[-1]))

    if window_norms:
        rho_raw = max(v ** (1.0 / (t2 - t1)) for (t1, t2), v in window_norms.items())
    else:
        rho_raw = 0.0
    rho = min(rho_raw, RHO_CEILING)
    if rho > 0.0:
        alpha = max(
            [1.0] + [v / rho ** (t2 - t1) for (t1, t2), v in window_norms.items()]
        )
    else:
        alpha = 1.0

    for (t1, t2), v in window_norms.items():
        if v > alpha * rho ** (t2 - t1) * (1.0 + 1e-09) + 1e-12:
            raise RuntimeError(
                f"envelope certification failed on window ({t1}, {t2})"
            )
    return IssConstants(
        alpha=float(alpha),
        rho=float(rho),
        rho_raw=float(rho_raw),
        contractive=bool(rho_raw < 1.0),
        provenance={
            "T": T,
            "n": n,
            "windows": len(window_norms),
            "min_transition_singular_value": min_sv,
        },
    )


@dataclass
class IssReport:
    """Trajectory-versus-envelope comparison over a batch of episodes."""

    state_norms: np.ndarray
    bounds: np.ndarray
    ratios: np.ndarray
    max_ratio: float
    per_episode_pass: np.ndarray
    passed: bool
    usable: bool
    gain_caps: dict
    constants: IssConstants

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        note = "" if self.usable else " [rho >= 1: certificate vacuous]"
        return (
            f"ISS check over {self.state_norms.shape[0]} episodes: "
            f"max ratio {self.max_ratio:.4f} ({status}){note}"
        )


def iss_check(trajectories, consts, sys, sol, R_theta, delta_s, d):
    """Evaluate the state-norm envelope for every (episode, t) pair.

    The bound is alpha rho^t ||x0|| plus a constant input term built from
    the worst-case gains, the environment radius, and the projection
    radius.  ratios above 1 mean the inequality failed at that step.
    """
    X = np.asarray(trajectories, dtype=float)
    if X.ndim != 3 or X.shape[2] != sys.n:
        raise ValueError(f"trajectories must be (episodes, T+1, {sys.n})")
    T = X.shape[1] - 1
    Ks_bar = max(np.linalg.norm(sol.Ks[t], 2) for t in range(sol.T))
    Kh_bar = max(np.linalg.norm(sol.Kh[t], 2) for t in range(sol.T))
    B_norm = np.linalg.norm(sys.B, 2)
    const = (consts.alpha * B_norm / (1.0 - consts.rho)) * (
        Ks_bar * delta_s + Kh_bar * R_theta / np.sqrt(d)
    )
    x0n = np.linalg.norm(X[:, 0], axis=1)
    tgrid = np.arange(T + 1)
    bounds = consts.alpha * consts.rho**tgrid[None, :] * x0n[:, None] + const
    norms = np.linalg.norm(X, axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratios = np.where(
            bounds > 0.0, norms / bounds, np.where(norms == 0.0, 0.0, np.inf)
        )
    per_episode = ratios.max(axis=1) <= 1.0
    return IssReport(
        state_norms=norms,
        bounds=bounds,
        ratios=ratios,
        max_ratio=float(ratios.max()),
        per_episode_pass=per_episode,
        passed=bool(per_episode.all()),
        usable=consts.contractive,
        gain_caps={"Ks_bar": Ks_bar, "Kh_bar": Kh_bar, "B_norm": B_norm},
        constants=consts,
    )


@dataclass
class BoundConstants:
    """Inputs to the high-probability regret bound.

    gamma is a Monte-Carlo estimate of the worst per-step excitation
    min_t lambda_min(E[psi psi']) under the optimal policy and carries a
    batch-split standard error.  x_bar is whichever of the theoretical or
    realized state cap the caller selected; details keeps both plus all
    the operator-norm caps that fed sigma and delta_v.
    """

    sigma: float
    delta_psi: float
    delta_v: float
    gamma: float
    gamma_stderr: float
    beta: float
    x_bar: float
    delta: float
    details: dict = field(repr=False)


def _gamma_mc(history, tt, mc_samples, rng, n_batches=10):
    """min_t lambda_min of the per-step design second moment, batch-split."""
    sol = history.sol
    cfg = history.config
    kern = tt.kern
    fm = tt.fm
    sys = sol.sys
    T, D = sol.T, history.dataset.D
    N = int(mc_samples)

    X = cfg.x0_mean + rng.standard_normal((N, sys.n)) @ cfg._x0_chol.T
    S = cfg.s0_mean + rng.standard_normal((N, kern.p)) @ cfg._s0_chol.T
    for _ in range(1000):
        bad = np.linalg.norm(S, axis=1) > kern.delta_s
        if not bad.any():
            break
        k = int(bad.sum())
        S[bad] = cfg.s0_mean + rng.standard_normal((k, kern.p)) @ cfg._s0_chol.T
    else:
        raise RuntimeError("could not draw initial s batch inside the delta_s ball")

    edges = np.linspace(0, N, n_batches + 1).astype(int)
    grams = np.zeros((T, n_batches, D, D))
    for t in range(T):
        PHI = fm.batch(S)
        Kx, Ks, Kh = sol.gains(t)
        U = X @ Kx.T + S @ Ks.T + (PHI @ tt.stack.h_block(t + 1)) @ Kh.T
        Xn = X @ sys.A.T + U @ sys.B.T
        PSI = np.einsum(
            "ka,kb->kab", PHI, np.hstack([2.0 * Xn, np.ones((N, 1))])
        ).reshape(N, D)
        for b in range(n_batches):
            rows = PSI[edges[b] : edges[b + 1]]
            grams[t, b] = rows.T @ rows
        X = Xn
        S = mixture_step_batch(kern, S, rng, t=t)

    pooled = grams.sum(axis=1) / N
    gamma = min(float(np.linalg.eigvalsh(pooled[t])[0]) for t in range(T))
    per_batch = np.empty(n_batches)
    for b in range(n_batches):
        nb = edges[b + 1] - edges[b]
        per_batch[b] = min(
            float(np.linalg.eigvalsh(grams[t, b] / nb)[0]) for t in range(T)
        )
    stderr = float(per_batch.std(ddof=1) / np.sqrt(n_batches))
    return gamma, stderr


def bound_constants(
    history, tt, consts, rng, mc_samples=10_000, x_bar_mode="theoretical",
    delta=0.05,
):
    """Assemble the regret-bound constants from a finished run.

    x_bar_mode picks between the envelope-derived state cap (faithful to
    the theory) and the realized maximum over the run (tighter overlays);
    both values are kept in details either way.
    """
    if x_bar_mode not in ("theoretical", "realized"):
        raise ValueError("x_bar_mode must be 'theoretical' or 'realized'")
    sol = history.sol
    cfg = history.config
    d = tt.fm.d
    T = sol.T
    E = history.dataset.count
    X = history.dataset.X[:E]
    delta_s = tt.kern.delta_s
    root_d = np.sqrt(d)

    caps = {"X1": 0.0, "X2": 0.0, "Y1": 0.0, "Y2": 0.0, "Y3": 0.0}
    for t in range(T):
        X1, X2, Y1, Y2, Y3 = notation_matrices(t, sol, sol.cost)
        for name, mat in (("X1", X1), ("X2", X2), ("Y1", Y1), ("Y2", Y2), ("Y3", Y3)):
            caps[name] = max(caps[name], float(np.linalg.norm(mat, 2)))

    Ks_bar = max(np.linalg.norm(sol.Ks[t], 2) for t in range(T))
    Kh_bar = max(np.linalg.norm(sol.Kh[t], 2) for t in range(T))
    B_norm = np.linalg.norm(sol.sys.B, 2)
    input_term = (consts.alpha * B_norm / (1.0 - consts.rho)) * (
        Ks_bar * delta_s + Kh_bar * cfg.R_theta / root_d
    )
    x0_max = float(np.linalg.norm(X[:, 0], axis=1).max())
    x_theory = consts.alpha * x0_max + input_term
    x_realized = float(np.linalg.norm(X, axis=2).max())
    x_bar = x_theory if x_bar_mode == "theoretical" else x_realized

    R = cfg.R_theta
    sigma = (
        ((2.0 * x_bar * caps["X1"] + 1.0 + 2.0 * delta_s * caps["Y3"]) / root_d) * R
        + (caps["Y2"] / d) * R**2
        + 2.0 * caps["X2"] * x_bar * delta_s
        + caps["Y1"] * delta_s**2
    )
    delta_psi = np.sqrt((4.0 * x_bar**2 + 1.0) / d)
    h_cap = caps["X1"] * R / root_d + caps["X2"] * delta_s
    q_cap = (
        R / root_d
        + delta_s**2 * caps["Y1"]
        + R**2 * caps["Y2"] / d
        + 2.0 * delta_s * caps["Y3"] * R / root_d
    )
    delta_v = float(np.hypot(h_cap, q_cap))

    gamma, gamma_se = _gamma_mc(history, tt, mc_samples, rng)
    beta = float(np.log1p(history.L * delta_psi**2 / cfg.lam))
    return BoundConstants(
        sigma=float(sigma),
        delta_psi=float(delta_psi),
        delta_v=delta_v,
        gamma=gamma,
        gamma_stderr=gamma_se,
        beta=beta,
        x_bar=float(x_bar),
        delta=float(delta),
        details={
            **caps,
            "Ks_bar": Ks_bar,
            "Kh_bar": Kh_bar,
            "x_bar_theoretical": x_theory,
            "x_bar_realized": x_realized,
            "x_bar_mode": x_bar_mode,
            "h_cap": h_cap,
            "q_cap": q_cap,
            "mc_samples": int(mc_samples),
        },
    )


def regret_bound_eval(consts, T, L, lam, R_theta, d, n, delta):
    """Literal high-probability regret bound, vectorized over L.

    Returns an array matching the shape of L (or a scalar for scalar L).
    """
    if not 0.0 < delta <= 1.0 / 3.0:
        raise ValueError("delta must lie in (0, 1/3]")
    L_arr = np.asarray(L, dtype=float)
    log_inv = np.log(1.0 / delta)
    beta = np.log1p(L_arr * consts.delta_psi**2 / lam)
    term1 = consts.sigma * np.sqrt(2.0 * T * L_arr * log_inv)
    inner = consts.sigma * np.sqrt(2.0 * d * n * beta + 2.0 * log_inv) + (
        R_theta + 2.0 * consts.delta_v
    ) * np.sqrt(lam)
    term2 = (
        consts.delta_psi
        * T
        * (1.0 / np.sqrt(lam) + 4.0 * np.sqrt(L_arr) / np.sqrt(consts.gamma))
        * inner
    )
    out = term1 + term2
    return float(out) if np.isscalar(L) or np.ndim(L) == 0 else out


def param_error_curve(theta_history, tt):
    """Per-episode ||theta^l_{1:T} - theta*_{1:T}||_F / T (the learning curve)."""
    TH = np.asarray(theta_history, dtype=float)
    ref = tt.stack.data
    if TH.ndim != 3 or TH.shape[1:] != ref.shape:
        raise ValueError(
            f"theta history rows must have shape {ref.shape}, got {TH.shape[1:]}"
        )
    T = ref.shape[0] - 1
    diff = TH[:, 1:, :] - ref[None, 1:, :]
    return np.linalg.norm(diff.reshape(TH.shape[0], -1), axis=1) / T
