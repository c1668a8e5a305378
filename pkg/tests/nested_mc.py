"""Nested Monte-Carlo evaluation of the true value-weight definitions.

This deliberately avoids the production recursion: every conditional
expectation is unrolled by simulation, so agreement with the moment-based
route is a genuine two-sided check rather than the same code run twice.

The h estimates are plain nested means.  The q estimates contain a
quadratic E[h]' Y2 E[h], which a naive plug-in would bias by the inner
variance; splitting the inner draws into two independent halves and taking
the bilinear form between the half-means keeps every term unbiased.
"""

import numpy as np

from exolqr.environment import _truncated_draws, mixture_step_batch
from exolqr.lsvi import notation_matrices


def _estimates(kern, sol, cost, t, S, inner, rng):
    """Per-row unbiased estimates of (h_t(s), q_t(s)) for each s in S."""
    if t == sol.T:
        H = S @ cost.F.T
        Q = np.einsum("ka,ab,kb->k", S, cost.M, S)
        return H, Q
    X1, X2, Y1, Y2, Y3 = notation_matrices(t, sol, cost)
    N, K = S.shape[0], inner
    S2 = mixture_step_batch(kern, np.repeat(S, K, axis=0), rng, t=t)
    H2, Q2 = _estimates(kern, sol, cost, t + 1, S2, inner, rng)
    H2 = H2.reshape(N, K, -1)
    Q2 = Q2.reshape(N, K)
    Eh = H2.mean(axis=1)
    half = K // 2
    EhA = H2[:, :half].mean(axis=1)
    EhB = H2[:, half:].mean(axis=1)
    H = Eh @ X1.T + S @ X2.T
    Q = (
        Q2.mean(axis=1)
        + np.einsum("ka,ab,kb->k", S, Y1, S)
        + np.einsum("ka,ab,kb->k", EhA, Y2, EhB)
        + 2.0 * np.einsum("ka,ab,kb->k", S, Y3, Eh)
    )
    return H, Q


def nested_theta_star(kern, sol, cost, t, outer, inner, rng):
    """theta*_t entries and their standard errors by pure simulation.

    Standard errors are taken across the outer draws, which are iid, so
    they stay valid no matter how the inner draws are reused.
    """
    if inner < 4:
        raise ValueError("need at least 4 inner draws for the half split")
    d = kern.feature.d
    n = cost.n
    est = np.empty(d * (n + 1))
    se = np.empty(d * (n + 1))
    for i, comp in enumerate(kern.components_at(t - 1)):
        S = _truncated_draws(comp, kern.delta_s, outer, rng)
        H, Q = _estimates(kern, sol, cost, t, S, inner, rng)
        block = np.concatenate([H, Q[:, None]], axis=1)
        lo, hi = i * (n + 1), (i + 1) * (n + 1)
        est[lo:hi] = block.mean(axis=0)
        se[lo:hi] = block.std(axis=0, ddof=1) / np.sqrt(outer)
    return est, se
