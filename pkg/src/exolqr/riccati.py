"""Finite-horizon linear-quadratic control core.

The plant is deterministic, x_{t+1} = A x_t + B u_t, and the stage cost is
a quadratic form in (x, s, u) where s is an exogenous signal the controller
observes but does not influence.  The backward Riccati pass below produces
the quadratic part G_t of the value function together with the three
feedback gains of the greedy controller:

    u_t = Kx_t x + Ks_t s + Kh_t v,

where v is whatever estimate of the expected affine value term the caller
supplies (the learner and the oracle disagree only about v, never about the
gains).  Everything here is a pure function of its inputs.
"""

import numpy as np

__all__ = [
    "LinearSystem",
    "CostMatrices",
    "RiccatiSolution",
    "AssumptionReport",
    "riccati_backward",
    "feedback_gains",
    "closed_loop_transition",
    "stage_cost",
    "validate_assumptions",
    "psd_sqrt",
]

# Relative singular-value cutoff for every rank decision in this module.
RANK_RTOL = 1e-8
# Absolute slack when declaring a symmetric matrix PSD.
PSD_SLACK = 1e-10


def _square(value, name):
    M = np.asarray(value, dtype=float)
    if M.ndim == 0:
        M = M.reshape(1, 1)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {M.shape}")
    return M


class LinearSystem:
    """Deterministic dynamics x_{t+1} = A x_t + B u_t.

    A is n-by-n, B is n-by-m.  A one-dimensional B is read as a single
    input column.
    """

    def __init__(self, A, B):
        A = _square(A, "A")
        B = np.asarray(B, dtype=float)
        if B.ndim == 0:
            B = B.reshape(1, 1)
        elif B.ndim == 1:
            B = B[:, None]
        if B.ndim != 2 or B.shape[0] != A.shape[0]:
            raise ValueError(f"B must have {A.shape[0]} rows, got shape {B.shape}")
        self.A = A
        self.B = B
        self.n = A.shape[0]
        self.m = B.shape[1]

    def controllability_matrix(self):
        """Stack [B, AB, ..., A^(n-1) B], shape n by n*m."""
        blocks = []
        Ak_B = self.B
        for _ in range(self.n):
            blocks.append(Ak_B)
            Ak_B = self.A @ Ak_B
        return np.hstack(blocks)

    def step(self, x, u):
        return self.A @ x + self.B @ u


class CostMatrices:
    """Stage-cost weights for c(x, s, u) = [x; s; u]' P [x; s; u].

    P is assembled from the blocks

        P = [[W, F, D],
             [F', M, H],
             [D', H', R]],

    with W (n,n), F (n,p), D (n,m), M (p,p), H (p,m), R (m,m).  Omitted
    off-diagonal blocks and M default to zeros of the inferred shape.
    """

    def __init__(self, W, R, F=None, D=None, M=None, H=None):
        W = _square(W, "W")
        R = _square(R, "R")
        n, m = W.shape[0], R.shape[0]

        if F is not None:
            F = np.asarray(F, dtype=float)
            if F.ndim == 0:
                F = F.reshape(1, 1)
            elif F.ndim == 1:
                F = F[:, None]
            if F.shape[0] != n:
                raise ValueError(f"F must have {n} rows, got shape {F.shape}")
        if M is not None:
            M = _square(M, "M")
        if M is None and F is None:
            p = 1
        elif M is None:
            p = F.shape[1]
        else:
            p = M.shape[0]
            if F is not None and F.shape[1] != p:
                raise ValueError("F and M disagree about the dimension of s")
        if F is None:
            F = np.zeros((n, p))
        if M is None:
            M = np.zeros((p, p))

        if D is None:
            D = np.zeros((n, m))
        else:
            D = np.asarray(D, dtype=float)
            if D.ndim == 0:
                D = D.reshape(1, 1)
            elif D.ndim == 1:
                D = D[:, None]
            if D.shape != (n, m):
                raise ValueError(f"D must have shape {(n, m)}, got {D.shape}")
        if H is None:
            H = np.zeros((p, m))
        else:
            H = np.asarray(H, dtype=float)
            if H.ndim == 0:
                H = H.reshape(1, 1)
            elif H.ndim == 1:
                H = H.reshape(p, -1)
            if H.shape != (p, m):
                raise ValueError(f"H must have shape {(p, m)}, got {H.shape}")

        self.W, self.F, self.D, self.M, self.H, self.R = W, F, D, M, H, R
        self.n, self.p, self.m = n, p, m

    @property
    def P(self):
        """Assembled block weight matrix, (n+p+m) square."""
        return np.block(
            [
                [self.W, self.F, self.D],
                [self.F.T, self.M, self.H],
                [self.D.T, self.H.T, self.R],
            ]
        )


class RiccatiSolution:
    """Backward-pass output over a horizon of T steps.

    Attributes
    ----------
    G : (T+1, n, n) array, value-function quadratic term, G[T] = W.
    Kx, Ks, Kh : (T, m, n), (T, m, p), (T, m, n) arrays, feedback gains;
        the gains at index t are built from G[t+1].
    Ac : (T, n, n) array, closed-loop matrices A + B Kx[t].
    T : horizon length.
    sys, cost : the inputs the pass was run on, kept for downstream use.
    """

    def __init__(self, G, Kx, Ks, Kh, Ac, sys, cost):
        self.G = G
        self.Kx = Kx
        self.Ks = Ks
        self.Kh = Kh
        self.Ac = Ac
        self.T = G.shape[0] - 1
        self.sys = sys
        self.cost = cost

    def gains(self, t):
        return self.Kx[t], self.Ks[t], self.Kh[t]

    def residuals(self):
        """Max-abs defect of each backward step when G[t+1] is re-substituted."""
        out = np.empty(self.T)
        for t in range(self.T):
            rhs = _backward_step(self.G[t + 1], self.sys, self.cost)[0]
            out[t] = np.max(np.abs(self.G[t] - rhs))
        return out


def _solve_pd(S, rhs):
    """Solve S X = rhs for symmetric positive definite S.

    The Cholesky factorization doubles as the definiteness check; a failure
    there means the effective input weight lost positive definiteness.
    """
    S = 0.5 * (S + S.T)
    np.linalg.cholesky(S)
    return np.linalg.solve(S, rhs)


def _gain_step(G_next, sys, cost):
    """Gains built from the next-step quadratic term G_next."""
    A, B = sys.A, sys.B
    n, p = cost.n, cost.p
    S = cost.R + B.T @ G_next @ B
    rhs = np.hstack([B.T @ G_next @ A + cost.D.T, cost.H.T, B.T])
    sol = _solve_pd(S, rhs)
    Kx = -sol[:, :n]
    Ks = -sol[:, n : n + p]
    Kh = -sol[:, n + p :]
    return Kx, Ks, Kh


def _backward_step(G_next, sys, cost):
    """One Riccati step: returns (G_t, Kx, Ks, Kh) from G_{t+1}."""
    A, B = sys.A, sys.B
    Kx, Ks, Kh = _gain_step(G_next, sys, cost)
    G = A.T @ G_next @ A + cost.W + (A.T @ G_next @ B + cost.D) @ Kx
    G = 0.5 * (G + G.T)
    return G, Kx, Ks, Kh


def riccati_backward(sys, cost, T):
    """Run the backward Riccati recursion over horizon T.

    Terminal condition G_T = W (no terminal input, so the terminal cost is
    the stage cost at u = 0).  Each step symmetrizes G_t to stop round-off
    drift from accumulating across long horizons.

    Raises numpy.linalg.LinAlgError if R + B'G B stops being positive
    definite, and ValueError on dimension mismatch or T < 1.
    """
    if cost.n != sys.n or cost.m != sys.m:
        raise ValueError(
            f"cost blocks sized for (n={cost.n}, m={cost.m}) "
            f"but system has (n={sys.n}, m={sys.m})"
        )
    T = int(T)
    if T < 1:
        raise ValueError("horizon T must be at least 1")
    n, m, p = sys.n, sys.m, cost.p

    G = np.empty((T + 1, n, n))
    Kx = np.empty((T, m, n))
    Ks = np.empty((T, m, p))
    Kh = np.empty((T, m, n))
    Ac = np.empty((T, n, n))

    W = cost.W
    G[T] = 0.5 * (W + W.T)
    for t in range(T - 1, -1, -1):
        G[t], Kx[t], Ks[t], Kh[t] = _backward_step(G[t + 1], sys, cost)
        Ac[t] = sys.A + sys.B @ Kx[t]
    return RiccatiSolution(G, Kx, Ks, Kh, Ac, sys, cost)


def feedback_gains(G_next, sys, cost):
    """Gain triple (Kx, Ks, Kh) for a single next-step quadratic term."""
    G_next = _square(G_next, "G_next")
    if G_next.shape[0] != sys.n:
        raise ValueError(f"G_next must be {sys.n} square, got {G_next.shape}")
    return _gain_step(G_next, sys, cost)


def closed_loop_transition(sol, sys, t1, t2):
    """Product of closed-loop matrices from time t1 up to (not incl.) t2.

    Ordering is A_c(t2-1) ... A_c(t1+1) A_c(t1): the factor at t1 acts
    first, so it sits rightmost.  t1 == t2 gives the identity.
    """
    if not (0 <= t1 <= t2 <= sol.T):
        raise ValueError(f"need 0 <= t1 <= t2 <= {sol.T}, got ({t1}, {t2})")
    out = np.eye(sys.n)
    for i in range(t1, t2):
        out = sol.Ac[i] @ out
    return out


def stage_cost(x, s, u, cost):
    """Evaluate [x; s; u]' P [x; s; u]."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    s = np.atleast_1d(np.asarray(s, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if x.shape != (cost.n,) or s.shape != (cost.p,) or u.shape != (cost.m,):
        raise ValueError(
            f"expected shapes ({cost.n},), ({cost.p},), ({cost.m},); "
            f"got {x.shape}, {s.shape}, {u.shape}"
        )
    z = np.concatenate([x, s, u])
    return float(z @ cost.P @ z)


def psd_sqrt(W):
    """Symmetric square root of a PSD matrix.

    Eigendecompose, clip tiny negative eigenvalues at zero, rebuild.  The
    clip keeps matrices that are PSD only up to round-off usable.
    """
    W = _square(W, "W")
    w, V = np.linalg.eigh(0.5 * (W + W.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def _rank(Mat):
    sv = np.linalg.svd(Mat, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int(np.count_nonzero(sv > RANK_RTOL * sv[0]))


class AssumptionReport:
    """Structural diagnostics; informative, never raises.

    Attributes
    ----------
    controllability_rank / controllable : rank of [B, AB, ...] and whether
        it reaches n.
    observability_rank / observable : rank of the stacked observability
        matrix built from the PSD square root of W.
    p_eigenvalues / p_psd : spectrum of the assembled P and its PSD flag.
    r_eigenvalues / r_pd : spectrum of R and its positive-definite flag.
    """

    def __init__(self, sys, cost):
        self.n = sys.n
        ctrb = sys.controllability_matrix()
        self.controllability_rank = _rank(ctrb)
        self.controllable = self.controllability_rank == sys.n

        Wh = psd_sqrt(cost.W)
        rows = []
        Wh_Ak = Wh
        for _ in range(sys.n):
            rows.append(Wh_Ak)
            Wh_Ak = Wh_Ak @ sys.A
        self.observability_rank = _rank(np.vstack(rows))
        self.observable = self.observability_rank == sys.n

        self.p_eigenvalues = np.linalg.eigvalsh(0.5 * (cost.P + cost.P.T))
        self.p_psd = bool(self.p_eigenvalues.min() >= -PSD_SLACK)
        self.r_eigenvalues = np.linalg.eigvalsh(0.5 * (cost.R + cost.R.T))
        self.r_pd = bool(self.r_eigenvalues.min() > 0.0)

    @property
    def passed(self):
        return self.controllable and self.observable and self.p_psd and self.r_pd

    def __str__(self):
        lines = [
            f"controllability rank {self.controllability_rank}/{self.n}: "
            f"{'pass' if self.controllable else 'FAIL'}",
            f"observability rank  {self.observability_rank}/{self.n}: "
            f"{'pass' if self.observable else 'FAIL'}",
            f"P eigenvalues [{self.p_eigenvalues.min():.3e}, "
            f"{self.p_eigenvalues.max():.3e}]: {'pass' if self.p_psd else 'FAIL'}",
            f"R eigenvalues [{self.r_eigenvalues.min():.3e}, "
            f"{self.r_eigenvalues.max():.3e}]: {'pass' if self.r_pd else 'FAIL'}",
        ]
        return "\n".join(lines)


def validate_assumptions(sys, cost):
    """Rank and spectrum checks behind the controller's standing assumptions."""
    return AssumptionReport(sys, cost)
