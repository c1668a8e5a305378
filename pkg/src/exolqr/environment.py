"""Exogenous environment: feature maps, mixture kernels, moment estimates.

The exogenous state s evolves by a feature-weighted mixture: the next state
is drawn from component measure mu_i with probability phi_i(s).  The
simulator restricts itself to convex mixtures (weights nonnegative, summing
to one) because it has to sample; signed measures remain representable on
the learner side, which never samples from mu.

Every draw is truncated to the ball ||s|| <= delta_s by rejection.  Moment
estimates are plain Monte Carlo with per-entry standard errors, which the
oracle module propagates into its own tolerances.
"""

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "FeatureMap",
    "GaussianBumpFeatures",
    "gaussian_bump_features",
    "GaussianComponent",
    "PointMassComponent",
    "MixtureKernel",
    "KernelMoments",
    "FeatureAuditReport",
    "phi_eval",
    "sample_next",
    "sample_path",
    "estimate_moments",
    "feature_norm_audit",
]

# Cap on rejection-sampling rounds for a single batch of draws.
REJECTION_CAP = 10**6
# Moment estimation below this sample count is refused.
MIN_MC_SAMPLES = 1000
WEIGHT_TOL = 1e-12
NORM_SLACK = 1e-12


@dataclass(frozen=True)
class FeatureMap:
    """Known feature vector phi: R^p -> R^d with its state-norm bound.

    When norm_bound_enforced is set, any phi value with norm above
    1/sqrt(d) raises; otherwise a (deduplicated) warning is emitted.  The
    tracking example's bump map genuinely exceeds the bound near its
    centers, so enforcement defaults to off.
    """

    d: int
    evaluator: Callable
    delta_s: float
    norm_bound_enforced: bool = False

    def __call__(self, s):
        return phi_eval(self, s)

    def batch(self, S):
        """Evaluate phi row-wise on an (N, p) array of states."""
        S = np.asarray(S, dtype=float)
        if S.ndim == 1:
            S = S[:, None]
        if hasattr(self.evaluator, "batch"):
            out = np.asarray(self.evaluator.batch(S), dtype=float)
        else:
            out = np.stack([np.asarray(self.evaluator(row), dtype=float) for row in S])
        if out.shape != (S.shape[0], self.d):
            raise ValueError(
                f"feature evaluator returned shape {out.shape}, "
                f"expected {(S.shape[0], self.d)}"
            )
        if not np.all(np.isfinite(out)):
            raise ValueError("feature evaluator produced non-finite values")
        self._check_norm(float(np.max(np.linalg.norm(out, axis=1))))
        return out

    def _check_norm(self, worst):
        if worst > 1.0 / np.sqrt(self.d) + NORM_SLACK:
            if self.norm_bound_enforced:
                raise ValueError(
                    f"feature norm {worst:.6g} exceeds 1/sqrt(d) with enforcement on"
                )
            warnings.warn(
                "feature norm exceeds 1/sqrt(d); norm-dependent theory "
                "constants are loose for this map",
                RuntimeWarning,
                stacklevel=3,
            )


def phi_eval(fm, s):
    """Evaluate phi(s) for a single state inside the delta_s ball."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    if np.linalg.norm(s) > fm.delta_s + 1e-9:
        raise ValueError(f"state norm {np.linalg.norm(s):.6g} outside delta_s={fm.delta_s}")
    out = np.asarray(fm.evaluator(s), dtype=float)
    if out.shape != (fm.d,):
        raise ValueError(f"feature evaluator returned shape {out.shape}, expected ({fm.d},)")
    if not np.all(np.isfinite(out)):
        raise ValueError("feature evaluator produced non-finite values")
    fm._check_norm(float(np.linalg.norm(out)))
    return out


class GaussianBumpFeatures:
    """Normalized Gaussian bumps on a scalar state.

    phi_i(s) = f_i(s) / sum_j f_j(s) with f_i(s) = exp(-(s - c_i)^2 / (2 w_i^2)).
    Exponents are shifted by their max before exponentiation; the ratio is
    unchanged and never under/overflows.
    """

    def __init__(self, centers, widths):
        self.centers = np.asarray(centers, dtype=float)
        self.widths = np.asarray(widths, dtype=float)
        if self.centers.shape != self.widths.shape or self.centers.ndim != 1:
            raise ValueError("centers and widths must be matching 1-D arrays")
        if np.any(self.widths <= 0):
            raise ValueError("widths must be positive")

    def __call__(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        return self.batch(s[None, :])[0]

    def batch(self, S):
        x = np.asarray(S, dtype=float)[:, 0]
        g = -((x[:, None] - self.centers[None, :]) ** 2) / (2.0 * self.widths[None, :] ** 2)
        g -= g.max(axis=1, keepdims=True)
        f = np.exp(g)
        return f / f.sum(axis=1, keepdims=True)


def gaussian_bump_features(centers, widths):
    return GaussianBumpFeatures(centers, widths)


class GaussianComponent:
    """Gaussian component measure with independent coordinates."""

    kind = "gaussian"

    def __init__(self, mean, std):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.std = np.broadcast_to(np.asarray(std, dtype=float), self.mean.shape).astype(float)
        if np.any(self.std < 0):
            raise ValueError("std must be nonnegative")

    @property
    def dim(self):
        return self.mean.size

    def sample(self, rng, size):
        return rng.normal(self.mean, self.std, size=(size, self.dim))

    def params(self):
        return {"kind": self.kind, "mean": self.mean.tolist(), "std": self.std.tolist()}


class PointMassComponent:
    """Degenerate component concentrated at a single state."""

    kind = "point_mass"

    def __init__(self, value):
        self.value = np.atleast_1d(np.asarray(value, dtype=float))

    @property
    def dim(self):
        return self.value.size

    def sample(self, rng, size):
        return np.tile(self.value, (size, 1))

    def params(self):
        return {"kind": self.kind, "value": self.value.tolist()}


class MixtureKernel:
    """Ground-truth transition kernel P(s'|s) = phi(s)' mu(s').

    components is a list of exactly d measures matching the feature map.
    The kernel is time-invariant by default; components_at(t) is the hook
    for a time-varying variant and is what samplers and estimators consult.
    """

    def __init__(self, components, feature, components_at=None):
        components = list(components)
        if len(components) != feature.d:
            raise ValueError(
                f"kernel needs exactly d={feature.d} components, got {len(components)}"
            )
        dims = {c.dim for c in components}
        if len(dims) != 1:
            raise ValueError("all components must share the same state dimension")
        self.components = components
        self.feature = feature
        self.p = components[0].dim
        self.delta_s = float(feature.delta_s)
        self._components_at = components_at

    def components_at(self, t):
        if self._components_at is None:
            return self.components
        return self._components_at(t)

    def weights(self, s):
        """Mixture weights phi(s), verified to form a convex combination."""
        w = phi_eval(self.feature, s)
        if w.min() < -WEIGHT_TOL or abs(w.sum() - 1.0) > WEIGHT_TOL:
            raise ValueError(
                "feature weights do not form a convex mixture at this state "
                f"(min {w.min():.3g}, sum {w.sum():.12g})"
            )
        return np.clip(w, 0.0, None)


def _truncated_draws(comp, delta_s, size, rng):
    """size draws from comp conditioned on ||s|| <= delta_s, by rejection."""
    out = np.empty((size, comp.dim))
    filled = 0
    rounds = 0
    while filled < size:
        if rounds >= REJECTION_CAP:
            raise RuntimeError(
                f"rejection sampling exceeded {REJECTION_CAP} rounds; "
                "component mass inside the delta_s ball is too small"
            )
        batch = comp.sample(rng, size - filled)
        keep = batch[np.linalg.norm(batch, axis=1) <= delta_s]
        out[filled : filled + keep.shape[0]] = keep
        filled += keep.shape[0]
        rounds += 1
    return out


def sample_next(kern, s, rng, t=0):
    """One transition: pick component i with probability phi_i(s), then draw."""
    w = kern.weights(s)
    i = int(rng.choice(kern.feature.d, p=w / w.sum()))
    comp = kern.components_at(t)[i]
    return _truncated_draws(comp, kern.delta_s, 1, rng)[0]


def sample_path(kern, s0, T, rng):
    """Roll T transitions from s0; returns (T+1, p) array of states."""
    s0 = np.atleast_1d(np.asarray(s0, dtype=float))
    out = np.empty((T + 1, s0.size))
    out[0] = s0
    for t in range(T):
        out[t + 1] = sample_next(kern, out[t], rng, t=t)
    return out


def mixture_step_batch(kern, S, rng, t=0):
    """Advance many states by one transition each; S is (N, p).

    Components are drawn by inverse CDF on the per-row weights, then each
    component's assignees are filled by one truncated batch draw, in fixed
    component order so the stream consumption is reproducible.
    """
    S = np.asarray(S, dtype=float)
    W = kern.feature.batch(S)
    if W.min() < -WEIGHT_TOL or np.max(np.abs(W.sum(axis=1) - 1.0)) > WEIGHT_TOL:
        raise ValueError("feature weights do not form a convex mixture")
    cum = np.cumsum(np.clip(W, 0.0, None), axis=1)
    r = rng.random((S.shape[0], 1)) * cum[:, -1:]
    idx = np.minimum((r > cum).sum(axis=1), kern.feature.d - 1)
    out = np.empty((S.shape[0], kern.p))
    comps = kern.components_at(t)
    for i in range(kern.feature.d):
        mask = idx == i
        k = int(mask.sum())
        if k:
            out[mask] = _truncated_draws(comps[i], kern.delta_s, k, rng)
    return out


def sample_paths(kern, s0, T, n_paths, rng):
    """n_paths independent T-step paths from the same s0; (n_paths, T+1, p)."""
    s0 = np.atleast_1d(np.asarray(s0, dtype=float))
    out = np.empty((n_paths, T + 1, s0.size))
    out[:, 0] = s0
    for t in range(T):
        out[:, t + 1] = mixture_step_batch(kern, out[:, t], rng, t=t)
    return out


@dataclass(frozen=True)
class KernelMoments:
    """Monte-Carlo moments of each component measure, with standard errors.

    Phi        (d, d): row i is the estimate of E_{mu_i}[phi(s)'].
    m_bar      (d*p,): stacked E_{mu_i}[s].
    phi_outer  (d, d, d): per-component E_{mu_i}[phi phi'].
    quad_Y1    (d,): E_{mu_i}[s' Y1 s] for the caller-supplied Y1.
    cross_Y3   (d, d*n): E_{mu_i}[phi(s)' kron s' Y3] rows.
    std_errors: dict keyed by field name, same shapes as the fields.
    """

    Phi: np.ndarray
    m_bar: np.ndarray
    phi_outer: np.ndarray
    quad_Y1: np.ndarray
    cross_Y3: np.ndarray
    mc_samples: int
    std_errors: dict = field(repr=False)

    def __post_init__(self):
        d = self.Phi.shape[0]
        for i in range(d):
            row_norm = float(np.linalg.norm(self.Phi[i]))
            row_err = float(np.linalg.norm(self.std_errors["Phi"][i]))
            if row_norm > 1.0 + 3.0 * row_err:
                raise ValueError(
                    f"row {i} of Phi has norm {row_norm:.6g}, above 1 by more "
                    "than three standard errors; mixture weights are broken"
                )

    def m_rows(self):
        """Per-component means, shape (d, p)."""
        d = self.Phi.shape[0]
        return self.m_bar.reshape(d, -1)


def _check_Y_shapes(p, Y1, Y3):
    Y1 = np.atleast_2d(np.asarray(Y1, dtype=float))
    Y3 = np.atleast_2d(np.asarray(Y3, dtype=float))
    if Y1.shape != (p, p):
        raise ValueError(f"Y1 must be {(p, p)}, got {Y1.shape}")
    if Y3.shape[0] != p:
        raise ValueError(f"Y3 must have {p} rows, got {Y3.shape}")
    return Y1, Y3


def moments_from_samples(samples, features, Y1, Y3):
    """KernelMoments from stored per-component draws.

    samples is a list of d arrays, each (N, p), one per component; features
    holds the matching phi(s) rows.  Keeping this separate from the drawing
    step lets callers reuse one sample set across many (Y1, Y3) pairs and
    slice it into batches for error propagation.
    """
    d = len(samples)
    p = samples[0].shape[1]
    Y1, Y3 = _check_Y_shapes(p, Y1, Y3)
    n = Y3.shape[1]
    mc_samples = samples[0].shape[0]

    Phi = np.empty((d, d))
    m_bar = np.empty(d * p)
    phi_outer = np.empty((d, d, d))
    quad_Y1 = np.empty(d)
    cross_Y3 = np.empty((d, d * n))
    se = {
        "Phi": np.empty((d, d)),
        "m_bar": np.empty(d * p),
        "phi_outer": np.empty((d, d, d)),
        "quad_Y1": np.empty(d),
        "cross_Y3": np.empty((d, d * n)),
    }

    for i in range(d):
        S = samples[i]
        F = features[i]
        if S.shape[0] != mc_samples:
            raise ValueError("per-component sample counts must match")
        root_n = np.sqrt(S.shape[0])

        Phi[i] = F.mean(axis=0)
        se["Phi"][i] = F.std(axis=0, ddof=1) / root_n

        m_bar[i * p : (i + 1) * p] = S.mean(axis=0)
        se["m_bar"][i * p : (i + 1) * p] = S.std(axis=0, ddof=1) / root_n

        outer = np.einsum("ka,kb->kab", F, F)
        phi_outer[i] = outer.mean(axis=0)
        se["phi_outer"][i] = outer.std(axis=0, ddof=1) / root_n

        quad = np.einsum("ka,ab,kb->k", S, Y1, S)
        quad_Y1[i] = quad.mean()
        se["quad_Y1"][i] = quad.std(ddof=1) / root_n

        sY3 = S @ Y3
        cross = np.einsum("ka,kb->kab", F, sY3).reshape(S.shape[0], d * n)
        cross_Y3[i] = cross.mean(axis=0)
        se["cross_Y3"][i] = cross.std(axis=0, ddof=1) / root_n

    return KernelMoments(
        Phi=Phi,
        m_bar=m_bar,
        phi_outer=phi_outer,
        quad_Y1=quad_Y1,
        cross_Y3=cross_Y3,
        mc_samples=mc_samples,
        std_errors=se,
    )


def draw_component_samples(kern, mc_samples, rng, t=0):
    """Truncated draws plus features for every component at step t."""
    samples, features = [], []
    for comp in kern.components_at(t):
        S = _truncated_draws(comp, kern.delta_s, mc_samples, rng)
        F = kern.feature.batch(S)
        if not (np.all(np.isfinite(S)) and np.all(np.isfinite(F))):
            raise ValueError("non-finite moment samples")
        samples.append(S)
        features.append(F)
    return samples, features


def estimate_moments(kern, Y1, Y3, mc_samples, rng, t=0):
    """Estimate the component moments feeding the true-parameter recursion.

    Y1 (p, p) and Y3 (p, n) vary per time step through the feedback gains,
    so the caller passes them in.  Draws are independent across components.
    """
    mc_samples = int(mc_samples)
    if mc_samples < MIN_MC_SAMPLES:
        raise ValueError(f"mc_samples must be at least {MIN_MC_SAMPLES}")
    _check_Y_shapes(kern.p, Y1, Y3)
    samples, features = draw_component_samples(kern, mc_samples, rng, t=t)
    return moments_from_samples(samples, features, Y1, Y3)


@dataclass(frozen=True)
class FeatureAuditReport:
    """Worst feature norm seen over sampled states, scaled by sqrt(d)."""

    max_scaled_norm: float
    flagged: bool
    n_samples: int

    def __str__(self):
        status = "EXCEEDS 1 (theory constants loose)" if self.flagged else "within bound"
        return (
            f"max sqrt(d)*||phi(s)|| over {self.n_samples} sampled states: "
            f"{self.max_scaled_norm:.6f} ({status})"
        )


def feature_norm_audit(fm, rng, n_samples=10_000, p=1):
    """Sample the delta_s ball and report max sqrt(d)*||phi||; never aborts."""
    direction = rng.normal(size=(n_samples, p))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = fm.delta_s * rng.uniform(size=(n_samples, 1)) ** (1.0 / p)
    S = direction * radius
    if hasattr(fm.evaluator, "batch"):
        F = np.asarray(fm.evaluator.batch(S), dtype=float)
    else:
        F = np.stack([np.asarray(fm.evaluator(row), dtype=float) for row in S])
    max_scaled = float(np.sqrt(fm.d) * np.linalg.norm(F, axis=1).max())
    return FeatureAuditReport(max_scaled, max_scaled > 1.0, n_samples)
