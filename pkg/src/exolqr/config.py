"""Experiment configuration: TOML schema, validation, cost expansion.

The file format is plain TOML with five sections (system, cost, kernel,
learner, evaluation, output).  The cost section accepts either the full
six-block form or the tracking shorthand (C, M, R), which expands to
W = C'MC, F = -C'M, H = 0, D = 0.  A master seed is mandatory; nothing in
the pipeline ever falls back to wall-clock seeding.
"""

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from dataclasses import dataclass, field

import numpy as np

from .environment import (
    FeatureMap,
    GaussianComponent,
    MixtureKernel,
    PointMassComponent,
    gaussian_bump_features,
)
from .lsvi import LearnerConfig
from .riccati import LinearSystem, CostMatrices

__all__ = ["ExperimentConfig", "ConfigError", "load_config", "parse_config"]

EVAL_DEFAULTS = {"N_eval": 500, "mc_samples": 10_000, "delta": 0.05}
OUTPUT_DEFAULTS = {"directory": "runs/out", "plots": True, "loglog_regret": False}


class ConfigError(ValueError):
    """Anything wrong with the experiment file: syntax, types, dimensions."""


@dataclass
class ExperimentConfig:
    """Validated experiment inputs, ready to hand to the pipeline."""

    sys: LinearSystem
    cost: CostMatrices
    kern: MixtureKernel
    fm: FeatureMap
    learner: LearnerConfig
    N_eval: int
    mc_samples: int
    delta: float
    out_dir: str
    plots: bool
    loglog_regret: bool
    raw: dict = field(repr=False)


def _matrix(section, key, data, rows=None, cols=None):
    if key not in data:
        raise ConfigError(f"[{section}] is missing '{key}'")
    try:
        arr = np.array(data[key], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {key} is not numeric: {exc}") from None
    arr = np.atleast_2d(arr)
    if rows is not None and arr.shape[0] != rows:
        raise ConfigError(
            f"[{section}] {key} must have {rows} rows, got {arr.shape[0]}"
        )
    if cols is not None and arr.shape[1] != cols:
        raise ConfigError(
            f"[{section}] {key} must have {cols} columns, got {arr.shape[1]}"
        )
    return arr


def _vector(section, key, data, size=None):
    if key not in data:
        raise ConfigError(f"[{section}] is missing '{key}'")
    arr = np.atleast_1d(np.array(data[key], dtype=float))
    if arr.ndim != 1:
        raise ConfigError(f"[{section}] {key} must be a flat list")
    if size is not None and arr.size != size:
        raise ConfigError(f"[{section}] {key} must have {size} entries")
    return arr


def _scalar(section, key, data, default=None, kind=float):
    if key not in data:
        if default is None:
            raise ConfigError(f"[{section}] is missing '{key}'")
        return default
    try:
        return kind(data[key])
    except (TypeError, ValueError):
        raise ConfigError(f"[{section}] {key} must be a {kind.__name__}") from None


def _expand_cost(section, n):
    """Full blocks or the (C, M, R) tracking shorthand, never both."""
    has_short = "C" in section
    has_full = "W" in section or "F" in section
    if has_short and has_full:
        raise ConfigError("[cost] mixes the (C, M, R) shorthand with full blocks")
    try:
        if has_short:
            M = _matrix("cost", "M", section)
            p = M.shape[0]
            C = _matrix("cost", "C", section, rows=p, cols=n)
            R = _matrix("cost", "R", section)
            return CostMatrices(W=C.T @ M @ C, R=R, F=-C.T @ M, M=M)
        if "W" not in section or "R" not in section:
            raise ConfigError("[cost] needs W and R (or the C, M, R shorthand)")
        W = _matrix("cost", "W", section, rows=n, cols=n)
        kw = {
            key: np.asarray(section[key], dtype=float)
            for key in ("F", "D", "M", "H")
            if key in section
        }
        return CostMatrices(W=W, R=np.asarray(section["R"], dtype=float), **kw)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"[cost] {exc}") from None


def _build_kernel(section):
    delta_s = _scalar("kernel", "delta_s", section)
    if delta_s <= 0:
        raise ConfigError("[kernel] delta_s must be positive")
    centers = _vector("kernel", "centers", section)
    widths = _vector("kernel", "widths", section, size=centers.size)
    if np.any(widths <= 0):
        raise ConfigError("[kernel] widths must be positive")
    fm = FeatureMap(centers.size, gaussian_bump_features(centers, widths), delta_s)

    if "values" in section:  # point-mass components, mostly for smoke tests
        values = _vector("kernel", "values", section, size=centers.size)
        comps = [PointMassComponent(v) for v in values]
    else:
        means = _vector("kernel", "means", section, size=centers.size)
        stds = _vector("kernel", "stds", section, size=centers.size)
        if np.any(stds <= 0):
            raise ConfigError("[kernel] stds must be positive")
        comps = [GaussianComponent(m, s) for m, s in zip(means, stds)]
    return MixtureKernel(comps, fm), fm


def parse_config(data, origin="<config>"):
    """Validate a parsed TOML mapping into an ExperimentConfig."""
    for name in ("system", "cost", "kernel", "learner"):
        if name not in data:
            raise ConfigError(f"{origin}: missing [{name}] section")

    A = _matrix("system", "A", data["system"])
    if A.shape[0] != A.shape[1]:
        raise ConfigError("[system] A must be square")
    n = A.shape[0]
    B = np.array(data["system"].get("B"), dtype=float) if "B" in data["system"] else None
    if B is None:
        raise ConfigError("[system] is missing 'B'")
    try:
        sys = LinearSystem(A, B)
    except ValueError as exc:
        raise ConfigError(f"[system] {exc}") from None

    cost = _expand_cost(data["cost"], n)
    kern, fm = _build_kernel(data["kernel"])
    if cost.p != kern.p:
        raise ConfigError(
            f"cost expects environment dimension {cost.p}, kernel provides {kern.p}"
        )

    lrn = data["learner"]
    if "seed" not in lrn:
        raise ConfigError("[learner] seed is mandatory; refusing to improvise one")
    try:
        learner = LearnerConfig(
            lam=_scalar("learner", "lambda", lrn),
            R_theta=_scalar("learner", "R_theta", lrn),
            L=_scalar("learner", "L", lrn, kind=int),
            T=_scalar("learner", "T", lrn, kind=int),
            x0_mean=_vector("learner", "x0_mean", lrn, size=n),
            x0_cov=_matrix("learner", "x0_cov", lrn, rows=n, cols=n),
            s0_mean=_vector("learner", "s0_mean", lrn, size=kern.p),
            s0_cov=_matrix("learner", "s0_cov", lrn, rows=kern.p, cols=kern.p),
            seed=_scalar("learner", "seed", lrn, kind=int),
        )
    except (ValueError, np.linalg.LinAlgError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"[learner] {exc}") from None

    ev = data.get("evaluation", {})
    N_eval = _scalar("evaluation", "N_eval", ev, EVAL_DEFAULTS["N_eval"], int)
    mc_samples = _scalar(
        "evaluation", "mc_samples", ev, EVAL_DEFAULTS["mc_samples"], int
    )
    delta = _scalar("evaluation", "delta", ev, EVAL_DEFAULTS["delta"])
    if not 0.0 < delta <= 1.0 / 3.0:
        raise ConfigError("[evaluation] delta must lie in (0, 1/3]")

    out = data.get("output", {})
    out_dir = out.get("directory", OUTPUT_DEFAULTS["directory"])
    plots = bool(out.get("plots", OUTPUT_DEFAULTS["plots"]))
    loglog = bool(out.get("loglog_regret", OUTPUT_DEFAULTS["loglog_regret"]))

    return ExperimentConfig(
        sys=sys,
        cost=cost,
        kern=kern,
        fm=fm,
        learner=learner,
        N_eval=N_eval,
        mc_samples=mc_samples,
        delta=delta,
        out_dir=out_dir,
        plots=plots,
        loglog_regret=loglog,
        raw=data,
    )


def load_config(path):
    """Read and validate an experiment file; errors carry the file name."""
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(data, origin=str(path))
