"""Command-line experiment driver.

Verbs: run (full pipeline), plot (re-render figures from a finished run),
oracle (ground-truth weights only), check-iss (stability envelope), and
bound (theoretical regret curve).  Exit codes: 0 success, 1 configuration
problem, 2 a pipeline stage failed.

The master seed lives in the config (or the --seed override) and every
random stream derives from it: the learner spawns per-episode streams from
the seed itself, while evaluation, oracle, and comparison streams use
SeedSequence([seed, k]) with distinct fixed k, so no two stages share a
stream and reruns are bit-identical.
"""

import argparse
import os
import sys as _sys
import time
import warnings
from dataclasses import replace

import numpy as np

from . import __version__, reporting
from .analysis import (
    bound_constants,
    iss_check,
    iss_constants,
    param_error_curve,
    regret_bound_eval,
)
from .config import ConfigError, load_config
from .environment import sample_paths
from .lsvi import greedy_action, run_lsvi
from .oracle import regret_curve, true_theta_backward
from .reporting import ReportingError
from .riccati import riccati_backward

__all__ = ["main", "run_experiment", "StageError"]

# Fixed sub-seed tags; the learner itself spawns from the bare seed.
_ORACLE_TAG = 1
_EVAL_TAG = 2
_GAMMA_TAG = 3
_COMPARE_TAG = 4


class StageError(RuntimeError):
    """A pipeline stage blew up; carries the stage name for exit code 2."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def _stream(seed, tag):
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))


class _Pipeline:
    """Shared stage bookkeeping: timing, manifest updates, failure marks."""

    def __init__(self, cfg, out_dir, config_path, quiet):
        self.cfg = cfg
        self.out_dir = out_dir
        self.quiet = quiet
        self.manifest = reporting.new_manifest(
            cfg.raw, cfg.learner.seed, config_path
        )

    def say(self, msg):
        if not self.quiet:
            print(msg, flush=True)

    def stage(self, name, fn):
        tic = time.perf_counter()
        try:
            out = fn()
        except Exception as exc:
            self.manifest["status"] = "failed"
            self.manifest["failed_stage"] = name
            self.manifest["stage_seconds"][name] = time.perf_counter() - tic
            reporting.write_manifest(self.out_dir, self.manifest)
            raise StageError(name, exc) from exc
        dt = time.perf_counter() - tic
        self.manifest["stage_seconds"][name] = dt
        self.say(f"  {name}: {dt:.2f}s")
        return out

    def emit(self, name, writer, *args):
        writer(os.path.join(self.out_dir, name), *args)
        reporting.add_file(self.manifest, self.out_dir, name)

    def finish(self):
        self.manifest["status"] = "complete"
        return reporting.write_manifest(self.out_dir, self.manifest)


def _prepare(args, need_config=True):
    """Load + override the config; create the output directory."""
    if need_config and not args.config:
        raise ConfigError("--config is required for this verb")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.learner = replace(cfg.learner, seed=int(args.seed))
        cfg.raw.setdefault("learner", {})["seed"] = int(args.seed)
    if args.episodes is not None:
        if args.episodes < 1:
            raise ConfigError("--episodes must be at least 1")
        cfg.learner = replace(cfg.learner, L=int(args.episodes))
        cfg.raw.setdefault("learner", {})["L"] = int(args.episodes)
    out_dir = args.out or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    return cfg, out_dir


def _comparison_rollout(stack_learned, stack_opt, sol, sys, kern, x0, s0, rng):
    """Roll both policies from one initial state on one shared s-path."""
    T = sol.T
    S = sample_paths(kern, s0, T, 1, rng)[0]  # (T+1, p)
    fm = kern.feature
    out = {}
    for key, stack in (("learned", stack_learned), ("opt", stack_opt)):
        X = np.empty((T + 1, sys.n))
        U = np.empty((T, sys.m))
        X[0] = x0
        for t in range(T):
            U[t] = greedy_action(X[t], S[t], t, stack, sol, fm)
            X[t + 1] = sys.step(X[t], U[t])
        out[key] = (X, U)
    return S, out["learned"], out["opt"]


def run_experiment(cfg, out_dir, config_path=None, quiet=False):
    """Full pipeline; returns the manifest path.

    Stage order: riccati, learn, oracle, regret, param_error, iss, bound,
    report, plots.  A stage failure writes a manifest marked failed (with
    whatever artifacts were already checksummed) and raises StageError.
    """
    pipe = _Pipeline(cfg, out_dir, config_path, quiet)
    seed = cfg.learner.seed
    lrn = cfg.learner
    pipe.say(f"run: L={lrn.L} T={lrn.T} seed={seed} -> {out_dir}")

    sol = pipe.stage("riccati", lambda: riccati_backward(cfg.sys, cfg.cost, lrn.T))
    history = pipe.stage(
        "learn", lambda: run_lsvi(lrn, cfg.sys, cfg.cost, cfg.kern, cfg.fm)
    )
    worst_phi = float(
        np.max(np.linalg.norm(history.dataset.PHI[: history.dataset.count], axis=2))
    )
    if worst_phi > 1.0 / np.sqrt(cfg.fm.d) + 1e-9:
        pipe.say(
            f"note: feature norms reach {worst_phi:.3g} > 1/sqrt(d), so the "
            "norm-dependent theory constants are loose for this map"
        )
    tt = pipe.stage(
        "oracle",
        lambda: true_theta_backward(
            cfg.kern,
            cfg.fm,
            cfg.cost,
            sol,
            lrn.T,
            cfg.mc_samples,
            _stream(seed, _ORACLE_TAG),
        ),
    )
    report = pipe.stage(
        "regret",
        lambda: regret_curve(
            history,
            tt,
            N_eval=cfg.N_eval,
            rng=_stream(seed, _EVAL_TAG),
            common_random_numbers=True,
        ),
    )
    perr = pipe.stage("param_error", lambda: param_error_curve(history.theta, tt))

    def _iss():
        consts = iss_constants(sol)
        X = history.dataset.X[: history.dataset.count]
        rep = iss_check(
            X, consts, cfg.sys, sol, lrn.R_theta, cfg.kern.delta_s, cfg.fm.d
        )
        return consts, rep

    consts, iss_rep = pipe.stage("iss", _iss)

    def _bound():
        bc = bound_constants(
            history,
            tt,
            consts,
            _stream(seed, _GAMMA_TAG),
            mc_samples=cfg.mc_samples,
            delta=cfg.delta,
        )
        grid = np.arange(1, lrn.L + 1)
        vals = regret_bound_eval(
            bc, lrn.T, grid, lrn.lam, lrn.R_theta, cfg.fm.d, cfg.sys.n, cfg.delta
        )
        return grid, vals

    grid, bvals = pipe.stage("bound", _bound)

    def _report():
        pipe.emit("regret.csv", reporting.write_regret_csv, report)
        pipe.emit(
            "param_error.csv",
            reporting.write_param_error_csv,
            np.arange(1, history.L + 1),
            perr,
        )
        S, (XL, UL), (XO, UO) = _comparison_rollout(
            history.stack_at(history.L - 1),
            tt.stack,
            sol,
            cfg.sys,
            cfg.kern,
            np.asarray(lrn.x0_mean, dtype=float),
            np.asarray(lrn.s0_mean, dtype=float),
            _stream(seed, _COMPARE_TAG),
        )
        pipe.emit("trajectory.csv", reporting.write_trajectory_csv, S, XL, UL, XO, UO)
        # Record how the side-by-side rollout was produced so the plot can be
        # interpreted: both policies start from the pinned initial condition
        # and see the identical exogenous draw.
        pipe.manifest["comparison_rollout"] = {
            "x0": [float(v) for v in np.asarray(lrn.x0_mean, dtype=float)],
            "s0": [float(v) for v in np.asarray(lrn.s0_mean, dtype=float)],
            "shared_exogenous_path": True,
        }
        pipe.emit("iss_report.csv", reporting.write_iss_csv, iss_rep)
        pipe.emit("bound_curve.csv", reporting.write_bound_csv, grid, bvals)
        pipe.emit("theta_history.csv", reporting.write_theta_history_csv, history.theta)
        pipe.emit("theta_true.csv", reporting.write_theta_true_csv, tt.stack)

    pipe.stage("report", _report)

    if cfg.plots:

        def _plots():
            for name in reporting.render_plots(out_dir, cfg.loglog_regret):
                reporting.add_file(pipe.manifest, out_dir, name)

        pipe.stage("plots", _plots)

    path = pipe.finish()
    pipe.say(f"manifest: {path}")
    if not iss_rep.passed:
        pipe.say("note: ISS envelope violated somewhere; see iss_report.csv")
    return path


def _cmd_run(args):
    cfg, out_dir = _prepare(args)
    run_experiment(cfg, out_dir, config_path=args.config, quiet=args.quiet)
    return 0


def _cmd_plot(args):
    if args.out:
        out_dir = args.out
    elif args.config:
        out_dir = load_config(args.config).out_dir
    else:
        raise ConfigError("plot needs --out (or --config to locate the run)")
    if not os.path.isdir(out_dir):
        raise ConfigError(f"{out_dir} is not a directory")
    loglog = False
    if args.config:
        loglog = load_config(args.config).loglog_regret
    try:
        manifest = reporting.load_manifest(out_dir)
    except FileNotFoundError:
        manifest = None
    made = reporting.render_plots(out_dir, loglog)
    if manifest is not None:
        for name in made:
            reporting.add_file(manifest, out_dir, name)
        reporting.write_manifest(out_dir, manifest)
    if not args.quiet:
        print("wrote " + ", ".join(made))
    return 0


def _cmd_oracle(args):
    cfg, out_dir = _prepare(args)
    pipe = _Pipeline(cfg, out_dir, args.config, args.quiet)
    seed = cfg.learner.seed
    sol = pipe.stage(
        "riccati", lambda: riccati_backward(cfg.sys, cfg.cost, cfg.learner.T)
    )
    tt = pipe.stage(
        "oracle",
        lambda: true_theta_backward(
            cfg.kern,
            cfg.fm,
            cfg.cost,
            sol,
            cfg.learner.T,
            cfg.mc_samples,
            _stream(seed, _ORACLE_TAG),
        ),
    )
    pipe.stage(
        "report",
        lambda: pipe.emit("theta_true.csv", reporting.write_theta_true_csv, tt.stack),
    )
    pipe.finish()
    if not args.quiet:
        norms = tt.stack.norms()
        print(f"theta* written; max_t ||theta*_t|| = {norms.max():.6g}")
    return 0


def _cmd_check_iss(args):
    cfg, out_dir = _prepare(args)
    pipe = _Pipeline(cfg, out_dir, args.config, args.quiet)
    lrn = cfg.learner
    pipe.stage("riccati", lambda: riccati_backward(cfg.sys, cfg.cost, lrn.T))
    history = pipe.stage(
        "learn", lambda: run_lsvi(lrn, cfg.sys, cfg.cost, cfg.kern, cfg.fm)
    )

    def _iss():
        consts = iss_constants(history.sol)
        X = history.dataset.X[: history.dataset.count]
        return iss_check(
            X, consts, cfg.sys, history.sol, lrn.R_theta, cfg.kern.delta_s, cfg.fm.d
        )

    rep = pipe.stage("iss", _iss)
    pipe.stage("report", lambda: pipe.emit("iss_report.csv", reporting.write_iss_csv, rep))
    pipe.finish()
    if not args.quiet:
        print(str(rep))
    return 0


def _cmd_bound(args):
    cfg, out_dir = _prepare(args)
    pipe = _Pipeline(cfg, out_dir, args.config, args.quiet)
    seed = cfg.learner.seed
    lrn = cfg.learner
    sol = pipe.stage("riccati", lambda: riccati_backward(cfg.sys, cfg.cost, lrn.T))
    history = pipe.stage(
        "learn", lambda: run_lsvi(lrn, cfg.sys, cfg.cost, cfg.kern, cfg.fm)
    )
    tt = pipe.stage(
        "oracle",
        lambda: true_theta_backward(
            cfg.kern,
            cfg.fm,
            cfg.cost,
            sol,
            lrn.T,
            cfg.mc_samples,
            _stream(seed, _ORACLE_TAG),
        ),
    )

    def _bound():
        consts = iss_constants(sol)
        bc = bound_constants(
            history,
            tt,
            consts,
            _stream(seed, _GAMMA_TAG),
            mc_samples=cfg.mc_samples,
            delta=cfg.delta,
        )
        grid = np.arange(1, lrn.L + 1)
        vals = regret_bound_eval(
            bc, lrn.T, grid, lrn.lam, lrn.R_theta, cfg.fm.d, cfg.sys.n, cfg.delta
        )
        return bc, grid, vals

    bc, grid, vals = pipe.stage("bound", _bound)
    pipe.stage(
        "report",
        lambda: pipe.emit("bound_curve.csv", reporting.write_bound_csv, grid, vals),
    )
    pipe.finish()
    if not args.quiet:
        print(
            f"sigma={bc.sigma:.6g} delta_psi={bc.delta_psi:.6g} "
            f"delta_v={bc.delta_v:.6g} gamma={bc.gamma:.6g} "
            f"bound(L={lrn.L})={vals[-1]:.6g}"
        )
    return 0


def _build_parser():
    ap = argparse.ArgumentParser(
        prog="exolqr",
        description="Experiment driver for the exogenous-signal LQR toolkit.",
    )
    ap.add_argument("--version", action="version", version=f"exolqr {__version__}")
    sub = ap.add_subparsers(dest="verb", required=True)
    verbs = {
        "run": ("run the full pipeline and write all artifacts", _cmd_run),
        "plot": ("re-render figures from a finished run directory", _cmd_plot),
        "oracle": ("compute ground-truth weights only", _cmd_oracle),
        "check-iss": ("run learning and evaluate the stability envelope", _cmd_check_iss),
        "bound": ("evaluate the theoretical regret curve", _cmd_bound),
    }
    for name, (help_text, fn) in verbs.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="experiment TOML file")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--episodes", type=int, help="episode-count override for L")
        p.add_argument("--quiet", action="store_true", help="suppress progress output")
        p.set_defaults(fn=fn)
    return ap


def main(argv=None):
    # The feature-norm advisory is re-raised at every call site; the run
    # verb prints a single computed note instead (see run_experiment).
    warnings.filterwarnings("ignore", message="feature norm exceeds")
    args = _build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=_sys.stderr)
        return 1
    except ReportingError as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
