"""CSV emission, standalone SVG plots, and the run manifest.

Data artifacts are byte-deterministic: floats go out with 17 significant
digits, rows end with a bare newline on every platform, and the SVG
renderer uses fixed-precision coordinates and no timestamps.  The manifest
is the one deliberately nondeterministic file (it records wall times and
checksums of everything else), so it is excluded from its own inventory.
"""

import csv
import hashlib
import json
import math
import os
from datetime import datetime, timezone

import numpy as np

from . import __version__

__all__ = [
    "ReportingError",
    "fmt_float",
    "write_csv",
    "read_csv",
    "write_regret_csv",
    "write_param_error_csv",
    "write_trajectory_csv",
    "write_iss_csv",
    "write_bound_csv",
    "write_theta_history_csv",
    "write_theta_true_csv",
    "Series",
    "line_plot_svg",
    "render_plots",
    "config_digest",
    "new_manifest",
    "add_file",
    "write_manifest",
    "load_manifest",
    "verify_manifest",
    "MANIFEST_NAME",
]

MANIFEST_NAME = "manifest.json"

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#7f7f7f"]


class ReportingError(RuntimeError):
    """Raised when an artifact cannot be produced (e.g. nothing to plot)."""


# ---------------------------------------------------------------- CSV ----


def fmt_float(v):
    """17 significant digits, enough to round-trip a double exactly."""
    return format(float(v), ".17g")


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return fmt_float(v)


def write_csv(path, header, rows):
    """Write a header plus data rows, dot decimals, LF line endings."""
    lines = [",".join(header)]
    for row in rows:
        if len(row) != len(header):
            raise ValueError(
                f"row width {len(row)} does not match header width {len(header)}"
            )
        lines.append(",".join(_cell(v) for v in row))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def read_csv(path):
    """Header list plus a float ndarray of the data rows (may be empty)."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ReportingError(f"{path} has no header row") from None
        rows = [[float(v) for v in row] for row in reader if row]
    data = np.array(rows, dtype=float) if rows else np.empty((0, len(header)))
    return header, data


def write_regret_csv(path, report):
    """Per-episode evaluation summary from a RegretReport."""
    header = [
        "episode",
        "V_learned",
        "V_learned_stderr",
        "V_opt",
        "regret_cum",
        "regret_avg",
    ]
    rows = [
        (
            int(report.episode[i]),
            report.V_learned[i],
            report.V_learned_stderr[i],
            report.V_opt[i],
            report.regret_cum[i],
            report.regret_avg[i],
        )
        for i in range(len(report.episode))
    ]
    return write_csv(path, header, rows)


def write_param_error_csv(path, episodes, errors):
    rows = [(int(e), err) for e, err in zip(episodes, errors)]
    return write_csv(path, ["episode", "error"], rows)


def write_trajectory_csv(path, S, X_learned, U_learned, X_opt, U_opt):
    """Side-by-side rollouts sharing one exogenous path.

    S is (T+1, p); the state arrays are (T+1, n) and inputs (T, m), with
    the input rows padded by zeros at the terminal step (where u = 0).
    """
    T = X_learned.shape[0] - 1
    n, m, p = X_learned.shape[1], U_learned.shape[1], S.shape[1]
    header = ["t"]
    header += [f"s_{j + 1}" for j in range(p)]
    header += [f"x_learned_{j + 1}" for j in range(n)]
    header += [f"u_learned_{j + 1}" for j in range(m)]
    header += [f"x_opt_{j + 1}" for j in range(n)]
    header += [f"u_opt_{j + 1}" for j in range(m)]
    rows = []
    for t in range(T + 1):
        ul = U_learned[t] if t < T else np.zeros(m)
        uo = U_opt[t] if t < T else np.zeros(m)
        rows.append(
            (t, *S[t], *X_learned[t], *ul, *X_opt[t], *uo)
        )
    return write_csv(path, header, rows)


def write_iss_csv(path, iss_report):
    """One row per (episode, t) pair from an IssReport."""
    norms = iss_report.state_norms
    bounds = iss_report.bounds
    ratios = iss_report.ratios
    rows = []
    for e in range(norms.shape[0]):
        for t in range(norms.shape[1]):
            rows.append((e + 1, t, norms[e, t], bounds[e, t], ratios[e, t]))
    return write_csv(path, ["episode", "t", "state_norm", "bound", "ratio"], rows)


def write_bound_csv(path, L_grid, bounds):
    rows = [(int(L), b) for L, b in zip(L_grid, bounds)]
    return write_csv(path, ["L", "theoretical_bound"], rows)


def write_theta_history_csv(path, theta):
    """Flatten the (L, T+1, D) weight history, one row per coordinate.

    Long format: episode, t, index, value with a 1-based weight index.
    The episode column records the episode in which the stack acted, so
    episode 1 is the zero stack fitted before any data existed.
    """
    L, T_plus, D = theta.shape
    rows = []
    for e in range(L):
        for t in range(T_plus):
            for j in range(D):
                rows.append((e + 1, t, j + 1, theta[e, t, j]))
    return write_csv(path, ["episode", "t", "index", "value"], rows)


def write_theta_true_csv(path, stack):
    """Ground-truth weights in the theta-history layout, keyed by t only."""
    T_plus, D = stack.data.shape
    rows = [
        (t, j + 1, stack.data[t, j]) for t in range(T_plus) for j in range(D)
    ]
    return write_csv(path, ["t", "index", "value"], rows)


def write_trajectories_csv(path, dataset):
    """Every stored learning rollout, one row per (episode, t).

    Columns: episode, t, the plant state, the exogenous state, the input
    (zeros on the terminal row, where no input is applied), and the
    realized stage cost.
    """
    header = ["episode", "t"]
    header += [f"x_{j + 1}" for j in range(dataset.n)]
    header += [f"s_{j + 1}" for j in range(dataset.p)]
    header += [f"u_{j + 1}" for j in range(dataset.m)]
    header += ["cost"]
    rows = []
    for e in range(dataset.count):
        for t in range(dataset.T + 1):
            u = dataset.U[e, t] if t < dataset.T else np.zeros(dataset.m)
            rows.append(
                (e + 1, t, *dataset.X[e, t], *dataset.S[e, t], *u, dataset.COST[e, t])
            )
    return write_csv(path, header, rows)


# ---------------------------------------------------------------- SVG ----


class Series:
    """One polyline: x, y arrays plus a legend label."""

    def __init__(self, x, y, label, color=None, dash=None):
        self.x = np.asarray(x, dtype=float)
        self.y = np.asarray(y, dtype=float)
        if self.x.shape != self.y.shape or self.x.ndim != 1:
            raise ValueError("series x and y must be matching 1-D arrays")
        self.label = label
        self.color = color
        self.dash = dash


def _nice_step(span):
    """Largest of 1/2/2.5/5 x 10^k giving at least 4 intervals."""
    raw = span / 4.0
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (5.0, 2.5, 2.0, 1.0):
        if mult * mag <= raw:
            return mult * mag
    return mag


def _linear_ticks(lo, hi):
    step = _nice_step(hi - lo)
    first = math.ceil(lo / step) * step
    ticks = []
    v = first
    while v <= hi + 1e-12 * step:
        ticks.append(0.0 if abs(v) < 1e-12 * step else v)
        v += step
    return ticks


def _log_ticks(lo, hi):
    """Decade ticks in raw units; geometric fallback inside one decade."""
    k0, k1 = math.ceil(math.log10(lo) - 1e-9), math.floor(math.log10(hi) + 1e-9)
    ticks = [10.0 ** k for k in range(k0, k1 + 1)]
    if len(ticks) >= 2:
        return ticks
    return list(np.geomspace(lo, hi, 4))


def _tick_label(v):
    return format(float(v), ".6g")


def _axis_range(values, log):
    finite = values[np.isfinite(values)]
    if log:
        finite = finite[finite > 0]
    if finite.size == 0:
        raise ReportingError("nothing to plot on this axis")
    lo, hi = float(finite.min()), float(finite.max())
    if log:
        pad = (hi / lo) ** 0.05 if hi > lo else 2.0
        return lo / pad, hi * pad
    pad = 0.05 * (hi - lo)
    if pad == 0.0:
        pad = 1.0 if hi == 0.0 else 0.1 * abs(hi)
    return lo - pad, hi + pad


def line_plot_svg(
    path,
    series,
    title,
    xlabel,
    ylabel,
    logx=False,
    logy=False,
    width=720,
    height=460,
):
    """Render polyline series to a standalone SVG file.

    Everything is inline (no fonts, scripts, or external references) and
    numeric output uses fixed two-decimal coordinates, so the same data
    always yields the same bytes.
    """
    series = list(series)
    if not series or all(s.x.size == 0 for s in series):
        raise ReportingError(f"refusing to render {path}: no data rows")

    all_x = np.concatenate([s.x for s in series])
    all_y = np.concatenate([s.y for s in series])
    x_lo, x_hi = _axis_range(all_x, logx)
    y_lo, y_hi = _axis_range(all_y, logy)

    ml, mr, mt, mb = 82, 26, 40, 58
    pw, ph = width - ml - mr, height - mt - mb

    def tx(v):
        return math.log10(v) if logx else v

    def ty(v):
        return math.log10(v) if logy else v

    xa, xb = tx(x_lo), tx(x_hi)
    ya, yb = ty(y_lo), ty(y_hi)

    def fx(v):
        return ml + (tx(v) - xa) / (xb - xa) * pw

    def fy(v):
        return mt + ph - (ty(v) - ya) / (yb - ya) * ph

    def pt(v):
        return format(v, ".2f")

    xticks = _log_ticks(x_lo, x_hi) if logx else _linear_ticks(x_lo, x_hi)
    yticks = _log_ticks(y_lo, y_hi) if logy else _linear_ticks(y_lo, y_hi)

    out = []
    out.append(
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">'
    )
    out.append(f'<rect width="{width}" height="{height}" fill="#ffffff"/>')
    font = 'font-family="Helvetica, Arial, sans-serif"'

    for v in xticks:
        gx = pt(fx(v))
        out.append(
            f'<line x1="{gx}" y1="{mt}" x2="{gx}" y2="{mt + ph}" '
            f'stroke="#dddddd" stroke-width="1"/>'
        )
        out.append(
            f'<text x="{gx}" y="{mt + ph + 18}" {font} font-size="12" '
            f'fill="#333333" text-anchor="middle">{_tick_label(v)}</text>'
        )
    for v in yticks:
        gy = pt(fy(v))
        out.append(
            f'<line x1="{ml}" y1="{gy}" x2="{ml + pw}" y2="{gy}" '
            f'stroke="#dddddd" stroke-width="1"/>'
        )
        out.append(
            f'<text x="{ml - 8}" y="{gy}" {font} font-size="12" '
            f'fill="#333333" text-anchor="end" dominant-baseline="middle">'
            f"{_tick_label(v)}</text>"
        )

    out.append(
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" '
        f'stroke="#333333" stroke-width="1"/>'
    )

    for i, s in enumerate(series):
        color = s.color or PALETTE[i % len(PALETTE)]
        keep = np.isfinite(s.x) & np.isfinite(s.y)
        if logx:
            keep &= s.x > 0
        if logy:
            keep &= s.y > 0
        xs, ys = s.x[keep], s.y[keep]
        if xs.size == 0:
            raise ReportingError(
                f"series '{s.label}' has no plottable points for {path}"
            )
        pts = " ".join(f"{pt(fx(a))},{pt(fy(b))}" for a, b in zip(xs, ys))
        dash = f' stroke-dasharray="{s.dash}"' if s.dash else ""
        out.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" '
            f'stroke-width="1.5"{dash}/>'
        )

    lx, ly = ml + pw - 170, mt + 10
    for i, s in enumerate(series):
        color = s.color or PALETTE[i % len(PALETTE)]
        yy = ly + 16 * i
        dash = f' stroke-dasharray="{s.dash}"' if s.dash else ""
        out.append(
            f'<line x1="{lx}" y1="{yy}" x2="{lx + 22}" y2="{yy}" '
            f'stroke="{color}" stroke-width="1.5"{dash}/>'
        )
        out.append(
            f'<text x="{lx + 28}" y="{yy}" {font} font-size="12" '
            f'fill="#111111" dominant-baseline="middle">{s.label}</text>'
        )

    out.append(
        f'<text x="{ml + pw / 2:.1f}" y="22" {font} font-size="14" '
        f'fill="#111111" text-anchor="middle" font-weight="bold">{title}</text>'
    )
    out.append(
        f'<text x="{ml + pw / 2:.1f}" y="{height - 14}" {font} font-size="13" '
        f'fill="#111111" text-anchor="middle">{xlabel}</text>'
    )
    out.append(
        f'<text x="20" y="{mt + ph / 2:.1f}" {font} font-size="13" '
        f'fill="#111111" text-anchor="middle" '
        f'transform="rotate(-90 20 {mt + ph / 2:.1f})">{ylabel}</text>'
    )
    out.append("</svg>")

    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(out) + "\n")
    return path


def render_plots(out_dir, loglog_regret=False):
    """Build the four figure panels from the CSVs already in out_dir.

    Returns the list of SVG file names written.  Raises ReportingError if
    a needed CSV is missing or has no data rows (no partial file is left
    behind in that case, since rendering happens after the checks).
    """
    made = []

    def need(name):
        p = os.path.join(out_dir, name)
        if not os.path.exists(p):
            raise ReportingError(f"{name} not found in {out_dir}; run first")
        header, data = read_csv(p)
        if data.shape[0] == 0:
            raise ReportingError(f"{name} has no data rows; nothing to plot")
        return header, data

    _, reg = need("regret.csv")
    episodes, cum = reg[:, 0], reg[:, 4]
    line_plot_svg(
        os.path.join(out_dir, "regret.svg"),
        [Series(episodes, cum, "cumulative regret")],
        "Cumulative regret",
        "episodes",
        "regret",
        logx=loglog_regret,
        logy=loglog_regret,
    )
    made.append("regret.svg")

    line_plot_svg(
        os.path.join(out_dir, "avg_regret.svg"),
        [Series(episodes, reg[:, 5], "regret / episodes")],
        "Average regret",
        "episodes",
        "regret per episode",
    )
    made.append("avg_regret.svg")

    _, perr = need("param_error.csv")
    line_plot_svg(
        os.path.join(out_dir, "param_error.svg"),
        [Series(perr[:, 0], perr[:, 1], "weight error")],
        "Distance to ground-truth weights",
        "episodes",
        "error",
    )
    made.append("param_error.svg")

    theader, traj = need("trajectory.csv")
    col = {name: j for j, name in enumerate(theader)}
    for name in ("t", "s_1", "x_learned_1", "x_opt_1"):
        if name not in col:
            raise ReportingError(f"trajectory.csv is missing column {name}")
    t = traj[:, col["t"]]
    line_plot_svg(
        os.path.join(out_dir, "trajectory.svg"),
        [
            Series(t, traj[:, col["x_learned_1"]], "x1 (learned)"),
            Series(t, traj[:, col["x_opt_1"]], "x1 (optimal)", dash="5,3"),
            Series(t, traj[:, col["s_1"]], "s"),
        ],
        "Final-episode rollout",
        "t",
        "value",
    )
    made.append("trajectory.svg")
    return made


# ----------------------------------------------------------- manifest ----


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def config_digest(raw):
    """Stable hash of the parsed configuration mapping."""
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _utcnow():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def new_manifest(cfg_raw, seed, config_path=None):
    return {
        "toolkit_version": __version__,
        "created_utc": _utcnow(),
        "finished_utc": None,
        "config_file": None if config_path is None else os.path.basename(config_path),
        "config_sha256": config_digest(cfg_raw),
        "seed": int(seed),
        "status": "running",
        "failed_stage": None,
        "stage_seconds": {},
        "files": {},
    }


def add_file(manifest, out_dir, name):
    """Checksum one emitted artifact into the inventory."""
    p = os.path.join(out_dir, name)
    manifest["files"][name] = {
        "sha256": _sha256(p),
        "bytes": os.path.getsize(p),
    }


def write_manifest(out_dir, manifest):
    manifest["finished_utc"] = _utcnow()
    path = os.path.join(out_dir, MANIFEST_NAME)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return path


def load_manifest(out_dir):
    with open(os.path.join(out_dir, MANIFEST_NAME), "r", encoding="utf-8") as fh:
        return json.load(fh)


def verify_manifest(out_dir):
    """Check the inventory against the directory contents.

    Returns a dict with 'missing' (listed but absent), 'mismatched'
    (checksum changed), and 'untracked' (present but unlisted, manifest
    itself excluded).  All three empty means the manifest is complete.
    """
    manifest = load_manifest(out_dir)
    missing, mismatched = [], []
    for name, info in manifest["files"].items():
        p = os.path.join(out_dir, name)
        if not os.path.exists(p):
            missing.append(name)
        elif _sha256(p) != info["sha256"]:
            mismatched.append(name)
    on_disk = {
        f
        for f in os.listdir(out_dir)
        if os.path.isfile(os.path.join(out_dir, f)) and f != MANIFEST_NAME
    }
    untracked = sorted(on_disk - set(manifest["files"]))
    return {"missing": missing, "mismatched": mismatched, "untracked": untracked}
