"""Artifact emission: delimited tables, summary JSON, and figures.

Numeric CSV fields print with 17 significant digits so doubles round-trip
and reruns are byte-identical.  The ``report`` command reads the tables
back and renders matplotlib figures (PNG) next to them; rendering never
opens a window (Agg backend).
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def fmt(x) -> str:
    """17-significant-digit decimal, round-tripping double precision."""
    return f"{float(x):.17g}"


def write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default)
                    + "\n")


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON-serializable: {type(obj)}")


def _writer(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def write_solution_csv(path, u, nu=None):
    """Long-format per-node table: t, x (or x1,x2), u, nu_pos, nu_neg."""
    grid = u.grid
    path = _writer(path)
    meshes = grid.full_meshes()
    coords = [m.ravel() for m in meshes]
    headers = ["t"] + (["x"] if grid.dim == 1 else ["x1", "x2"]) + ["u", "nu_pos", "nu_neg"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(headers)
        for k in range(grid.nt + 1):
            t = grid.times[k]
            uvals = u.values[k].ravel()
            pvals = nu.pos[k].ravel() if nu is not None else np.zeros_like(uvals)
            nvals = nu.neg[k].ravel() if nu is not None else np.zeros_like(uvals)
            for i in range(uvals.size):
                w.writerow([fmt(t)] + [fmt(c[i]) for c in coords]
                           + [fmt(uvals[i]), fmt(pvals[i]), fmt(nvals[i])])


def write_active_masks_csv(path, sol, grid):
    path = _writer(path)
    meshes = grid.interior_meshes()
    coords = [m.ravel() for m in meshes]
    headers = ["t"] + (["x"] if grid.dim == 1 else ["x1", "x2"]) + ["lower_active", "upper_active"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(headers)
        for k in range(grid.nt + 1):
            t = grid.times[k]
            for i in range(grid.n_interior):
                w.writerow([fmt(t)] + [fmt(c[i]) for c in coords]
                           + [int(sol.active_lower[k, i]), int(sol.active_upper[k, i])])


def write_sweep_csv(path, report):
    path = _writer(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "sup_gap_to_oracle", "tv_pos", "tv_neg",
                    "minimality_residual", "monotonicity_violations"])
        for r in report.rows:
            w.writerow([fmt(r.n), fmt(r.sup_gap_to_oracle), fmt(r.tv_pos),
                        fmt(r.tv_neg), fmt(r.minimality_residual),
                        r.monotonicity_violations])


def write_fk_csv(path, results):
    path = _writer(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s", "x", "u_value", "mc_mean", "mc_se", "n_paths", "dt_mc",
                    "z", "passed"])
        for r in results:
            w.writerow([fmt(r.s), ";".join(fmt(c) for c in r.x), fmt(r.u_value),
                        fmt(r.estimate.mean), fmt(r.estimate.standard_error),
                        r.estimate.n, fmt(r.estimate.dt_mc), fmt(r.z), int(r.passed)])


def write_path_dump_csv(path, acc, exit_times):
    path = _writer(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "exit_time", "f_integral", "a_mu", "a_nu", "payoff", "total"])
        total = acc.total
        for i in range(total.size):
            w.writerow([i, fmt(exit_times[i]), fmt(acc.f_integral[i]), fmt(acc.a_mu[i]),
                        fmt(acc.a_nu[i]), fmt(acc.payoff[i]), fmt(total[i])])


# ---------------------------------------------------------------------------
# figure rendering from emitted tables


def _read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    return header, body


def render_solution_figure(csv_path, out_png, title=""):
    header, body = _read_csv(csv_path)
    cols = {name: i for i, name in enumerate(header)}
    if "x1" in cols:  # 2D tables get a terminal-slice surface only
        return _render_solution_2d(header, body, cols, out_png, title)
    t = np.array([float(r[cols["t"]]) for r in body])
    x = np.array([float(r[cols["x"]]) for r in body])
    u = np.array([float(r[cols["u"]]) for r in body])
    ts = np.unique(t)
    xs = np.unique(x)
    U = u.reshape(ts.size, xs.size)
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    pcm = axes[0].pcolormesh(xs, ts, U, shading="auto")
    fig.colorbar(pcm, ax=axes[0], label="u")
    axes[0].set_xlabel("x")
    axes[0].set_ylabel("t")
    axes[0].set_title("space-time field")
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        k = int(round(frac * (ts.size - 1)))
        axes[1].plot(xs, U[k], label=f"t={ts[k]:.3g}")
    axes[1].set_xlabel("x")
    axes[1].set_ylabel("u")
    axes[1].legend(fontsize=8)
    axes[1].set_title("profiles")
    fig.suptitle(title or Path(csv_path).stem)
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)
    return out_png


def _render_solution_2d(header, body, cols, out_png, title):
    t = np.array([float(r[cols["t"]]) for r in body])
    x1 = np.array([float(r[cols["x1"]]) for r in body])
    x2 = np.array([float(r[cols["x2"]]) for r in body])
    u = np.array([float(r[cols["u"]]) for r in body])
    t0 = t.min()
    sel = t == t0
    xs1 = np.unique(x1[sel])
    xs2 = np.unique(x2[sel])
    U = u[sel].reshape(xs1.size, xs2.size)
    fig, ax = plt.subplots(figsize=(5, 4))
    pcm = ax.pcolormesh(xs2, xs1, U, shading="auto")
    fig.colorbar(pcm, ax=ax, label="u")
    ax.set_xlabel("x2")
    ax.set_ylabel("x1")
    ax.set_title(f"{title or 'solution'} at t={t0:.3g}")
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)
    return out_png


def render_sweep_figure(csv_path, out_png, title=""):
    header, body = _read_csv(csv_path)
    cols = {name: i for i, name in enumerate(header)}
    n = np.array([float(r[cols["n"]]) for r in body])
    gap = np.array([float(r[cols["sup_gap_to_oracle"]]) for r in body])
    tv = np.array([float(r[cols["tv_pos"]]) + float(r[cols["tv_neg"]]) for r in body])
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    axes[0].loglog(n, np.maximum(gap, 1e-300), "o-")
    axes[0].set_xlabel("penalty parameter n")
    axes[0].set_ylabel("sup gap to oracle")
    axes[0].set_title("penalization gap")
    axes[1].semilogx(n, tv, "s-")
    axes[1].set_xlabel("penalty parameter n")
    axes[1].set_ylabel("TV of reaction measure")
    axes[1].set_title("reaction mass")
    fig.suptitle(title or Path(csv_path).stem)
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)
    return out_png


def render_fk_figure(csv_path, out_png, title=""):
    header, body = _read_csv(csv_path)
    cols = {name: i for i, name in enumerate(header)}
    labels = [f"({r[cols['s']]}, {r[cols['x']]})" for r in body]
    z = np.array([float(r[cols["z"]]) for r in body])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(z)), z)
    ax.axhline(3.0, color="r", linestyle="--", label="pass level z=3")
    ax.set_xticks(range(len(z)))
    ax.set_xticklabels(labels, rotation=20, fontsize=8)
    ax.set_ylabel("z")
    ax.set_title(title or "Feynman-Kac agreement")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)
    return out_png


def render_run_figures(run_dir):
    """Render figures for every known table present in a run directory."""
    run_dir = Path(run_dir)
    rendered = []
    for name in ("solution", "solution_vi", "dynkin"):
        src = run_dir / f"{name}.csv"
        if src.exists():
            rendered.append(render_solution_figure(src, run_dir / f"{name}.png", name))
    for name in ("sweep",):
        src = run_dir / f"{name}.csv"
        if src.exists():
            rendered.append(render_sweep_figure(src, run_dir / f"{name}.png", name))
    for name in ("feynman_kac", "feynman_kac_refined"):
        src = run_dir / f"{name}.csv"
        if src.exists():
            rendered.append(render_fk_figure(src, run_dir / f"{name}.png", name))
    return [str(p) for p in rendered]
