"""Command-line entry point.

Subcommands: ``validate``, ``solve``, ``solve-vi``, ``penalize-sweep``,
``verify-mc``, ``dynkin``, ``diagnose``, ``report``.  Every run writes its
artifacts under ``--out`` together with a ``manifest.json`` holding the
resolved configuration, its hash and the library versions, which is
enough to replay the run.  Exit status is 0 iff all hard assertions of
the command pass; configuration problems exit 2 with a machine-readable
error JSON on stdout, runtime failures exit 1.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, config_hash, load_problem
from .errors import ConfigError, HardViolation, ReflectaError
from .grid import Grid
from .reference import FK_POINTS
from . import report as rep
from .problem import validate as validate_spec


def _parser():
    p = argparse.ArgumentParser(
        prog="reflecta",
        description="Obstacle-problem solver and verification harness")
    sub = p.add_subparsers(dest="command", required=True)
    commands = {
        "validate": "check the structural hypotheses of a problem file",
        "solve": "backward solve of the unconstrained problem",
        "solve-vi": "direct double-obstacle complementarity solve",
        "penalize-sweep": "penalization runs over a list of n values",
        "verify-mc": "Monte Carlo Feynman-Kac verification",
        "dynkin": "explicit dynamic-program value (clamped scheme)",
        "diagnose": "comparison/minimality/estimate batteries",
        "report": "aggregate outputs of prior runs and render figures",
    }
    parsers = {}
    for name, help_text in commands.items():
        q = sub.add_parser(name, help=help_text)
        if name != "report":
            q.add_argument("--problem", required=True,
                           help="problem file path or builtin name")
            q.add_argument("--nx", type=int, default=128, help="interior nodes per axis")
            q.add_argument("--nt", type=int, default=512, help="time steps")
        q.add_argument("--out", default="runs/out", help="output directory")
        parsers[name] = q
    parsers["penalize-sweep"].add_argument(
        "--n-list", default="1,4,16,64,256,1024,4096",
        help="comma-separated strictly increasing penalty parameters")
    parsers["penalize-sweep"].add_argument(
        "--mode", choices=("direct", "outer"), default="direct",
        help="direct penalization or the two-barrier outer scheme")
    parsers["verify-mc"].add_argument("--paths", type=int, default=100_000)
    parsers["verify-mc"].add_argument("--dt-mc", type=float, default=1e-4)
    parsers["verify-mc"].add_argument("--seed", type=int, default=0)
    parsers["verify-mc"].add_argument(
        "--points", default="",
        help="verification points 's,x[,x2]' joined by ';' (default: bundled)")
    parsers["verify-mc"].add_argument(
        "--refine-study", action="store_true",
        help="repeat with dt_mc/2 and check the z statistic does not grow")
    parsers["verify-mc"].add_argument(
        "--dump-paths", action="store_true",
        help="write raw per-path accumulators (slower, unfused kernel)")
    parsers["verify-mc"].add_argument("--tol-delta", type=float, default=2e-3,
                                      help="discretization allowance in the z score")
    parsers["diagnose"].add_argument("--trials", type=int, default=10)
    parsers["diagnose"].add_argument("--seed", type=int, default=0)
    parsers["diagnose"].add_argument("--tol-envelope", type=float, default=1e-8)
    parsers["diagnose"].add_argument("--tol-minimality", type=float, default=1e-6)
    for q in parsers.values():
        q.add_argument("--tol-newton", type=float, default=None,
                       help="override the implicit-slice Newton tolerance")
        q.add_argument("--tol-lcp", type=float, default=None,
                       help="override the complementarity tolerance")
    return p


def _apply_tolerance_overrides(args, tolerances):
    from . import lcp, solver

    if getattr(args, "tol_newton", None) is not None:
        solver.NEWTON_TOL = args.tol_newton
        tolerances["newton"] = args.tol_newton
    if getattr(args, "tol_lcp", None) is not None:
        lcp.LCP_TOL = args.tol_lcp
        tolerances["lcp"] = args.tol_lcp


def _parse_points(raw, dim):
    pts = []
    for chunk in raw.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        vals = [float(v) for v in chunk.split(",")]
        if len(vals) != 1 + dim:
            raise ConfigError(f"point {chunk!r} needs 1+dim={1+dim} coordinates")
        pts.append(tuple(vals))
    return tuple(pts)


def _manifest(out_dir, command, cfg: RunConfig, doc, extra=None):
    payload = {
        "command": command,
        "config": cfg.as_dict(),
        "problem_document": doc,
        "versions": {
            "reflecta": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
        },
    }
    try:
        import scipy

        payload["versions"]["scipy"] = scipy.__version__
    except ImportError:
        pass
    payload["config_hash"] = config_hash(
        {"command": command, "config": cfg.as_dict(), "problem": doc})
    if extra:
        payload.update(extra)
    rep.write_json(Path(out_dir) / "manifest.json", payload)


def _load(args):
    spec, doc = load_problem(args.problem)
    grid = Grid(spec.domain, nx=args.nx, nt=args.nt)
    return spec, doc, grid


def _cmd_validate(args, tolerances):
    spec, doc, grid = _load(args)
    out = Path(args.out)
    cfg = RunConfig(command="validate", problem=args.problem, nx=args.nx, nt=args.nt,
                    out_dir=str(out), tolerances=tolerances)
    try:
        report = validate_spec(spec, grid)
    except HardViolation as exc:
        rep.write_json(out / "validation.json", exc.report.as_dict())
        _manifest(out, "validate", cfg, doc)
        raise
    rep.write_json(out / "validation.json", report.as_dict())
    _manifest(out, "validate", cfg, doc)
    print(f"validate: {'PASS' if report.passed else 'SOFT-FAIL'} "
          f"({sum(c.passed for c in report.checks)}/{len(report.checks)} checks)")
    return 0


def _cmd_solve(args, tolerances):
    from .solver import solve_cauchy_dirichlet_with_stats

    spec, doc, grid = _load(args)
    out = Path(args.out)
    cfg = RunConfig(command="solve", problem=args.problem, nx=args.nx, nt=args.nt,
                    out_dir=str(out), tolerances=tolerances)
    t0 = time.perf_counter()
    u, stats = solve_cauchy_dirichlet_with_stats(spec, grid)
    elapsed = time.perf_counter() - t0
    rep.write_solution_csv(out / "solution.csv", u)
    summary = {
        "sup_norm": u.sup_norm(),
        "l1_norm": float(np.sum(np.abs(u.values[:-1]))) * grid.cellvol * grid.dt,
        "newton": stats.as_dict(),
        "elapsed_seconds": elapsed,
        "grid": {"nx": list(grid.nx), "nt": grid.nt},
    }
    rep.write_json(out / "solve_summary.json", summary)
    _manifest(out, "solve", cfg, doc)
    print(f"solve: sup|u|={u.sup_norm():.6g} in {elapsed:.2f}s")
    return 0


def _cmd_solve_vi(args, tolerances):
    from .diagnostics import minimality_residual
    from .lcp import solve_vi

    spec, doc, grid = _load(args)
    if not spec.barriers.any_present:
        raise ConfigError("solve-vi needs a problem with at least one barrier")
    out = Path(args.out)
    cfg = RunConfig(command="solve-vi", problem=args.problem, nx=args.nx, nt=args.nt,
                    out_dir=str(out), tolerances=tolerances)
    t0 = time.perf_counter()
    sol = solve_vi(spec, grid)
    elapsed = time.perf_counter() - t0
    rep.write_solution_csv(out / "solution_vi.csv", sol.u, sol.nu)
    rep.write_active_masks_csv(out / "active_sets.csv", sol, grid)
    tv_pos, tv_neg = sol.nu.tv()
    r_pos, r_neg = minimality_residual(sol.u, sol.nu, spec.barriers, grid)
    summary = {
        "sup_norm": sol.u.sup_norm(),
        "tv_pos": tv_pos,
        "tv_neg": tv_neg,
        "minimality_r_pos": r_pos,
        "minimality_r_neg": r_neg,
        "iterations": sol.stats.as_dict(),
        "elapsed_seconds": elapsed,
        "grid": {"nx": list(grid.nx), "nt": grid.nt},
    }
    rep.write_json(out / "solve_vi_summary.json", summary)
    _manifest(out, "solve-vi", cfg, doc)
    print(f"solve-vi: sup|u|={sol.u.sup_norm():.6g} tv=({tv_pos:.4g},{tv_neg:.4g}) "
          f"in {elapsed:.2f}s")
    return 0


def _cmd_sweep(args, tolerances):
    from .solver import penalization_sweep

    spec, doc, grid = _load(args)
    n_list = tuple(float(v) for v in args.n_list.split(",") if v.strip())
    out = Path(args.out)
    cfg = RunConfig(command="penalize-sweep", problem=args.problem, nx=args.nx,
                    nt=args.nt, n_list=n_list, sweep_mode=args.mode,
                    out_dir=str(out), tolerances=tolerances)
    t0 = time.perf_counter()
    report = penalization_sweep(spec, grid, n_list, mode=args.mode)
    elapsed = time.perf_counter() - t0
    rep.write_sweep_csv(out / "sweep.csv", report)
    summary = dict(report.as_dict(), elapsed_seconds=elapsed)
    rep.write_json(out / "sweep_summary.json", summary)
    _manifest(out, "penalize-sweep", cfg, doc)
    ok = report.worst_monotonicity_violation <= 1e-10
    print(f"penalize-sweep[{args.mode}]: final gap="
          f"{report.rows[-1].sup_gap_to_oracle:.3e} rate={report.rate_exponent} "
          f"monotone={'yes' if ok else 'VIOLATED'} in {elapsed:.1f}s")
    return 0 if ok else 1


def _cmd_verify_mc(args, tolerances):
    from .montecarlo import feynman_kac_check

    spec, doc, grid = _load(args)
    if args.points:
        points = _parse_points(args.points, spec.domain.dim)
    else:
        points = FK_POINTS.get(spec.name) or FK_POINTS.get(Path(args.problem).stem)
        if points is None:
            mid = tuple(L / 2 for L in spec.domain.lengths)
            points = ((0.0,) + mid, (spec.domain.horizon / 4,) + mid,
                      (spec.domain.horizon / 2,) + mid)
    out = Path(args.out)
    cfg = RunConfig(command="verify-mc", problem=args.problem, nx=args.nx, nt=args.nt,
                    paths=args.paths, dt_mc=args.dt_mc, seed=args.seed,
                    points=points, out_dir=str(out), dump_paths=args.dump_paths,
                    tolerances=dict(tolerances, delta=args.tol_delta))
    t0 = time.perf_counter()
    if args.dump_paths:
        results, dumps = feynman_kac_check(
            spec, grid, points, N=args.paths, dt_mc=args.dt_mc, seed=args.seed,
            delta=args.tol_delta, fused=False, collect_paths=True)
        for i, (acc, exit_times) in enumerate(dumps):
            rep.write_path_dump_csv(out / f"paths_point{i}.csv", acc, exit_times)
    else:
        results = feynman_kac_check(spec, grid, points, N=args.paths,
                                    dt_mc=args.dt_mc, seed=args.seed,
                                    delta=args.tol_delta)
    elapsed = time.perf_counter() - t0
    rep.write_fk_csv(out / "feynman_kac.csv", results)
    summary = {
        "max_z": max(r.z for r in results),
        "all_passed": all(r.passed for r in results),
        "elapsed_seconds": elapsed,
        "points": [list(p) for p in points],
    }
    ok = summary["all_passed"]
    if args.refine_study:
        refined = feynman_kac_check(spec, grid, points, N=args.paths,
                                    dt_mc=args.dt_mc / 2, seed=args.seed,
                                    delta=args.tol_delta)
        rep.write_fk_csv(out / "feynman_kac_refined.csv", refined)
        summary["max_z_refined"] = max(r.z for r in refined)
        summary["z_growth"] = summary["max_z_refined"] - summary["max_z"]
        ok = ok and summary["z_growth"] <= 0.5
    rep.write_json(out / "verify_mc_summary.json", summary)
    _manifest(out, "verify-mc", cfg, doc)
    print(f"verify-mc: max z={summary['max_z']:.2f} "
          f"{'PASS' if ok else 'FAIL'} in {elapsed:.1f}s")
    return 0 if ok else 1


def _cmd_dynkin(args, tolerances):
    from .montecarlo import dynkin_value

    spec, doc, grid = _load(args)
    out = Path(args.out)
    cfg = RunConfig(command="dynkin", problem=args.problem, nx=args.nx, nt=args.nt,
                    out_dir=str(out), tolerances=tolerances)
    t0 = time.perf_counter()
    V = dynkin_value(spec, grid)
    elapsed = time.perf_counter() - t0
    rep.write_solution_csv(out / "dynkin.csv", V)
    summary = {"sup_norm": V.sup_norm(), "elapsed_seconds": elapsed}
    if spec.barriers.any_present:
        from .lcp import solve_vi

        sol = solve_vi(spec, grid)
        summary["sup_gap_to_vi"] = V.sup_distance(sol.u)
    rep.write_json(out / "dynkin_summary.json", summary)
    _manifest(out, "dynkin", cfg, doc)
    gap = summary.get("sup_gap_to_vi")
    print(f"dynkin: sup|V|={V.sup_norm():.6g}"
          + (f" gap-to-vi={gap:.3e}" if gap is not None else "")
          + f" in {elapsed:.1f}s")
    return 0


def _cmd_diagnose(args, tolerances):
    from .diagnostics import (comparison_trial, entropy_residual,
                              l1_estimate_check, minimality_residual)
    from .lcp import envelope_check, solve_vi
    from .solver import solve_cauchy_dirichlet

    spec, doc, grid = _load(args)
    out = Path(args.out)
    cfg = RunConfig(command="diagnose", problem=args.problem, nx=args.nx, nt=args.nt,
                    seed=args.seed, trials=args.trials, out_dir=str(out),
                    tolerances=tolerances)
    checks = {}
    hard_ok = True

    report = validate_spec(spec, grid)
    checks["validate"] = report.as_dict()

    if spec.barriers.any_present:
        sol = solve_vi(spec, grid)
        u, nu = sol.u, sol.nu
        tv_pos, tv_neg = nu.tv()
        r_pos, r_neg = minimality_residual(u, nu, spec.barriers, grid)
        bound = args.tol_minimality * (tv_pos + tv_neg + 1e-30)
        ok = abs(r_pos) <= bound and abs(r_neg) <= bound
        hard_ok &= ok
        checks["minimality"] = {"r_pos": r_pos, "r_neg": r_neg, "bound": bound,
                                "passed": ok}
        if spec.barriers.h1 is not None:
            env = envelope_check(spec, grid, trials=args.trials, seed=args.seed)
            checks["envelope"] = {"trials": env.trials, "dominating": env.dominating,
                                  "min_margin": env.min_margin, "passed": True}
    else:
        u, nu = solve_cauchy_dirichlet(spec, grid), None

    l1 = l1_estimate_check(spec, grid, u)
    ok = l1.passed or not l1.asserted
    hard_ok &= ok
    checks["l1_estimate"] = dict(vars(l1), passed=bool(ok))

    if not spec.measure.atoms and (nu is None or not nu.atoms):
        ent = entropy_residual(u, spec, grid, reaction=nu)
        ok = ent.margin >= -ent.rounding_tol
        hard_ok &= ok
        checks["entropy"] = {"margin": ent.margin, "tol": ent.rounding_tol,
                             "worst_eta": ent.worst.eta_name, "worst_k": ent.worst.k,
                             "passed": ok}

    # report-only: failures downgrade to warnings (discrete constant unsettled)
    from .diagnostics import truncation_energy_check

    checks["truncation_energy"] = [vars(r) for r in
                                   truncation_energy_check(u, spec, grid)]

    shift = 0.1 * max(1.0, u.sup_norm())
    base_phi = spec.terminal
    dim = spec.domain.dim
    if dim == 1:
        hi_phi = lambda x: np.asarray(base_phi(x), dtype=float) + shift
    else:
        hi_phi = lambda x1, x2: np.asarray(base_phi(x1, x2), dtype=float) + shift
    hi_barriers = dataclasses.replace(
        spec.barriers,
        h2=None if spec.barriers.h2 is None else (
            (lambda t, x: np.asarray(spec.barriers.h2(t, x), dtype=float) + shift)
            if dim == 1 else
            (lambda t, x1, x2: np.asarray(spec.barriers.h2(t, x1, x2), dtype=float) + shift)))
    spec_hi = dataclasses.replace(spec, terminal=hi_phi, barriers=hi_barriers,
                                  name=spec.name + "+shift")
    comp = comparison_trial(spec, spec_hi, grid)
    ok = comp.violations == 0
    hard_ok &= ok
    checks["comparison"] = {"violations": comp.violations,
                            "worst_gap": comp.worst_gap, "passed": ok}

    rep.write_json(out / "diagnostics.json",
                   {"passed": bool(hard_ok), "checks": checks})
    _manifest(out, "diagnose", cfg, doc)
    print(f"diagnose: {'PASS' if hard_ok else 'FAIL'} "
          f"({', '.join(sorted(checks))})")
    return 0 if hard_ok else 1


def _cmd_report(args, tolerances):
    out = Path(args.out)
    if not out.exists():
        raise ConfigError(f"run directory not found: {out}")
    figures = rep.render_run_figures(out)
    aggregate = {"figures": figures, "summaries": {}}
    for summary in sorted(out.glob("*_summary.json")) + [out / "diagnostics.json",
                                                         out / "validation.json"]:
        if summary.exists():
            aggregate["summaries"][summary.stem] = json.loads(summary.read_text())
    rep.write_json(out / "report.json", aggregate)
    print(f"report: {len(figures)} figure(s) rendered under {out}")
    return 0


_COMMANDS = {
    "validate": _cmd_validate,
    "solve": _cmd_solve,
    "solve-vi": _cmd_solve_vi,
    "penalize-sweep": _cmd_sweep,
    "verify-mc": _cmd_verify_mc,
    "dynkin": _cmd_dynkin,
    "diagnose": _cmd_diagnose,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    tolerances = {}
    try:
        _apply_tolerance_overrides(args, tolerances)
        return _COMMANDS[args.command](args, tolerances)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "detail": str(exc)}))
        return 2
    except HardViolation as exc:
        print(json.dumps({"error": "hard_violation", "detail": str(exc)}))
        return 1
    except ReflectaError as exc:
        print(json.dumps({"error": type(exc).__name__, "detail": str(exc)}))
        return 1


if __name__ == "__main__":
    sys.exit(main())
