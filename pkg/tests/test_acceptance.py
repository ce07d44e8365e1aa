"""Acceptance suite: one test per criterion, one pass/fail line each.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines for
passing criteria too.  Expensive solves are shared through module-scoped
fixtures; every tolerance is pinned here, nothing is calibrated at run
time.
"""

import dataclasses
import time

import numpy as np
import pytest

from reflecta import (BarrierPair, Grid, MeasureData,
                      comparison_trial, dynkin_value, entropy_residual,
                      envelope_check, feynman_kac_check, l1_estimate_check,
                      load_problem, minimality_residual, penalization_sweep,
                      project_measure, solve_cauchy_dirichlet, solve_vi)

N_LIST = (1.0, 4.0, 16.0, 64.0, 256.0, 1024.0, 4096.0)
FK_POINTS = ((0.15, 0.5), (0.3, 0.35), (0.45, 0.65))
SEED = 20240811


def report(num, name, passed, detail):
    line = f"ACCEPTANCE {num:2d} {name}: {'PASS' if passed else 'FAIL'} — {detail}"
    print(line, flush=True)
    assert passed, line


@pytest.fixture(scope="module")
def lower_ref():
    spec, _ = load_problem("lower_barrier")
    grid = Grid(spec.domain, nx=128, nt=512)
    return spec, grid, solve_vi(spec, grid)


@pytest.fixture(scope="module")
def two_ref():
    spec, _ = load_problem("two_barrier")
    grid = Grid(spec.domain, nx=128, nt=512)
    return spec, grid, solve_vi(spec, grid)


@pytest.fixture(scope="module")
def lower_sweep(lower_ref):
    spec, grid, sol = lower_ref
    return penalization_sweep(spec, grid, N_LIST, mode="direct", oracle=sol.u)


@pytest.fixture(scope="module")
def outer_sweep(two_ref):
    spec, grid, sol = two_ref
    return penalization_sweep(spec, grid, N_LIST, mode="outer", oracle=sol.u)


def test_criterion_01_analytic_heat():
    spec, _ = load_problem("heat")
    grid = Grid(spec.domain, nx=256, nt=1024)
    t0 = time.perf_counter()
    u = solve_cauchy_dirichlet(spec, grid)
    elapsed = time.perf_counter() - t0
    exact = np.exp(-np.pi**2 / 2) * np.sin(np.pi * grid.axes[0])
    err = float(np.max(np.abs(u.values[0] - exact)))
    report(1, "analytic heat check", err <= 1e-3 and elapsed < 5.0,
           f"sup error {err:.3e} (tol 1e-3) in {elapsed:.2f}s (budget 5s)")


def test_criterion_02_penalization_monotone_up(lower_sweep):
    gaps = [r.sup_gap_to_oracle for r in lower_sweep.rows]
    decreases = sum(r.monotonicity_violations for r in lower_sweep.rows)
    nonincreasing = all(b <= a + 1e-12 for a, b in zip(gaps, gaps[1:]))
    ok = (decreases == 0 and lower_sweep.worst_monotonicity_violation <= 1e-10
          and nonincreasing and gaps[-1] <= 1e-3)
    report(2, "lower-barrier penalization (ascending)", ok,
           f"decreases beyond 1e-10: {decreases}, gaps nonincreasing: "
           f"{nonincreasing}, final gap {gaps[-1]:.3e} (tol 1e-3)")


def test_criterion_03_two_barrier_outer_descending(outer_sweep):
    increases = sum(r.monotonicity_violations for r in outer_sweep.rows)
    final_gap = outer_sweep.rows[-1].sup_gap_to_oracle
    ok = (increases == 0 and outer_sweep.worst_monotonicity_violation <= 1e-10
          and final_gap <= 1e-3)
    report(3, "two-barrier outer scheme (descending)", ok,
           f"increases beyond 1e-10: {increases}, final gap {final_gap:.3e} "
           f"(tol 1e-3)")


def test_criterion_04_minimality(lower_ref, two_ref):
    msgs = []
    ok = True
    for label, (spec, grid, sol) in (("lower", lower_ref), ("two", two_ref)):
        r_pos, r_neg = minimality_residual(sol.u, sol.nu, spec.barriers, grid)
        tv_pos, tv_neg = sol.nu.tv()
        bound = 1e-6 * (tv_pos + tv_neg + 1e-30)
        ok = ok and abs(r_pos) <= bound and abs(r_neg) <= bound
        msgs.append(f"{label}: r=({r_pos:.2e},{r_neg:.2e}) bound {bound:.2e}")
    report(4, "minimality residuals", ok, "; ".join(msgs))


def test_criterion_05_tv_uniform_bound(lower_ref, two_ref, lower_sweep, outer_sweep):
    msgs = []
    ok = True
    for label, (_, _, sol), sweep in (("lower", lower_ref, lower_sweep),
                                      ("two", two_ref, outer_sweep)):
        tv_vi = sol.nu.tv_total()
        tv_max = max(r.tv_pos + r.tv_neg for r in sweep.rows)
        ok = ok and tv_max <= 1.05 * tv_vi + 1e-8
        msgs.append(f"{label}: max_n {tv_max:.5f} vs 1.05*{tv_vi:.5f}")
    report(5, "TV uniform bound across sweeps", ok, "; ".join(msgs))


def _random_dominated_pair(rng, base_spec):
    """A dominated pair of specs sharing the driver and coefficients."""
    c0 = rng.uniform(0.4, 0.9)
    c1 = rng.uniform(0.0, 0.4)
    g0 = rng.uniform(0.0, 1.5)
    g1 = rng.uniform(0.0, 1.0)
    b0 = rng.uniform(0.05, 0.2)
    b_shift = rng.uniform(0.0, 0.08)
    two_sided = rng.uniform() < 0.5

    phi_lo = lambda x: c0 * np.sin(np.pi * x)
    phi_hi = lambda x: (c0 + c1) * np.sin(np.pi * x)
    meas_lo = MeasureData(density=lambda t, x: g0 * (1 - t) * np.sin(np.pi * x))
    meas_hi = MeasureData(
        density=lambda t, x: (g0 * (1 - t) + g1 * t) * np.sin(np.pi * x))
    h1_lo = lambda t, x: b0 * np.sin(np.pi * x) - 0.02
    h1_hi = lambda t, x: (b0 + b_shift) * np.sin(np.pi * x) - 0.02
    if two_sided:
        bar_lo = BarrierPair(h1=h1_lo, h2=lambda t, x: 0.7 + 0.0 * x)
        bar_hi = BarrierPair(h1=h1_hi, h2=lambda t, x: 0.7 + b_shift + 0.0 * x)
    else:
        bar_lo = BarrierPair(h1=h1_lo)
        bar_hi = BarrierPair(h1=h1_hi)
    lo = dataclasses.replace(base_spec, terminal=phi_lo, measure=meas_lo,
                             barriers=bar_lo, name="cmp_lo")
    hi = dataclasses.replace(base_spec, terminal=phi_hi, measure=meas_hi,
                             barriers=bar_hi, name="cmp_hi")
    return lo, hi


def test_criterion_06_comparison_principle(lower_ref):
    spec, _, _ = lower_ref
    grid = Grid(spec.domain, nx=64, nt=128)
    rng = np.random.default_rng(SEED)
    t0 = time.perf_counter()
    violations = 0
    worst = -np.inf
    for _ in range(20):
        lo, hi = _random_dominated_pair(rng, spec)
        res = comparison_trial(lo, hi, grid)
        violations += res.violations
        worst = max(worst, res.worst_gap)
    elapsed = time.perf_counter() - t0
    report(6, "comparison principle (20 randomized pairs)",
           violations == 0 and elapsed < 30.0,
           f"violations beyond 1e-10: {violations}, worst gap {worst:.2e}, "
           f"{elapsed:.1f}s (budget 30s)")


def test_criterion_07_l1_estimate():
    msgs = []
    ok = True
    for name in ("heat", "heat2d", "lower_barrier", "two_barrier", "time_atom"):
        spec, _ = load_problem(name)
        if spec.driver.kappa > 0:
            continue
        nx = 24 if spec.domain.dim == 2 else 96
        grid = Grid(spec.domain, nx=nx, nt=128)
        u = solve_cauchy_dirichlet(spec, grid)
        res = l1_estimate_check(spec, grid, u)
        ok = ok and res.passed
        msgs.append(f"{name}: {res.lhs:.4f} <= 1.02*{res.rhs:.4f}")
    report(7, "L1 estimate with C=1 (kappa<=0)", ok, "; ".join(msgs))


def test_criterion_08_feynman_kac(lower_ref):
    spec, grid, sol = lower_ref
    t0 = time.perf_counter()
    res = feynman_kac_check(spec, grid, FK_POINTS, N=100_000, dt_mc=1e-4,
                            seed=SEED, u=sol.u, nu=sol.nu)
    refined = feynman_kac_check(spec, grid, FK_POINTS, N=100_000, dt_mc=5e-5,
                                seed=SEED, u=sol.u, nu=sol.nu)
    elapsed = time.perf_counter() - t0
    zs = [r.z for r in res]
    zs_half = [r.z for r in refined]
    growth = max(zs_half) - max(zs)
    ok = all(z <= 3.0 for z in zs) and growth <= 0.5 and elapsed < 60.0
    report(8, "Feynman-Kac Monte Carlo", ok,
           f"z = {['%.2f' % z for z in zs]}, halved-dt z = "
           f"{['%.2f' % z for z in zs_half]}, growth {growth:.2f} (tol 0.5), "
           f"{elapsed:.1f}s (budget 60s)")


def test_criterion_09_dynkin_agreement(two_ref):
    spec, grid, sol = two_ref
    V = dynkin_value(spec, grid)
    gap = V.sup_distance(sol.u)
    report(9, "Dynkin dynamic program vs complementarity", gap <= 5e-3,
           f"sup gap {gap:.3e} (tol 5e-3) on 128x512")


def test_criterion_10_envelope(lower_ref, two_ref):
    msgs = []
    ok = True
    for label, (spec, grid, _) in (("lower", lower_ref), ("two", two_ref)):
        env = envelope_check(spec, grid, trials=10, seed=SEED)
        good = env.dominating >= 1 and (np.isnan(env.min_margin)
                                        or env.min_margin >= -1e-8)
        ok = ok and good
        msgs.append(f"{label}: {env.dominating}/10 dominating, "
                    f"min margin {env.min_margin:.2e}")
    report(10, "supersolution envelope trials", ok, "; ".join(msgs))


def test_criterion_11_atom_jump():
    spec, _ = load_problem("time_atom")
    grid = Grid(spec.domain, nx=128, nt=256)
    u = solve_cauchy_dirichlet(spec, grid)
    base = dataclasses.replace(spec, measure=MeasureData())
    u0 = solve_cauchy_dirichlet(base, grid)
    k = grid.time_index(0.5)
    rho = project_measure(spec.measure, grid).atoms[k]
    jump_err = float(np.max(np.abs((u.values[k] - u0.values[k]) - rho)))
    above = float(np.max(np.abs(u.values[k + 1:] - u0.values[k + 1:])))
    ok = jump_err <= 1e-8 and above == 0.0
    report(11, "atom-jump consistency", ok,
           f"jump error {jump_err:.2e} (tol 1e-8), upstream difference {above:.1e}")


def test_criterion_12_entropy(lower_ref, two_ref):
    msgs = []
    ok = True
    heat, _ = load_problem("heat")
    heat_grid = Grid(heat.domain, nx=96, nt=192)
    u_heat = solve_cauchy_dirichlet(heat, heat_grid)
    cases = [("heat CD", u_heat, heat, heat_grid, None)]
    for label, (spec, grid, sol) in (("lower", lower_ref), ("two", two_ref)):
        cases.append((f"{label} CD", solve_cauchy_dirichlet(spec, grid), spec,
                      grid, None))
        cases.append((f"{label} VI", sol.u, spec, grid, sol.nu))
    for label, u, spec, grid, nu in cases:
        res = entropy_residual(u, spec, grid, reaction=nu)
        good = res.margin >= -res.rounding_tol
        ok = ok and good
        msgs.append(f"{label}: margin {res.margin:.2e} (tol -{res.rounding_tol:.1e})")
    # deliberately perturbed witness must be strictly negative
    u_bad = u_heat.copy()
    u_bad.values[heat_grid.nt // 2][1:-1] += 0.1
    res_bad = entropy_residual(u_bad, heat, heat_grid)
    witness = res_bad.margin < -res_bad.rounding_tol
    ok = ok and witness
    msgs.append(f"perturbed witness: margin {res_bad.margin:.2e} (negative: {witness})")
    report(12, "entropy inequality margins", ok, "; ".join(msgs))


def test_criterion_13_determinism(tmp_path):
    from reflecta.cli import main

    args = ("verify-mc", "--problem", "lower_barrier", "--nx", "64", "--nt", "128",
            "--paths", "20000", "--dt-mc", "1e-3", "--seed", str(SEED))
    outs = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        assert main(list(args) + ["--out", str(out)]) == 0
        outs.append((out / "feynman_kac.csv").read_bytes())
    mc_same = outs[0] == outs[1]

    pde_outs = []
    for sub in ("c", "d"):
        out = tmp_path / sub
        assert main(["solve-vi", "--problem", "two_barrier", "--nx", "48",
                     "--nt", "96", "--out", str(out)]) == 0
        pde_outs.append((out / "solution_vi.csv").read_bytes())
    pde_same = pde_outs[0] == pde_outs[1]
    report(13, "byte-identical reruns", mc_same and pde_same,
           f"verify-mc identical: {mc_same}, solve-vi identical: {pde_same}")
