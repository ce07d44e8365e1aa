import numpy as np
import pytest

from reflecta import (BarrierPair, Driver, Grid, ProblemSpec,
                      envelope_check, solve_cauchy_dirichlet, solve_vi)
from reflecta.errors import ConfigError
from conftest import pinned_mode_exact


def test_inactive_barrier_matches_cauchy_dirichlet(heat_spec, grid_64):
    spec = heat_spec.with_barriers(lambda t, x: -5.0 + 0.0 * x, None)
    sol = solve_vi(spec, grid_64)
    u = solve_cauchy_dirichlet(heat_spec, grid_64)
    assert sol.u.sup_distance(u) <= 1e-9
    assert sol.nu.tv_total() <= 1e-9


def test_equality_obstacle_pins_solution(unit_domain, identity_coeffs):
    from reflecta import CoefficientField

    grid = Grid(unit_domain, nx=24, nt=48)
    w = lambda t, x: 0.3 * np.sin(np.pi * x) * (1.0 + t)
    spec = ProblemSpec(unit_domain, identity_coeffs, Driver.zero(),
                       lambda x: 0.6 * np.sin(np.pi * x),
                       barriers=BarrierPair(h1=w, h2=w))
    sol = solve_vi(spec, grid)
    for k in range(grid.nt):
        assert np.max(np.abs(sol.u.values[k][1:-1]
                             - w(grid.times[k], grid.axes[0][1:-1]))) <= 1e-10
    assert sol.nu.tv_total() > 0.0


def test_pinned_mode_matches_closed_form(pinned_mode_spec):
    grid = Grid(pinned_mode_spec.domain, nx=128, nt=512)
    sol = solve_vi(pinned_mode_spec, grid)
    exact = pinned_mode_exact(grid)
    assert np.max(np.abs(sol.u.values - exact)) <= 5e-3
    # reaction density on the contact set: alpha (pi^2/2 + 1) sin(pi x)
    lam = np.pi**2 / 2 + 1.0
    k_deep = grid.time_index(0.3)  # well inside the contact window
    x = grid.axes[0][1:-1]
    dens = grid.extract(sol.nu.pos[k_deep])
    assert np.max(np.abs(dens - 0.25 * lam * np.sin(np.pi * x))) <= 0.05


def test_feasibility_and_complementarity(pinned_mode_spec):
    grid = Grid(pinned_mode_spec.domain, nx=64, nt=128)
    sol = solve_vi(pinned_mode_spec, grid)
    h1 = lambda t, x: 0.25 * np.sin(np.pi * x)
    scale = max(1.0, sol.u.sup_norm(), sol.nu.max_density())
    for k in range(grid.nt + 1):
        lo = h1(grid.times[k], grid.axes[0][1:-1])
        u_k = sol.u.values[k][1:-1]
        assert np.min(u_k - lo) >= -1e-10
        # nodewise complementarity (u - h1) nu+ small
        prod = (u_k - lo) * grid.extract(sol.nu.pos[k])
        assert np.max(np.abs(prod)) <= 1e-10 * scale * 10
    # mutual singularity holds exactly
    assert np.max(sol.nu.pos * sol.nu.neg) == 0.0


def test_active_sets_report_contact(pinned_mode_spec):
    grid = Grid(pinned_mode_spec.domain, nx=48, nt=96)
    sol = solve_vi(pinned_mode_spec, grid)
    k = grid.time_index(0.2)
    assert sol.active_lower[k].any()
    assert not sol.active_upper.any()
    lo = 0.25 * np.sin(np.pi * grid.axes[0][1:-1])
    u_k = sol.u.values[k][1:-1]
    assert np.max(np.abs(u_k[sol.active_lower[k]] - lo[sol.active_lower[k]])) <= 1e-9


def test_pgs_alone_converges_small_slice():
    """Pure projected Gauss-Seidel reaches the policy-iteration solution."""
    from reflecta import CoefficientField, SpaceTimeDomain
    from reflecta.lcp import _red_black_masks, pgs_sweeps
    from reflecta.solver import MarchContext

    dom = SpaceTimeDomain(1, (1.0,), 1.0)
    grid = Grid(dom, nx=12, nt=4)
    spec = ProblemSpec(dom, CoefficientField.constant(1.0), Driver.zero(),
                       lambda x: np.sin(np.pi * x),
                       barriers=BarrierPair(h1=lambda t, x: 0.4 * np.sin(np.pi * x)))
    ctx = MarchContext(spec, grid)
    M = ctx.system_matrix(0)
    rhs = ctx.terminal_interior() / grid.dt
    lo = ctx.lo[0]
    hi = np.full(grid.n_interior, np.inf)
    from reflecta.lcp import solve_slice_lcp
    from reflecta.solver import NewtonStats

    v_ref, _ = solve_slice_lcp(ctx, 0, M, rhs, ctx.terminal_interior(), lo, hi,
                               NewtonStats())
    v = ctx.terminal_interior().copy()
    v = pgs_sweeps(M, lo, hi, _red_black_masks(grid), v,
                   lambda w: rhs + ctx.f(0, w), sweeps=4000)
    assert np.max(np.abs(v - v_ref)) <= 1e-8


def test_envelope_equality_case(heat_spec, grid_64):
    # barrier never binds: nu+ = 0 and the lambda = 0 supersolution is u itself
    spec = heat_spec.with_barriers(lambda t, x: -5.0 + 0.0 * x, None)
    sol = solve_vi(spec, grid_64)
    u = solve_cauchy_dirichlet(heat_spec, grid_64)
    assert sol.nu.tv_total() <= 1e-9
    assert sol.u.sup_distance(u) <= 1e-9


def test_envelope_lower_barrier_trials(pinned_mode_spec):
    grid = Grid(pinned_mode_spec.domain, nx=48, nt=96)
    report = envelope_check(pinned_mode_spec, grid, trials=8, seed=7)
    assert report.trials == 8
    assert report.dominating >= 1
    assert report.min_margin >= -1e-8


def test_envelope_needs_lower_barrier(heat_spec, grid_64):
    with pytest.raises(ConfigError):
        envelope_check(heat_spec, grid_64, trials=2, seed=0)


def test_solve_vi_needs_barrier(heat_spec, grid_64):
    with pytest.raises(ConfigError):
        solve_vi(heat_spec, grid_64)


def test_terminal_clamp_records_atom(unit_domain, identity_coeffs):
    grid = Grid(unit_domain, nx=24, nt=48)
    # phi = 0 violates the lower barrier at T
    spec = ProblemSpec(unit_domain, identity_coeffs, Driver.zero(),
                       lambda x: 0.0 * x,
                       barriers=BarrierPair(h1=lambda t, x: 0.2 * np.sin(np.pi * x)))
    sol = solve_vi(spec, grid)
    assert grid.nt in sol.nu.atoms
    rho_pos, rho_neg = sol.nu.atoms[grid.nt]
    x = grid.axes[0]
    assert np.allclose(rho_pos, 0.2 * np.sin(np.pi * x) * (x > 0) * (x < 1), atol=1e-12)
    assert np.max(rho_neg) == 0.0
    # stored terminal slice keeps phi
    assert np.max(np.abs(sol.u.values[grid.nt])) == 0.0


def test_penalty_and_residual_reactions_agree_in_tv(pinned_mode_spec):
    # the two constructions of nu (stiff-term densities at large n vs the
    # complementarity residual) measure the same object
    from reflecta import solve_penalized

    grid = Grid(pinned_mode_spec.domain, nx=64, nt=128)
    vi = solve_vi(pinned_mode_spec, grid)
    pen = solve_penalized(pinned_mode_spec, grid, 4096.0)
    tv_vi = vi.nu.tv_total()
    tv_pen = pen.nu.tv_total()
    assert abs(tv_pen - tv_vi) <= 0.05 * tv_vi


def test_2d_obstacle_vi_vs_penalized():
    from reflecta import CoefficientField, SpaceTimeDomain, solve_penalized
    from reflecta.grid import barrier_slices

    dom = SpaceTimeDomain(2, (1.0, 1.0), 0.5)
    h1 = lambda t, x1, x2: 0.1 * np.sin(np.pi * x1) * np.sin(np.pi * x2)
    spec = ProblemSpec(dom, CoefficientField.constant(np.eye(2), dim=2),
                       Driver.linear(-1.0),
                       lambda x1, x2: 0.8 * np.sin(np.pi * x1) * np.sin(np.pi * x2),
                       barriers=BarrierPair(h1=h1))
    grid = Grid(dom, nx=(14, 14), nt=48)
    sol = solve_vi(spec, grid)
    # contact develops (the unconstrained mode decays below the obstacle)
    assert sol.active_lower[: grid.nt // 2].any()
    lo = barrier_slices(h1, grid)
    for k in range(grid.nt + 1):
        assert np.min(grid.extract(sol.u.values[k]) - lo[k]) >= -1e-10
    pen = solve_penalized(spec, grid, 2048.0)
    assert pen.u.sup_distance(sol.u) <= 2.0 * sol.nu.max_density() / 2048.0 + 1e-9
