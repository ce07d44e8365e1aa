"""Checkable identities and inequalities, packaged as reusable assertions.

The entropy inequality is transcribed so that the implicit-Euler solution
satisfies it exactly up to rounding: the time term telescopes through the
convexity inequality Theta_K(b) - Theta_K(a) <= (b - a) T_K(b), with the
test-function time derivative realized as the forward difference
(eta_{k+1} - eta_k)/dt paired against T_K(u_k - eta_k), and the gradient
term realized through the assembled operator (summation by parts is then
exact).  A genuine solution therefore has margin >= -(rounding); a
perturbed non-solution goes strictly negative.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateFit, DominanceNotSatisfied, InfiniteBarrierUnderMeasure
from .grid import (Grid, GridFunction, barrier_slices, build_operator_slices,
                   project_function, project_measure, tv_norm)


@dataclass
class SweepRow:
    n: float
    sup_gap_to_oracle: float
    tv_pos: float
    tv_neg: float
    minimality_residual: float
    monotonicity_violations: int


@dataclass
class ConvergenceReport:
    """Per-n penalization diagnostics; rows sorted by n ascending."""

    rows: list
    mode: str
    direction: int
    worst_monotonicity_violation: float
    rate_exponent: Optional[float]

    def as_dict(self):
        return {
            "mode": self.mode,
            "direction": self.direction,
            "worst_monotonicity_violation": self.worst_monotonicity_violation,
            "rate_exponent": self.rate_exponent,
            "rows": [vars(r) for r in self.rows],
        }


def minimality_residual(u: GridFunction, nu, barriers, grid: Grid):
    """Quadrature of integral (u - h1) d nu+ and (h2 - u) d nu-.

    Slice densities pair with the stored slice values; an atom at t = T
    pairs with the left limit u(T-) (the clamped terminal data).  Both
    residuals are nonnegative up to quadrature tolerance whenever
    h1 <= u <= h2 nodewise.
    """
    lo = barrier_slices(barriers.h1, grid)
    hi = barrier_slices(barriers.h2, grid)
    cv = grid.cellvol
    r_pos = 0.0
    r_neg = 0.0
    for k in range(grid.nt + 1):
        pos_k = grid.extract(nu.pos[k])
        neg_k = grid.extract(nu.neg[k])
        u_k = u.interior(k)
        if np.any(pos_k > 0.0):
            if lo is None or np.any(pos_k[~np.isfinite(lo[k])] > 0.0):
                node = int(np.argmax(pos_k > 0.0))
                raise InfiniteBarrierUnderMeasure(
                    f"nu+ charges node {node} at slice {k} where h1 is absent")
            fin = np.isfinite(lo[k])
            r_pos += float(np.sum((u_k[fin] - lo[k][fin]) * pos_k[fin])) * cv * grid.dt
        if np.any(neg_k > 0.0):
            if hi is None or np.any(neg_k[~np.isfinite(hi[k])] > 0.0):
                node = int(np.argmax(neg_k > 0.0))
                raise InfiniteBarrierUnderMeasure(
                    f"nu- charges node {node} at slice {k} where h2 is absent")
            fin = np.isfinite(hi[k])
            r_neg += float(np.sum((hi[k][fin] - u_k[fin]) * neg_k[fin])) * cv * grid.dt
    for k, (rp_full, rn_full) in nu.atoms.items():
        rp = grid.extract(rp_full)
        rn = grid.extract(rn_full)
        u_left = u.interior(k)
        if k == grid.nt:
            u_left = u_left + rp - rn  # clamped terminal data = left limit
        if np.any(rp > 0.0):
            if lo is None or np.any(rp[~np.isfinite(lo[k])] > 0.0):
                raise InfiniteBarrierUnderMeasure(f"nu+ atom at slice {k} where h1 absent")
            fin = np.isfinite(lo[k])
            r_pos += float(np.sum((u_left[fin] - lo[k][fin]) * rp[fin])) * cv
        if np.any(rn > 0.0):
            if hi is None or np.any(rn[~np.isfinite(hi[k])] > 0.0):
                raise InfiniteBarrierUnderMeasure(f"nu- atom at slice {k} where h2 absent")
            fin = np.isfinite(hi[k])
            r_neg += float(np.sum((hi[k][fin] - u_left[fin]) * rn[fin])) * cv
    return r_pos, r_neg


def _truncate(v, k):
    return np.clip(v, -k, k)


def _theta(v, k):
    """Primitive of the truncation: integral of T_k from 0 to v."""
    a = np.abs(v)
    return np.where(a <= k, 0.5 * v * v, k * a - 0.5 * k * k)


@dataclass
class EntropyCase:
    eta_name: str
    k: float
    margin: float


@dataclass
class EntropyResult:
    margin: float
    worst: EntropyCase
    cases: list
    rounding_tol: float


def default_eta_set(grid: Grid, amp: float):
    """Fixed library of smooth test functions vanishing on the lateral
    boundary; amplitudes scale with ``amp``."""
    meshes = grid.full_meshes()
    profile = np.ones(grid.shape_full)
    for ax, mesh in enumerate(meshes):
        profile = profile * np.sin(np.pi * mesh / grid.domain.lengths[ax])
    T = grid.domain.horizon
    etas = [("zero", np.zeros((grid.nt + 1,) + grid.shape_full))]

    def stack(time_fn, shape_arr):
        out = np.empty((grid.nt + 1,) + grid.shape_full)
        for k in range(grid.nt + 1):
            out[k] = time_fn(grid.times[k]) * shape_arr
        return out

    etas.append(("sin_steady", stack(lambda t: 0.4 * amp, profile)))
    etas.append(("sin_pulse", stack(lambda t: 0.25 * amp * np.cos(2 * np.pi * t / T),
                                    profile**2)))
    etas.append(("tilt", stack(lambda t: 0.3 * amp * (1.0 - t / T), profile)))
    etas.append(("negative", stack(lambda t: -0.35 * amp * (0.5 + t / T), profile)))
    return etas


def entropy_residual(u: GridFunction, spec, grid: Grid, eta_set=None,
                     ks=(0.5, 1.0, 2.0), reaction=None) -> EntropyResult:
    """Worst signed margin of the discrete entropy inequality.

    The measure must be density-only here (atoms break the telescoping
    between test times); for obstacle solutions pass the reaction measure
    so its densities join the right-hand side.  A (renormalized =
    entropy) solution yields margin >= -rounding_tol; the margin is
    invariant under adding to eta a constant beyond the truncation
    window.
    """
    if spec.measure.atoms:
        raise ValueError("entropy_residual needs a density-only measure "
                         "(atoms excluded between test times)")
    if reaction is not None and reaction.atoms:
        raise ValueError("entropy_residual cannot absorb reaction atoms")
    ops = build_operator_slices(spec.coeffs, grid)
    dmeas = project_measure(spec.measure, grid)
    coords = tuple(m.ravel() for m in grid.interior_meshes())
    cv = grid.cellvol
    dt = grid.dt
    if eta_set is None:
        eta_set = default_eta_set(grid, max(u.sup_norm(), 1e-3))

    # per-slice source: g + f(t_k,.,u_k) (+ reaction density)
    source = np.empty((grid.nt, grid.n_interior))
    for k in range(grid.nt):
        src = grid.extract(dmeas.densities[k])
        src = src + np.asarray(spec.driver.f(grid.times[k], *coords, u.interior(k)),
                               dtype=float)
        if reaction is not None:
            src = src + grid.extract(reaction.signed_densities()[k])
        source[k] = src

    cases = []
    scale = 0.0
    for name, eta in eta_set:
        for kk in ks:
            theta0 = float(np.sum(_theta(grid.extract(u.values[0] - eta[0]), kk))) * cv
            thetaT = float(np.sum(_theta(grid.extract(u.values[grid.nt] - eta[grid.nt]),
                                         kk))) * cv
            eta_t_term = 0.0
            grad_term = 0.0
            source_term = 0.0
            for k in range(grid.nt):
                w = _truncate(grid.extract(u.values[k] - eta[k]), kk)
                d_eta = grid.extract(eta[k + 1] - eta[k])
                eta_t_term += float(np.sum(d_eta * w)) * cv
                grad_term += -float((ops[k].matrix @ u.interior(k)) @ w) * cv * dt
                source_term += float(np.sum(source[k] * w)) * cv * dt
            margin = source_term - (theta0 - thetaT - eta_t_term + grad_term)
            cases.append(EntropyCase(name, kk, margin))
            scale = max(scale, abs(theta0) + abs(thetaT) + abs(eta_t_term)
                        + abs(grad_term) + abs(source_term))
    worst = min(cases, key=lambda c: c.margin)
    tol = 1e-11 * max(1.0, scale) * max(1.0, np.log2(grid.nt + 1))
    return EntropyResult(margin=worst.margin, worst=worst, cases=cases,
                         rounding_tol=tol)


@dataclass
class TruncationEnergyRow:
    k: float
    energy: float
    bound: float
    passed: bool


def truncation_energy_check(u: GridFunction, spec, grid: Grid, ks=(0.5, 1.0, 2.0)):
    """a-weighted gradient energy of truncations against the 4k bound.

    For zero driver and nonnegative data, the discrete quantity
    sum a |grad T_k(u)|^2 cellvol dt is bounded by
    4 k (||phi||_L1 + ||mu||_TV) with 10% slack for the discretization.
    Whether the exact constant survives discretization is not settled, so
    failures should be treated as warnings, not errors.
    """
    ops = build_operator_slices(spec.coeffs, grid)
    phi_l1 = float(np.sum(np.abs(grid.extract(
        project_function(spec.terminal, grid, None))))) * grid.cellvol
    budget = phi_l1 + tv_norm(spec.measure, grid)
    rows = []
    for kk in ks:
        energy = 0.0
        for k in range(grid.nt):
            w = _truncate(u.interior(k), kk)
            # <-A w, w> cellvol equals (1/2) the a-weighted face energy
            energy += -2.0 * float((ops[k].matrix @ w) @ w) * grid.cellvol * grid.dt
        bound = 4.0 * kk * budget * 1.1
        rows.append(TruncationEnergyRow(k=kk, energy=energy, bound=bound,
                                        passed=bool(energy <= bound)))
    return rows


@dataclass
class ComparisonResult:
    violations: int
    worst_gap: float


def _dominated(a, b, tol=0.0):
    return float(np.max(a - b)) <= tol


def comparison_trial(spec_lo, spec_hi, grid: Grid) -> ComparisonResult:
    """Solve a dominated pair and count ordering violations.

    Dominance of the data (terminal, measure density and atoms, both
    barriers) is checked nodewise first; the drivers must be the same
    monotone f.  Violations are nodes with u_lo > u_hi + 1e-10.
    """
    if spec_lo.driver is not spec_hi.driver:
        raise DominanceNotSatisfied("comparison needs a common monotone driver")
    phi_lo = project_function(spec_lo.terminal, grid, None)
    phi_hi = project_function(spec_hi.terminal, grid, None)
    if not _dominated(phi_lo, phi_hi):
        raise DominanceNotSatisfied("terminal data are not ordered")
    m_lo = project_measure(spec_lo.measure, grid)
    m_hi = project_measure(spec_hi.measure, grid)
    if not _dominated(m_lo.densities, m_hi.densities):
        raise DominanceNotSatisfied("measure densities are not ordered")
    keys = set(m_lo.atoms) | set(m_hi.atoms)
    for k in keys:
        lo_arr = m_lo.atoms.get(k, 0.0)
        hi_arr = m_hi.atoms.get(k, 0.0)
        if float(np.max(np.asarray(lo_arr) - np.asarray(hi_arr))) > 0.0:
            raise DominanceNotSatisfied(f"atom at slice {k} not ordered")

    def chk_nodewise(fn_lo, fn_hi, which):
        lo_s = barrier_slices(fn_lo, grid)
        hi_s = barrier_slices(fn_hi, grid)
        for k in range(grid.nt + 1):
            if not _dominated(lo_s[k], hi_s[k]):
                raise DominanceNotSatisfied(f"{which} not ordered at slice {k}")

    # absent lower barrier = -inf, absent upper barrier = +inf
    b_lo, b_hi = spec_lo.barriers, spec_hi.barriers
    if b_lo.h1 is not None:
        if b_hi.h1 is None:
            raise DominanceNotSatisfied("h1: finite low side vs absent (-inf) high side")
        chk_nodewise(b_lo.h1, b_hi.h1, "h1")
    if b_hi.h2 is not None:
        if b_lo.h2 is None:
            raise DominanceNotSatisfied("h2: absent (+inf) low side vs finite high side")
        chk_nodewise(b_lo.h2, b_hi.h2, "h2")

    from .lcp import solve_vi
    from .solver import solve_cauchy_dirichlet

    def solve(spec):
        if spec.barriers.any_present:
            return solve_vi(spec, grid).u
        return solve_cauchy_dirichlet(spec, grid)

    u_lo = solve(spec_lo)
    u_hi = solve(spec_hi)
    diff = u_lo.values - u_hi.values
    violations = int(np.sum(diff > 1e-10))
    return ComparisonResult(violations=violations, worst_gap=float(np.max(diff)))


@dataclass
class L1EstimateResult:
    lhs: float
    rhs: float
    constant: float
    passed: bool
    asserted: bool


def l1_estimate_check(spec, grid: Grid, u: GridFunction) -> L1EstimateResult:
    """||f_u||_L1 <= 1.02 C (||phi||_L1 + ||f(.,.,0)||_L1 + ||mu||_TV).

    C = 1 for kappa <= 0 (an assertable bound); for kappa > 0 the change
    of variables only gives an exponential factor, so C = exp(kappa T)
    and the result is report-only (``asserted`` False).
    """
    coords = tuple(m.ravel() for m in grid.interior_meshes())
    cv = grid.cellvol
    lhs = 0.0
    f0 = 0.0
    for k in range(grid.nt):
        t = grid.times[k]
        lhs += float(np.sum(np.abs(
            np.asarray(spec.driver.f(t, *coords, u.interior(k)), dtype=float)))) * cv * grid.dt
        f0 += float(np.sum(np.abs(
            np.asarray(spec.driver.f(t, *coords, np.zeros(grid.n_interior)),
                       dtype=float)))) * cv * grid.dt
    phi_l1 = float(np.sum(np.abs(grid.extract(
        project_function(spec.terminal, grid, None))))) * cv
    rhs = phi_l1 + f0 + tv_norm(spec.measure, grid)
    kappa = spec.driver.kappa
    constant = 1.0 if kappa <= 0 else float(np.exp(kappa * spec.domain.horizon))
    passed = lhs <= 1.02 * constant * rhs + 1e-30
    return L1EstimateResult(lhs=lhs, rhs=rhs, constant=constant,
                            passed=bool(passed), asserted=kappa <= 0)


def rate_fit(report: ConvergenceReport) -> float:
    """Least-squares slope of log(gap) vs log(n); reported, never asserted."""
    ns = np.array([r.n for r in report.rows], dtype=float)
    gaps = np.array([r.sup_gap_to_oracle for r in report.rows], dtype=float)
    keep = gaps > 1e-12
    if np.sum(keep) < 3:
        raise DegenerateFit("need at least 3 rows with gaps above 1e-12")
    slope = np.polyfit(np.log(ns[keep]), np.log(gaps[keep]), 1)[0]
    return float(slope)
