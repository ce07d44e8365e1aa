"""Backward implicit Euler solvers: Cauchy-Dirichlet and penalized runs.

The march goes from the terminal slice down to t = 0.  Each step solves

    (I/dt - A_{t_k}) u_k = u_{k+1}/dt + f(t_k, ., u_k) + g_k
                           + n (u_k - h1_k)^- - n (u_k - h2_k)^+

fully implicitly; the nonlinear driver and the stiff penalty branches are
handled by one damped semismooth Newton loop per slice (generalized
derivative: indicator of the active branch, with the kink counted as
active).  Implicit Euler is first order and unconditionally stable, which
the stiff penalty terms require, and the scheme is monotone, which the
nodewise penalization-monotonicity checks rely on.

Time atoms of the measure are injected as jumps: after the march steps
onto an atom slice, the atom density is added nodewise, so the stored
slice holds the left limit u(t_k^-).  An atom at t = T only modifies the
data the march starts from; the stored terminal slice stays phi.  When
the terminal data violate a barrier, the first backward step would have
to produce the corresponding reaction atom at t = T; it is recorded as an
atom of the ReactionMeasure and the working vector starts from the
clamped data.

Slice systems are uniquely solvable for dt * kappa < 1; dt is capped at
0.5 / max(kappa, 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigError, NewtonDivergence, PenaltyOverflow
from .grid import (DiscreteMeasure, Grid, GridFunction, barrier_slices,
                   build_operator_slices, project_function, project_measure)

NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 50
NEWTON_MAX_HALVINGS = 30
PENALTY_OVERFLOW_GUARD = 1e12


@dataclass
class NewtonStats:
    """Iteration counts and worst residual across all slices of a march."""

    iterations: list = field(default_factory=list)
    damped_steps: int = 0
    max_residual: float = 0.0

    def record(self, iters, damped, residual):
        self.iterations.append(iters)
        self.damped_steps += damped
        self.max_residual = max(self.max_residual, residual)

    def as_dict(self):
        return {"total_iterations": int(np.sum(self.iterations)) if self.iterations else 0,
                "max_iterations": int(np.max(self.iterations)) if self.iterations else 0,
                "damped_steps": self.damped_steps,
                "max_residual": self.max_residual}


class ReactionMeasure:
    """Jordan decomposition of the discrete reaction measure nu.

    ``pos``/``neg`` are per-slice nodal densities (full shape, zero
    boundary); ``atoms`` maps a slice index (only nt in practice, from
    terminal incompatibility) to a pair of nodal spatial densities.
    The parts are mutually singular nodewise by construction: a node
    cannot violate both barriers since h1 <= h2.
    """

    def __init__(self, grid, pos=None, neg=None, atoms=None):
        shape = (grid.nt + 1,) + grid.shape_full
        self.grid = grid
        self.pos = np.zeros(shape) if pos is None else pos
        self.neg = np.zeros(shape) if neg is None else neg
        self.atoms = atoms or {}

    @staticmethod
    def zero(grid):
        return ReactionMeasure(grid)

    def tv(self):
        g = self.grid
        tv_pos = float(np.sum(self.pos)) * g.cellvol * g.dt
        tv_neg = float(np.sum(self.neg)) * g.cellvol * g.dt
        for rp, rn in self.atoms.values():
            tv_pos += float(np.sum(rp)) * g.cellvol
            tv_neg += float(np.sum(rn)) * g.cellvol
        return tv_pos, tv_neg

    def tv_total(self):
        p, n = self.tv()
        return p + n

    def signed_densities(self):
        """Per-slice signed density nu+ - nu- (atoms not included)."""
        return self.pos - self.neg

    def max_density(self):
        return float(max(np.max(self.pos), np.max(self.neg)))


@dataclass
class PenalizedSolution:
    u: GridFunction
    nu: ReactionMeasure
    n: float
    newton_stats: NewtonStats


def _check_dt(spec, grid):
    cap = 0.5 / max(spec.driver.kappa, 1.0)
    if grid.dt > cap * (1.0 + 1e-12):
        raise ConfigError(
            f"dt={grid.dt:g} exceeds the solvability cap 0.5/max(kappa,1)={cap:g}; "
            "increase nt")


class MarchContext:
    """Per-solve precomputation shared by the implicit solvers."""

    def __init__(self, spec, grid: Grid, discrete_measure: Optional[DiscreteMeasure] = None,
                 with_barriers=True):
        _check_dt(spec, grid)
        self.spec = spec
        self.grid = grid
        self.ops = build_operator_slices(spec.coeffs, grid)
        self.coords = tuple(m.ravel() for m in grid.interior_meshes())
        self.phi = project_function(spec.terminal, grid, None, boundary_zero=True)
        self.measure = discrete_measure if discrete_measure is not None \
            else project_measure(spec.measure, grid)
        if not self.measure.grid.compatible_with(grid):
            raise ConfigError("discrete measure grid does not match solver grid")
        self.lo = barrier_slices(spec.barriers.h1, grid) if with_barriers else None
        self.hi = barrier_slices(spec.barriers.h2, grid) if with_barriers else None
        eye = sp.identity(grid.n_interior, format="csr")
        self._eye_over_dt = eye / grid.dt

    def system_matrix(self, k):
        return (self._eye_over_dt - self.ops[k].matrix).tocsr()

    def f(self, k, v):
        t = self.grid.times[k]
        out = np.asarray(self.spec.driver.f(t, *self.coords, v), dtype=float)
        return np.broadcast_to(out, v.shape)

    def fy(self, k, v):
        t = self.grid.times[k]
        if self.spec.driver.f_y is not None:
            out = np.asarray(self.spec.driver.f_y(t, *self.coords, v), dtype=float)
            return np.broadcast_to(out, v.shape).copy()
        delta = 1e-7 * (1.0 + np.abs(v))
        up = np.asarray(self.spec.driver.f(t, *self.coords, v + delta), dtype=float)
        dn = np.asarray(self.spec.driver.f(t, *self.coords, v - delta), dtype=float)
        return (up - dn) / (2.0 * delta)

    def measure_slice(self, k):
        return self.grid.extract(self.measure.densities[k])

    def atom_slice(self, k):
        arr = self.measure.atoms.get(k)
        return None if arr is None else self.grid.extract(arr)

    def terminal_interior(self):
        """Terminal data including a possible measure atom at t = T."""
        w = self.grid.extract(self.phi)
        atom = self.atom_slice(self.grid.nt)
        if atom is not None:
            w = w + atom
        return w


def _solve_slice_newton(ctx, k, M, rhs, v0, n_penalty, lo_k, hi_k, stats):
    """Damped semismooth Newton for one implicit slice.

    Residual F(v) = M v - f(t_k,.,v) - n (v-h1)^- + n (v-h2)^+ - rhs.
    At the penalty kinks the active-branch derivative value 1 is used
    (v <= h1 and v >= h2 count as active).
    """
    v = v0.copy()

    def residual(w):
        r = M @ w - ctx.f(k, w) - rhs
        if n_penalty:
            if lo_k is not None:
                viol = np.maximum(lo_k - w, 0.0)
                if n_penalty * viol.max(initial=0.0) > PENALTY_OVERFLOW_GUARD:
                    raise PenaltyOverflow(f"lower penalty overflow at slice {k}")
                r -= n_penalty * viol
            if hi_k is not None:
                viol = np.maximum(w - hi_k, 0.0)
                if n_penalty * viol.max(initial=0.0) > PENALTY_OVERFLOW_GUARD:
                    raise PenaltyOverflow(f"upper penalty overflow at slice {k}")
                r += n_penalty * viol
        return r

    F = residual(v)
    norm = float(np.max(np.abs(F)))
    damped = 0
    for it in range(1, NEWTON_MAX_ITER + 1):
        if norm <= NEWTON_TOL:
            stats.record(it - 1, damped, norm)
            return v
        diag = -ctx.fy(k, v)
        if n_penalty:
            if lo_k is not None:
                diag = diag + n_penalty * (v <= lo_k)
            if hi_k is not None:
                diag = diag + n_penalty * (v >= hi_k)
        J = (M + sp.diags(diag)).tocsc()
        step = spla.splu(J).solve(-F)
        alpha = 1.0
        for _ in range(NEWTON_MAX_HALVINGS):
            trial = v + alpha * step
            Ft = residual(trial)
            nt_ = float(np.max(np.abs(Ft)))
            if nt_ < norm:
                v, F, norm = trial, Ft, nt_
                break
            alpha *= 0.5
            damped += 1
        else:
            node = int(np.argmax(np.abs(F)))
            raise NewtonDivergence(
                f"no residual decrease at slice {k}, node {node}, residual {norm:g}",
                slice_index=k, node_index=node, residual=norm)
    if norm <= NEWTON_TOL:
        stats.record(NEWTON_MAX_ITER, damped, norm)
        return v
    node = int(np.argmax(np.abs(F)))
    raise NewtonDivergence(
        f"Newton did not converge at slice {k}, node {node}, residual {norm:g}",
        slice_index=k, node_index=node, residual=norm)


def _march(ctx: MarchContext, n_penalty=0.0, use_barriers=False):
    """Run the backward march; returns (GridFunction, ReactionMeasure,
    NewtonStats)."""
    grid = ctx.grid
    u = GridFunction.zeros(grid)
    nu = ReactionMeasure.zero(grid)
    stats = NewtonStats()

    w = ctx.terminal_interior()
    u.values[grid.nt] = grid.embed(grid.extract(ctx.phi))

    if use_barriers:
        lo_T = ctx.lo[grid.nt] if ctx.lo is not None else None
        hi_T = ctx.hi[grid.nt] if ctx.hi is not None else None
        rho_pos = np.maximum(lo_T - w, 0.0) if lo_T is not None else np.zeros_like(w)
        rho_neg = np.maximum(w - hi_T, 0.0) if hi_T is not None else np.zeros_like(w)
        if rho_pos.any() or rho_neg.any():
            nu.atoms[grid.nt] = (grid.embed(rho_pos), grid.embed(rho_neg))
            w = w + rho_pos - rho_neg

    for k in range(grid.nt - 1, -1, -1):
        M = ctx.system_matrix(k)
        rhs = w / grid.dt + ctx.measure_slice(k)
        lo_k = ctx.lo[k] if (use_barriers and ctx.lo is not None) else None
        hi_k = ctx.hi[k] if (use_barriers and ctx.hi is not None) else None
        v = _solve_slice_newton(ctx, k, M, rhs, w, n_penalty if use_barriers else 0.0,
                                lo_k, hi_k, stats)
        if use_barriers:
            if lo_k is not None:
                nu.pos[k] = grid.embed(n_penalty * np.maximum(lo_k - v, 0.0))
            if hi_k is not None:
                nu.neg[k] = grid.embed(n_penalty * np.maximum(v - hi_k, 0.0))
        atom = ctx.atom_slice(k)
        if atom is not None:
            v = v + atom
        u.values[k] = grid.embed(v)
        w = v
    return u, nu, stats


def solve_cauchy_dirichlet(spec, grid: Grid, discrete_measure=None) -> GridFunction:
    """Unconstrained backward solve; barriers in ``spec`` are ignored.

    ``discrete_measure`` optionally replaces the projection of
    ``spec.measure`` by an already-discrete measure (the envelope check
    composes measures this way).
    """
    ctx = MarchContext(spec, grid, discrete_measure, with_barriers=False)
    u, _, _ = _march(ctx, use_barriers=False)
    return u


def solve_cauchy_dirichlet_with_stats(spec, grid: Grid, discrete_measure=None):
    ctx = MarchContext(spec, grid, discrete_measure, with_barriers=False)
    u, _, stats = _march(ctx, use_barriers=False)
    return u, stats


def solve_penalized(spec, grid: Grid, n: float) -> PenalizedSolution:
    """Penalized approximation with parameter n.

    The stiff terms push up below the lower barrier and down above the
    upper one; the slice densities n (u - h1)^- and n (u - h2)^+ are the
    Jordan parts of the discrete reaction measure.
    """
    if not spec.barriers.any_present:
        raise ConfigError("solve_penalized needs at least one barrier")
    if n <= 0:
        raise ConfigError("penalty parameter must be positive")
    ctx = MarchContext(spec, grid)
    u, nu, stats = _march(ctx, n_penalty=float(n), use_barriers=True)
    return PenalizedSolution(u, nu, float(n), stats)


def _modified_driver_outer(driver, h2, n):
    """Driver f - n (y - h2)^+ used by the outer two-barrier scheme."""
    from .problem import Driver

    base_f = driver.f
    base_fy = driver.f_y

    def f(t, *rest):
        y = rest[-1]
        coords = rest[:-1]
        cap = np.asarray(h2(t, *coords), dtype=float)
        return base_f(t, *rest) - n * np.maximum(np.asarray(y) - cap, 0.0)

    def fy(t, *rest):
        y = np.asarray(rest[-1], dtype=float)
        coords = rest[:-1]
        cap = np.asarray(h2(t, *coords), dtype=float)
        if base_fy is not None:
            base = np.asarray(base_fy(t, *rest), dtype=float)
        else:
            delta = 1e-7 * (1.0 + np.abs(y))
            base = (np.asarray(base_f(t, *coords, y + delta), dtype=float)
                    - np.asarray(base_f(t, *coords, y - delta), dtype=float)) / (2 * delta)
        return base - n * (y >= cap)

    return Driver(f=f, kappa=driver.kappa, f_y=fy)


def penalization_sweep(spec, grid: Grid, n_list, mode="direct", oracle=None):
    """Run the penalty scheme for each n and collect diagnostics.

    mode "direct": the penalized equation as given (ascending in n for a
    lower-barrier-only problem).  mode "outer": the two-barrier scheme
    that keeps the lower barrier as an exact constraint and penalizes the
    upper one through the driver, descending in n.

    Rows record the sup-norm gap to the direct complementarity solution
    (the n -> infinity oracle), the TV norms of the reaction parts, the
    minimality residual magnitude and the count of nodewise monotonicity
    violations beyond 1e-10 against the expected direction.

    The per-n solves are independent and share only immutable inputs, so
    they are safe to run concurrently; this implementation runs them
    sequentially, which keeps the report deterministic for free.
    """
    import dataclasses

    from .diagnostics import ConvergenceReport, SweepRow, minimality_residual, rate_fit
    from .lcp import solve_vi
    from .errors import DegenerateFit

    n_list = [float(n) for n in n_list]
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ConfigError("n_list must be strictly increasing")
    if mode not in ("direct", "outer"):
        raise ConfigError(f"unknown sweep mode {mode!r}")
    if mode == "outer" and (spec.barriers.h1 is None or spec.barriers.h2 is None):
        raise ConfigError("outer mode needs both barriers")
    if not spec.barriers.any_present:
        raise ConfigError("penalization_sweep needs at least one barrier")

    if mode == "direct" and spec.barriers.h2 is None:
        direction = 1
    elif mode == "direct" and spec.barriers.h1 is None:
        direction = -1
    elif mode == "outer":
        direction = -1
    else:
        direction = 0

    u_oracle = oracle if oracle is not None else solve_vi(spec, grid).u

    rows = []
    prev = None
    worst_violation = 0.0
    for n in n_list:
        if mode == "direct":
            sol = solve_penalized(spec, grid, n)
            u_n, nu_n = sol.u, sol.nu
        else:
            inner_spec = dataclasses.replace(
                spec.with_barriers(spec.barriers.h1, None),
                driver=_modified_driver_outer(spec.driver, spec.barriers.h2, n),
                name=spec.name + f"+outer{n:g}")
            inner = solve_vi(inner_spec, grid)
            u_n = inner.u
            nu_n = ReactionMeasure(grid, pos=inner.nu.pos.copy(), atoms=dict(inner.nu.atoms))
            hi = barrier_slices(spec.barriers.h2, grid)
            for k in range(grid.nt):
                viol = np.maximum(grid.extract(u_n.values[k]) - hi[k], 0.0)
                nu_n.neg[k] = grid.embed(n * viol)

        violations = 0
        if prev is not None and direction != 0:
            change = direction * (u_n.values - prev.values)
            violations = int(np.sum(change < -1e-10))
            worst_violation = max(worst_violation, float(np.max(-change, initial=0.0)))
        gap = u_n.sup_distance(u_oracle)
        tv_pos, tv_neg = nu_n.tv()
        r_pos, r_neg = minimality_residual(u_n, nu_n, spec.barriers, grid)
        rows.append(SweepRow(n=n, sup_gap_to_oracle=gap, tv_pos=tv_pos, tv_neg=tv_neg,
                             minimality_residual=max(abs(r_pos), abs(r_neg)),
                             monotonicity_violations=violations))
        prev = u_n

    report = ConvergenceReport(rows=rows, mode=mode, direction=direction,
                               worst_monotonicity_violation=worst_violation,
                               rate_exponent=None)
    try:
        report.rate_exponent = rate_fit(report)
    except DegenerateFit:
        pass
    return report
