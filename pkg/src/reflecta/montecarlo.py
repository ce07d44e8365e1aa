"""Diffusion simulation, additive functionals, Feynman-Kac verification,
and the explicit Dynkin dynamic program.

The diffusion generated by ``A_t = 1/2 sum d_j(a_ij d_i)`` has, for C1
coefficients, the Ito form

    dX_i = b_i dt + (sigma dW)_i,   b_i = 1/2 sum_j d_j a_ij,
    sigma = principal square root of a,

so path simulation requires ``smoothness_flag == "C1"``; the drift is
formed by central finite differences (step 1e-5) and sigma is the
symmetric square root (closed form for dim <= 2; any sigma with
sigma sigma^T = a yields the same law, the symmetric root is canonical
and deterministic).  Euler-Maruyama stops at the first sample outside D
or at T; there is no Brownian-bridge exit correction, giving a
documented O(sqrt(dt)) exit bias that the dt-refinement study measures.

Along each path the additive functionals of the measure data and of the
reaction measure accumulate by left-endpoint quadrature of the grid
densities (multilinear in space, nearest slice in time); a time atom
contributes rho(X_{t_k}) at the first sample at-or-after t_k when the
path is still alive.  Paths are partitioned into fixed-size chunks, each
with an RNG stream spawned from (seed, chunk index), and chunk results
merge by summation in chunk order, so estimates are independent of the
worker count (REFLECTA_THREADS).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, GridMismatch, NonC1Coefficients, StabilityViolation
from .grid import (Grid, GridFunction, barrier_slices, build_operator_slices,
                   multilinear, project_function, project_measure)
from .solver import ReactionMeasure

FD_STEP = 1e-5
CHUNK_SIZE = 32768
BUNDLE_BUDGET = 200_000_000  # max stored floats in a materialized bundle
DEFAULT_DELTA = 2e-3


@dataclass
class PathBundle:
    """Materialized Euler-Maruyama paths started at (s, x).

    ``positions`` has shape (N, steps+1, dim); samples after the exit
    step stay frozen at the exit position.  ``exit_index[i]`` is the
    first sample index outside the open domain, or ``steps + 1`` when
    the path survives to T.
    """

    start_time: float
    start_point: tuple
    dt_mc: float
    step_sizes: np.ndarray
    positions: np.ndarray
    exit_index: np.ndarray
    seed: int

    @property
    def n_paths(self):
        return self.positions.shape[0]

    @property
    def n_steps(self):
        return self.positions.shape[1] - 1


@dataclass
class FunctionalAccumulator:
    """Per-path additive-functional values up to exit or T."""

    f_integral: np.ndarray
    a_mu: np.ndarray
    a_nu: np.ndarray
    payoff: np.ndarray

    @property
    def total(self):
        return self.f_integral + self.a_mu + self.a_nu + self.payoff


@dataclass
class McEstimate:
    mean: float
    standard_error: float
    n: int
    dt_mc: float


@dataclass
class FkPointResult:
    s: float
    x: tuple
    u_value: float
    estimate: McEstimate
    z: float
    passed: bool


def _require_c1(spec):
    if spec.coeffs.smoothness_flag != "C1":
        raise NonC1Coefficients(
            "path simulation needs C1 coefficients (the drift is half the "
            "divergence of a); merely measurable fields are PDE-only")


def _sigma_drift(spec, t, X):
    """sigma(t, X) and b(t, X) for positions X of shape (n, dim)."""
    coeffs = spec.coeffs
    dim = spec.domain.dim
    n = X.shape[0]
    if coeffs.constant_matrix is not None:
        a = np.asarray(coeffs.constant_matrix, dtype=float)
        if dim == 1:
            sig = np.full(n, np.sqrt(a[0][0]))
            return sig, np.zeros(n)
        s = np.sqrt(max(np.linalg.det(a), 0.0))
        tau = np.sqrt(a[0, 0] + a[1, 1] + 2.0 * s)
        sig = (a + s * np.eye(2)) / tau
        return np.broadcast_to(sig, (n, 2, 2)), np.zeros((n, 2))
    if dim == 1:
        x = X[:, 0]
        a = np.asarray(coeffs.components[0](t, x), dtype=float)
        sig = np.sqrt(a)
        ap = np.asarray(coeffs.components[0](t, x + FD_STEP), dtype=float)
        am = np.asarray(coeffs.components[0](t, x - FD_STEP), dtype=float)
        b = 0.5 * (ap - am) / (2.0 * FD_STEP)
        return sig, b
    x1, x2 = X[:, 0], X[:, 1]
    a11 = np.asarray(coeffs.components[0](t, x1, x2), dtype=float)
    a12 = np.asarray(coeffs.components[1](t, x1, x2), dtype=float)
    a22 = np.asarray(coeffs.components[2](t, x1, x2), dtype=float)
    det = np.maximum(a11 * a22 - a12**2, 0.0)
    s = np.sqrt(det)
    tau = np.sqrt(a11 + a22 + 2.0 * s)
    sig = np.empty((X.shape[0], 2, 2))
    sig[:, 0, 0] = (a11 + s) / tau
    sig[:, 0, 1] = a12 / tau
    sig[:, 1, 0] = a12 / tau
    sig[:, 1, 1] = (a22 + s) / tau

    def d1(comp, idx):
        up = np.asarray(coeffs.components[idx](t, x1 + FD_STEP, x2), dtype=float)
        dn = np.asarray(coeffs.components[idx](t, x1 - FD_STEP, x2), dtype=float)
        return (up - dn) / (2.0 * FD_STEP)

    def d2(comp, idx):
        up = np.asarray(coeffs.components[idx](t, x1, x2 + FD_STEP), dtype=float)
        dn = np.asarray(coeffs.components[idx](t, x1, x2 - FD_STEP), dtype=float)
        return (up - dn) / (2.0 * FD_STEP)

    b = np.empty((X.shape[0], 2))
    b[:, 0] = 0.5 * (d1(None, 0) + d2(None, 1))
    b[:, 1] = 0.5 * (d1(None, 1) + d2(None, 2))
    return sig, b


def drift(spec, t, x):
    """Drift vector b(t, x) at a single point (exposed for checks)."""
    _require_c1(spec)
    X = np.atleast_2d(np.asarray(x, dtype=float))
    if spec.domain.dim == 1 and X.shape != (1, 1):
        X = X.reshape(-1, 1)
    _, b = _sigma_drift(spec, t, X)
    return b[0] if spec.domain.dim > 1 else float(np.atleast_1d(b)[0])


def _step_schedule(T, s, dt_mc):
    span = T - s
    if span <= 0:
        raise ConfigError("start time must satisfy s < T")
    steps = max(1, int(np.ceil(span / dt_mc - 1e-12)))
    sizes = np.full(steps, dt_mc)
    sizes[-1] = span - (steps - 1) * dt_mc
    times = s + np.concatenate(([0.0], np.cumsum(sizes)))
    return sizes, times


def _chunk_seeds(seed, n_chunks):
    return np.random.SeedSequence(seed).spawn(n_chunks)


def _chunk_sizes(N):
    sizes = [CHUNK_SIZE] * (N // CHUNK_SIZE)
    if N % CHUNK_SIZE:
        sizes.append(N % CHUNK_SIZE)
    return sizes


class _StreamData:
    """Precomputed grid data shared by the streaming simulator.

    When ``dens_total`` is set (fused fast path) it holds the nodal field
    f(t_k, ., u_k) + g_k + (nu+ - nu-)_k, so each step needs a single
    interpolation; per-path component accumulators are then not split.
    """

    def __init__(self, spec, grid, u, nu, dens_mu, dens_total=None):
        self.spec = spec
        self.grid = grid
        self.u = u
        self.nu = nu
        self.dens_mu = dens_mu     # (nt+1,)+full or None
        self.dens_total = dens_total


def _simulate_chunk(data: _StreamData, s, x0, n_paths, sizes, times, slice_of_step,
                    atom_steps, rng, record=False):
    """Simulate one chunk; returns per-path accumulators and optionally
    the full positions."""
    spec, grid = data.spec, data.grid
    dim = spec.domain.dim
    lengths = spec.domain.lengths
    steps = len(sizes)
    X = np.tile(np.asarray(x0, dtype=float).reshape(1, dim), (n_paths, 1))
    alive = np.arange(n_paths)
    f_int = np.zeros(n_paths)
    a_mu = np.zeros(n_paths)
    a_nu = np.zeros(n_paths)
    payoff = np.zeros(n_paths)
    exit_index = np.full(n_paths, steps + 1, dtype=np.int64)
    positions = None
    if record:
        positions = np.empty((n_paths, steps + 1, dim))
        positions[:, 0, :] = X

    nu_signed = data.nu.signed_densities() if data.nu is not None else None

    # Tight path: 1D constant coefficients, fused density, no recording.
    # Works on compact alive-indexed arrays and scatters per-path totals
    # only when paths die.
    if (spec.coeffs.constant_matrix is not None and dim == 1 and not record
            and data.dens_total is not None):
        c_sig = float(np.sqrt(np.asarray(spec.coeffs.constant_matrix)[0, 0]))
        L0 = lengths[0]
        inv_h = 1.0 / grid.h[0]
        dens = data.dens_total
        x = X[:, 0].copy()
        acc = np.zeros(n_paths)
        for m in range(steps):
            if alive.size == 0:
                break
            dtm = sizes[m]
            k = slice_of_step[m]
            row = dens[k]
            pos = x * inv_h
            i0 = pos.astype(np.int64)  # x in (0, L) keeps i0, i0+1 in range
            base = row[i0]
            val = base + (pos - i0) * (row[i0 + 1] - base)
            for rho_full in atom_steps.get(m, ()):
                rowa = rho_full
                basea = rowa[i0]
                acc += basea + (pos - i0) * (rowa[i0 + 1] - basea)
            acc += val * dtm
            xn = x + (c_sig * np.sqrt(dtm)) * rng.standard_normal(x.shape[0])
            inside = (xn > 0.0) & (xn < L0)
            if not inside.all():
                dying = ~inside
                a_mu[alive[dying]] = acc[dying]
                exit_index[alive[dying]] = m + 1
                x = xn[inside]
                acc = acc[inside]
                alive = alive[inside]
            else:
                x = xn
        if alive.size:
            for rho_full in atom_steps.get(steps, ()):
                basea = rho_full[(x * inv_h).astype(np.int64)]
                acc += basea + ((x * inv_h) - (x * inv_h).astype(np.int64)) * (
                    rho_full[(x * inv_h).astype(np.int64) + 1] - basea)
            a_mu[alive] = acc
            payoff[alive] = np.asarray(data.spec.terminal(x), dtype=float)
        return f_int, a_mu, a_nu, payoff, exit_index, None

    const_sig = None
    if spec.coeffs.constant_matrix is not None and dim == 1:
        const_sig = float(np.sqrt(np.asarray(spec.coeffs.constant_matrix)[0, 0]))
        L0 = lengths[0]
        x1d = X[:, 0].copy()

    for m in range(steps):
        if alive.size == 0:
            if record:
                positions[:, m + 1:, :] = positions[:, m:m + 1, :]
            break
        t_m = times[m]
        dtm = sizes[m]
        k = slice_of_step[m]
        pts = x1d if const_sig is not None else X
        # atom triggers at this sample (alive here means inside D now)
        for rho_full in atom_steps.get(m, ()):
            a_mu[alive] += multilinear(grid, rho_full, pts)
        # left-endpoint quadrature of the driver and the densities
        if data.dens_total is not None:
            a_mu[alive] += multilinear(grid, data.dens_total[k], pts) * dtm
        else:
            if data.u is not None:
                u_here = multilinear(grid, data.u.values[k], pts)
                coords = (pts,) if const_sig is not None else tuple(
                    X[:, d] for d in range(dim))
                fv = np.asarray(spec.driver.f(t_m, *coords, u_here), dtype=float)
                f_int[alive] += fv * dtm
            if data.dens_mu is not None:
                a_mu[alive] += multilinear(grid, data.dens_mu[k], pts) * dtm
            if nu_signed is not None:
                a_nu[alive] += multilinear(grid, nu_signed[k], pts) * dtm
        if const_sig is not None:
            # driftless constant-sigma fast path, flat 1D arrays
            xn = x1d + (const_sig * np.sqrt(dtm)) * rng.standard_normal(x1d.shape[0])
            inside = (xn > 0.0) & (xn < L0)
            if record:
                positions[alive, m + 1, 0] = xn
                dead_rows = alive[~inside]
                if m + 2 <= steps:
                    positions[dead_rows, m + 2:, 0] = xn[~inside][:, None]
            exit_index[alive[~inside]] = m + 1
            x1d = xn[inside]
            alive = alive[inside]
            continue
        sig, b = _sigma_drift(spec, t_m, X)
        xi = rng.standard_normal((X.shape[0], dim))
        if dim == 1:
            Xn = X + b[:, None] * dtm + (sig * np.sqrt(dtm))[:, None] * xi
        else:
            Xn = X + b * dtm + np.sqrt(dtm) * np.einsum("nij,nj->ni", sig, xi)
        inside = np.ones(Xn.shape[0], dtype=bool)
        for d in range(dim):
            inside &= (Xn[:, d] > 0.0) & (Xn[:, d] < lengths[d])
        if record:
            positions[alive, m + 1, :] = Xn
            dead_rows = alive[~inside]
            if m + 2 <= steps:
                positions[dead_rows, m + 2:, :] = Xn[~inside][:, None, :]
        exit_index[alive[~inside]] = m + 1
        X = Xn[inside]
        alive = alive[inside]

    if alive.size:
        if const_sig is not None:
            X = x1d[:, None]
        # terminal atoms (t_k = T) then the payoff, for surviving paths
        for rho_full in atom_steps.get(steps, ()):
            a_mu[alive] += multilinear(grid, rho_full, X)
        phi_vals = np.asarray(
            data.spec.terminal(*(X[:, d] for d in range(dim))), dtype=float)
        payoff[alive] = phi_vals
    return f_int, a_mu, a_nu, payoff, exit_index, positions


def _prepare_stream(spec, grid, s, dt_mc, u, nu, fused=True):
    sizes, times = _step_schedule(spec.domain.horizon, s, dt_mc)
    steps = len(sizes)
    slice_of_step = np.array([grid.time_index(t) for t in times[:-1]], dtype=np.int64)
    dens_mu = None
    atom_steps = {}
    if not spec.measure.is_zero:
        dm = project_measure(spec.measure, grid)
        if spec.measure.density is not None:
            dens_mu = dm.densities
        # iterate the snapped atoms (colliding input atoms merge per slice)
        for k_atom, arr in dm.atoms.items():
            tk = grid.times[k_atom]
            if tk <= s:
                continue
            m_k = min(int(np.ceil((tk - s) / dt_mc - 1e-12)), steps)
            atom_steps.setdefault(m_k, []).append(arr)
    if nu is not None:
        # reaction atoms (terminal incompatibility) enter A^nu signed
        for k_atom, (rp, rn) in nu.atoms.items():
            tk = grid.times[k_atom]
            if tk <= s:
                continue
            m_k = min(int(np.ceil((tk - s) / dt_mc - 1e-12)), steps)
            atom_steps.setdefault(m_k, []).append(rp - rn)

    dens_total = None
    if fused and (u is not None or dens_mu is not None or nu is not None):
        # nodal field f(t_k, ., u_k) + g_k + signed reaction density
        dens_total = np.zeros((grid.nt + 1,) + grid.shape_full)
        if u is not None:
            meshes = grid.full_meshes()
            for k in range(grid.nt + 1):
                dens_total[k] += np.asarray(
                    spec.driver.f(grid.times[k], *meshes, u.values[k]), dtype=float)
        if dens_mu is not None:
            dens_total += dens_mu
        if nu is not None:
            dens_total += nu.signed_densities()
    data = _StreamData(spec, grid, u, nu, dens_mu, dens_total)
    return data, sizes, times, slice_of_step, atom_steps


def _worker_count():
    """Path-chunk workers (default sequential; REFLECTA_THREADS opts in).
    The merged estimate does not depend on the worker count."""
    raw = os.environ.get("REFLECTA_THREADS")
    if raw is None:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _run_chunks(data, s, x0, N, sizes, times, slice_of_step, atom_steps, seed,
                record=False):
    chunks = _chunk_sizes(N)
    seeds = _chunk_seeds(seed, len(chunks))
    results = [None] * len(chunks)

    def run(ci):
        rng = np.random.default_rng(seeds[ci])
        return _simulate_chunk(data, s, x0, chunks[ci], sizes, times,
                               slice_of_step, atom_steps, rng, record)

    workers = _worker_count()
    if workers == 1 or len(chunks) == 1:
        for ci in range(len(chunks)):
            results[ci] = run(ci)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for ci, res in enumerate(pool.map(run, range(len(chunks)))):
                results[ci] = res
    f_int = np.concatenate([r[0] for r in results])
    a_mu = np.concatenate([r[1] for r in results])
    a_nu = np.concatenate([r[2] for r in results])
    payoff = np.concatenate([r[3] for r in results])
    exit_index = np.concatenate([r[4] for r in results])
    positions = np.concatenate([r[5] for r in results]) if record else None
    return FunctionalAccumulator(f_int, a_mu, a_nu, payoff), exit_index, positions


def simulate_paths(spec, s, x, N, dt_mc, seed) -> PathBundle:
    """Materialize an Euler-Maruyama bundle (small N * steps only).

    The bundle stores every sample, so its memory is N*(steps+1)*dim
    floats; the streaming verifier (feynman_kac_check) should be used
    beyond that budget.
    """
    _require_c1(spec)
    sizes, times = _step_schedule(spec.domain.horizon, s, dt_mc)
    if N * (len(sizes) + 1) * spec.domain.dim > BUNDLE_BUDGET:
        raise ConfigError("bundle too large to materialize; use feynman_kac_check")
    grid = Grid(spec.domain, nx=3, nt=1)  # placeholder grid; no PDE data needed
    data = _StreamData(spec, grid, None, None, None)
    slice_of_step = np.zeros(len(sizes), dtype=np.int64)
    x0 = np.atleast_1d(np.asarray(x, dtype=float))
    _, exit_index, positions = _run_chunks(data, s, x0, N, sizes, times,
                                           slice_of_step, {}, seed, record=True)
    return PathBundle(start_time=s, start_point=tuple(x0), dt_mc=dt_mc,
                      step_sizes=sizes, positions=positions,
                      exit_index=exit_index, seed=seed)


def accumulate(bundle: PathBundle, u: Optional[GridFunction], nu: Optional[ReactionMeasure],
               spec, grid: Optional[Grid] = None) -> FunctionalAccumulator:
    """Replay the additive-functional quadrature over stored paths."""
    if u is not None:
        grid = u.grid
    if grid is None:
        raise GridMismatch("need a grid (or a GridFunction) for the densities")
    if u is not None and nu is not None and not u.grid.compatible_with(nu.grid):
        raise GridMismatch("u and nu live on different grids")
    if abs(grid.domain.horizon - spec.domain.horizon) > 0:
        raise GridMismatch("grid horizon does not match the problem")
    dim = spec.domain.dim
    sizes = bundle.step_sizes
    times = bundle.start_time + np.concatenate(([0.0], np.cumsum(sizes)))
    steps = len(sizes)
    N = bundle.n_paths
    f_int = np.zeros(N)
    a_mu = np.zeros(N)
    a_nu = np.zeros(N)
    payoff = np.zeros(N)

    from .grid import project_measure

    dens_mu = None
    atom_steps = {}
    nu_atom_steps = {}
    if not spec.measure.is_zero:
        dm = project_measure(spec.measure, grid)
        if spec.measure.density is not None:
            dens_mu = dm.densities
        for k_atom, arr in dm.atoms.items():
            tk = grid.times[k_atom]
            if tk <= bundle.start_time:
                continue
            m_k = min(int(np.ceil((tk - bundle.start_time) / bundle.dt_mc - 1e-12)), steps)
            atom_steps.setdefault(m_k, []).append(arr)
    nu_signed = nu.signed_densities() if nu is not None else None
    if nu is not None:
        for k_atom, (rp, rn) in nu.atoms.items():
            tk = grid.times[k_atom]
            if tk <= bundle.start_time:
                continue
            m_k = min(int(np.ceil((tk - bundle.start_time) / bundle.dt_mc - 1e-12)), steps)
            nu_atom_steps.setdefault(m_k, []).append(rp - rn)

    for m in range(steps):
        alive = bundle.exit_index > m
        if not np.any(alive):
            break
        X = bundle.positions[alive, m, :]
        t_m = times[m]
        k = grid.time_index(t_m)
        for arr in atom_steps.get(m, ()):
            a_mu[alive] += multilinear(grid, arr, X)
        for arr in nu_atom_steps.get(m, ()):
            a_nu[alive] += multilinear(grid, arr, X)
        if u is not None:
            u_here = multilinear(grid, u.values[k], X)
            fv = np.asarray(spec.driver.f(t_m, *(X[:, d] for d in range(dim)), u_here),
                            dtype=float)
            f_int[alive] += fv * sizes[m]
        if dens_mu is not None:
            a_mu[alive] += multilinear(grid, dens_mu[k], X) * sizes[m]
        if nu_signed is not None:
            a_nu[alive] += multilinear(grid, nu_signed[k], X) * sizes[m]
    survived = bundle.exit_index > steps
    if np.any(survived):
        X = bundle.positions[survived, steps, :]
        for arr in atom_steps.get(steps, ()):
            a_mu[survived] += multilinear(grid, arr, X)
        for arr in nu_atom_steps.get(steps, ()):
            a_nu[survived] += multilinear(grid, arr, X)
        payoff[survived] = np.asarray(
            spec.terminal(*(X[:, d] for d in range(dim))), dtype=float)
    return FunctionalAccumulator(f_int, a_mu, a_nu, payoff)


def feynman_kac_check(spec, grid: Grid, points: Sequence, N: int, dt_mc: float,
                      seed: int, u: Optional[GridFunction] = None,
                      nu: Optional[ReactionMeasure] = None,
                      delta: float = DEFAULT_DELTA, fused: bool = True,
                      collect_paths: bool = False):
    """Monte Carlo check of the stochastic representation at given points.

    z = |u(s,x) - mean| / (SE + delta); a point passes when z <= 3.
    delta is the discretization allowance covering the O(sqrt(dt)) exit
    bias and the PDE grid error.  Paths stream through fixed-size chunks
    and are never stored.  ``fused=True`` interpolates the combined nodal
    field f(t,.,u) + g + nu once per step; ``fused=False`` keeps the
    per-component accumulators (needed by the raw per-path dump) at the
    cost of one interpolation per component.
    """
    _require_c1(spec)
    if u is None:
        if spec.barriers.any_present:
            from .lcp import solve_vi

            sol = solve_vi(spec, grid)
            u, nu = sol.u, sol.nu
        else:
            from .solver import solve_cauchy_dirichlet

            u = solve_cauchy_dirichlet(spec, grid)
    if not u.grid.compatible_with(grid):
        raise GridMismatch("supplied solution lives on a different grid")
    results = []
    per_point_acc = []
    for pt_index, point in enumerate(points):
        s = float(point[0])
        x0 = np.asarray(point[1:], dtype=float)
        data, sizes, times, slice_of_step, atom_steps = _prepare_stream(
            spec, grid, s, dt_mc, u, nu, fused=fused and not collect_paths)
        acc, exit_index, _ = _run_chunks(data, s, x0, N, sizes, times, slice_of_step,
                                         atom_steps, seed + pt_index)
        totals = acc.total
        mean = float(np.mean(totals))
        se = float(np.std(totals, ddof=1) / np.sqrt(N))
        u_val = u.value_at(s, x0)
        z = abs(u_val - mean) / (se + delta)
        results.append(FkPointResult(s=s, x=tuple(x0), u_value=u_val,
                                     estimate=McEstimate(mean, se, N, dt_mc),
                                     z=z, passed=bool(z <= 3.0)))
        if collect_paths:
            exit_times = np.where(exit_index > len(sizes),
                                  spec.domain.horizon,
                                  s + np.minimum(exit_index, len(sizes)) * dt_mc)
            per_point_acc.append((acc, exit_times))
    if collect_paths:
        return results, per_point_acc
    return results


def dynkin_value(spec, grid: Grid, max_substeps: int = 5_000_000) -> GridFunction:
    """Explicit backward dynamic program clamped between the barriers.

    V_k = clamp(V_{k+1} + dt (A V_{k+1} + f(t_k,.,V_{k+1}) + g_k) + atoms)
    with clamp = max(h1, min(h2, .)); explicit stability
    dt <= h^2/(2 lam dim) is enforced by internal sub-stepping (clamping
    after every substep), and each slice's barriers are sampled at the
    slice time.  Barriers are respected exactly by construction.
    """
    ops = build_operator_slices(spec.coeffs, grid)
    dmeas = project_measure(spec.measure, grid)
    lo = barrier_slices(spec.barriers.h1, grid)
    hi = barrier_slices(spec.barriers.h2, grid)
    coords = tuple(m.ravel() for m in grid.interior_meshes())
    h2min = min(h * h for h in grid.h)
    dt_stable = h2min / (2.0 * spec.coeffs.lam * grid.dim)
    n_sub = max(1, int(np.ceil(grid.dt / dt_stable - 1e-12)))
    if n_sub * grid.nt > max_substeps:
        raise StabilityViolation(
            f"stability needs {n_sub} substeps per slice "
            f"({n_sub * grid.nt} total > budget {max_substeps})")
    dt_sub = grid.dt / n_sub

    def clamp(v, k):
        if lo is not None:
            v = np.maximum(v, lo[k])
        if hi is not None:
            v = np.minimum(v, hi[k])
        return v

    V = GridFunction.zeros(grid)
    phi = grid.extract(project_function(spec.terminal, grid, None, boundary_zero=True))
    atom_T = dmeas.atoms.get(grid.nt)
    w = clamp(phi.copy(), grid.nt)
    V.values[grid.nt] = grid.embed(clamp(phi, grid.nt))
    if atom_T is not None:
        w = clamp(w + grid.extract(atom_T), grid.nt)

    for k in range(grid.nt - 1, -1, -1):
        A = ops[k].matrix
        t_k = grid.times[k]
        g_k = grid.extract(dmeas.densities[k])
        for _ in range(n_sub):
            fv = np.asarray(spec.driver.f(t_k, *coords, w), dtype=float)
            w = clamp(w + dt_sub * (A @ w + fv + g_k), k)
        atom = dmeas.atoms.get(k)
        if atom is not None:
            w = clamp(w + grid.extract(atom), k)
        V.values[k] = grid.embed(w)
    return V
