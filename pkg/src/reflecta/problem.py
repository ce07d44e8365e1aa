"""Problem data for the two-barrier parabolic obstacle problem.

An instance consists of a box space-time domain, a symmetric uniformly
elliptic coefficient field ``a`` driving the half-divergence-form operator
``A_t = 1/2 sum_ij d_j(a_ij d_i)``, a driver ``f(t, x, y)`` monotone in
``y``, terminal data ``phi``, measure data (an integrable density plus
finitely many time atoms with spatial densities), and up to two barriers
``h1 <= h2``.  Absent barriers are encoded by ``None``, never by large
floats.

All spatial-field callables take coordinate arrays as separate positional
arguments after ``t`` and must broadcast: ``g(t, x)`` in dimension 1,
``g(t, x1, x2)`` in dimension 2; ``phi(x)`` / ``phi(x1, x2)``; the driver
is ``f(t, x, y)`` / ``f(t, x1, x2, y)``.

Every type here is an immutable dataclass; instances are safe to share
across concurrent solver runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import HardViolation

MONOTONICITY_SAMPLES = 10_000


@dataclass(frozen=True)
class SpaceTimeDomain:
    """Box domain (0, L_1) x ... x (0, L_dim) with time horizon T."""

    dim: int
    lengths: tuple[float, ...]
    horizon: float

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if len(self.lengths) != self.dim:
            raise ValueError("one length per axis required")
        if any(L <= 0 for L in self.lengths):
            raise ValueError("axis lengths must be positive")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")


@dataclass(frozen=True)
class CoefficientField:
    """Symmetric matrix field a(t, x) with eigenvalues in [1/lam, lam].

    ``components`` holds scalar-field callables: ``(a,)`` in dimension 1
    and ``(a11, a12, a22)`` in dimension 2.  ``smoothness_flag`` must be
    ``"C1"`` for the path-simulation module (which differentiates ``a``
    to get the drift); ``"measurable"`` restricts the instance to the
    PDE-side modules.  ``constant_matrix`` is an optional fast-path hint
    (the field does not depend on ``(t, x)``).
    """

    dim: int
    components: tuple[Callable, ...]
    lam: float
    smoothness_flag: str = "measurable"
    time_independent: bool = False
    constant_matrix: Optional[tuple[tuple[float, ...], ...]] = None

    def __post_init__(self):
        if self.lam < 1.0:
            raise ValueError("ellipticity constant must satisfy lam >= 1")
        if self.smoothness_flag not in ("measurable", "C1"):
            raise ValueError("smoothness_flag must be 'measurable' or 'C1'")
        expected = 1 if self.dim == 1 else 3
        if len(self.components) != expected:
            raise ValueError(f"need {expected} coefficient components for dim={self.dim}")

    @staticmethod
    def isotropic(fn, lam, dim=1, smoothness_flag="measurable", time_independent=False):
        if dim == 1:
            return CoefficientField(1, (fn,), lam, smoothness_flag, time_independent)
        zero = lambda t, x1, x2: np.zeros(np.broadcast(x1, x2).shape)
        return CoefficientField(2, (fn, zero, fn), lam, smoothness_flag, time_independent)

    @staticmethod
    def constant(value, dim=1):
        """Constant field; ``value`` is a scalar (dim 1) or a 2x2 matrix."""
        if dim == 1:
            c = float(value)
            if c <= 0:
                raise ValueError("constant coefficient must be positive")
            lam = max(c, 1.0 / c, 1.0)
            fn = lambda t, x: np.full(np.shape(x), c)
            return CoefficientField(1, (fn,), lam, "C1", True, ((c,),))
        m = np.asarray(value, dtype=float)
        if m.shape != (2, 2) or abs(m[0, 1] - m[1, 0]) > 0:
            raise ValueError("constant matrix must be symmetric 2x2")
        eigs = np.linalg.eigvalsh(m)
        if eigs[0] <= 0:
            raise ValueError("constant matrix must be positive definite")
        lam = max(eigs[1], 1.0 / eigs[0], 1.0)
        comp = tuple(
            (lambda v: (lambda t, x1, x2: np.full(np.broadcast(x1, x2).shape, v)))(v)
            for v in (m[0, 0], m[0, 1], m[1, 1])
        )
        return CoefficientField(2, comp, lam, "C1", True, tuple(map(tuple, m)))

    def eval_matrix(self, t, coords):
        """Evaluate the matrix field at coordinate arrays; returns shape
        ``coords[0].shape + (dim, dim)``."""
        base = np.broadcast(*coords) if len(coords) > 1 else np.asarray(coords[0])
        out = np.empty(base.shape + (self.dim, self.dim))
        if self.dim == 1:
            out[..., 0, 0] = self.components[0](t, *coords)
        else:
            a11 = self.components[0](t, *coords)
            a12 = self.components[1](t, *coords)
            a22 = self.components[2](t, *coords)
            out[..., 0, 0] = a11
            out[..., 0, 1] = a12
            out[..., 1, 0] = a12
            out[..., 1, 1] = a22
        return out

    def component_grid(self, t, coords, which):
        """Scalar component field on coordinate arrays; ``which`` is an
        index into ``components``."""
        return np.broadcast_to(
            np.asarray(self.components[which](t, *coords), dtype=float),
            np.broadcast(*coords).shape if len(coords) > 1 else np.shape(coords[0]),
        ).copy()


@dataclass(frozen=True)
class Driver:
    """Semilinear source term f(t, x, y), monotone in y.

    ``kappa`` is the claimed monotonicity constant:
    ``(f(t,x,y) - f(t,x,y'))(y - y') <= kappa * |y - y'|^2``.
    ``f_y`` optionally supplies the exact partial derivative in ``y``
    (used by the Newton solvers; finite differences otherwise).
    ``f_zero_norm`` may cache ``||f(.,.,0)||_L1`` for a grid; validate()
    reports the computed value.
    """

    f: Callable
    kappa: float = 0.0
    f_y: Optional[Callable] = None
    f_zero_norm: Optional[float] = None

    @staticmethod
    def zero():
        return Driver(f=lambda t, *rest: np.zeros(np.shape(rest[-1])), kappa=0.0,
                      f_y=lambda t, *rest: np.zeros(np.shape(rest[-1])))

    @staticmethod
    def linear(c):
        """f(t, x, y) = c * y (monotone with kappa = max(c, 0))."""
        c = float(c)
        return Driver(f=lambda t, *rest: c * np.asarray(rest[-1]), kappa=max(c, 0.0),
                      f_y=lambda t, *rest: np.full(np.shape(rest[-1]), c))


@dataclass(frozen=True)
class MeasureData:
    """Soft measure data: integrable density g plus time atoms (t_k, rho_k).

    Atom times must lie in (0, T] and be pairwise distinct; each rho_k is
    an integrable spatial density.  This density-plus-time-atom class
    never charges sets of zero parabolic capacity, so no capacity
    computations are needed.
    """

    density: Optional[Callable] = None
    atoms: tuple = ()

    def scaled(self, c):
        """The measure c * mu (used by homogeneity checks)."""
        c = float(c)
        dens = None
        if self.density is not None:
            base = self.density
            dens = lambda t, *xs: c * np.asarray(base(t, *xs))
        atoms = tuple(
            (tk, (lambda r: (lambda *xs: c * np.asarray(r(*xs))))(rho)) for tk, rho in self.atoms
        )
        return MeasureData(dens, atoms)

    @property
    def is_zero(self):
        return self.density is None and not self.atoms


@dataclass(frozen=True)
class BarrierPair:
    """Lower/upper barriers; ``None`` encodes an absent barrier."""

    h1: Optional[Callable] = None
    h2: Optional[Callable] = None
    continuity_flag: str = "quasi_continuous_proxy"

    def __post_init__(self):
        if self.continuity_flag not in ("quasi_continuous_proxy", "merely_measurable"):
            raise ValueError("unknown continuity flag")

    @property
    def any_present(self):
        return self.h1 is not None or self.h2 is not None


@dataclass(frozen=True)
class SeparationWitness:
    """(H6')-style witness: h1 <= v <= h2 with v solving the linear
    problem with data (lambda-density, phi_hat), phi_hat >= phi."""

    v: Callable
    lambda_density: Optional[Callable] = None
    phi_hat: Optional[Callable] = None


@dataclass(frozen=True)
class ProblemSpec:
    """A complete instance of the obstacle problem."""

    domain: SpaceTimeDomain
    coeffs: CoefficientField
    driver: Driver
    terminal: Callable
    measure: MeasureData = field(default_factory=MeasureData)
    barriers: BarrierPair = field(default_factory=BarrierPair)
    separation_witness: Optional[SeparationWitness] = None
    name: str = ""

    def without_barriers(self):
        return ProblemSpec(self.domain, self.coeffs, self.driver, self.terminal,
                           self.measure, BarrierPair(), self.separation_witness,
                           self.name + "+unconstrained")

    def with_barriers(self, h1, h2, continuity_flag="quasi_continuous_proxy"):
        return ProblemSpec(self.domain, self.coeffs, self.driver, self.terminal,
                           self.measure, BarrierPair(h1, h2, continuity_flag),
                           self.separation_witness, self.name)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    hard: bool
    worst: float
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[CheckResult, ...]
    f_zero_norm: float
    tv_norm: float

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    @property
    def hard_passed(self):
        return all(c.passed for c in self.checks if c.hard)

    def check(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def as_dict(self):
        return {
            "passed": self.passed,
            "f_zero_norm": self.f_zero_norm,
            "tv_norm": self.tv_norm,
            "checks": [
                {"name": c.name, "passed": c.passed, "hard": c.hard,
                 "worst": c.worst, "detail": c.detail}
                for c in self.checks
            ],
        }


def _eig_bounds_2x2(a11, a12, a22):
    tr = a11 + a22
    disc = np.sqrt(np.maximum((a11 - a22) ** 2 + 4.0 * a12**2, 0.0))
    return 0.5 * (tr - disc), 0.5 * (tr + disc)


def _sample_barrier(fn, grid, k):
    from .grid import project_function

    return project_function(fn, grid, grid.times[k], allow_infinite=True)


def validate(spec: ProblemSpec, grid=None) -> ValidationReport:
    """Check the numerically decidable structural hypotheses.

    Ellipticity and barrier ordering are hard gates (HardViolation on
    failure, the exception carries the report); driver monotonicity and
    continuity are sampled diagnostics.  The check is deterministic: the
    randomized samples use a fixed internal seed.
    """
    from .grid import Grid, project_function, tv_norm

    if grid is None:
        grid = Grid(spec.domain, nx=48, nt=32)
    checks = []
    dom = spec.domain
    coords = grid.interior_meshes()

    # Ellipticity at every space-time node, symmetry exact by construction.
    lam = spec.coeffs.lam
    lo_margin = np.inf
    hi_margin = np.inf
    for k in range(grid.nt + 1):
        t = grid.times[k]
        if dom.dim == 1:
            a = spec.coeffs.component_grid(t, coords, 0)
            lo, hi = a, a
        else:
            a11 = spec.coeffs.component_grid(t, coords, 0)
            a12 = spec.coeffs.component_grid(t, coords, 1)
            a22 = spec.coeffs.component_grid(t, coords, 2)
            lo, hi = _eig_bounds_2x2(a11, a12, a22)
        lo_margin = min(lo_margin, float(np.min(lo - 1.0 / lam)))
        hi_margin = min(hi_margin, float(np.min(lam - hi)))
    ell_margin = min(lo_margin, hi_margin)
    ell_ok = ell_margin >= -1e-12 * lam
    checks.append(CheckResult("ellipticity", ell_ok, True, ell_margin,
                              "min margin of eigenvalues to [1/lam, lam]"))

    # Barrier ordering h1 <= h2 at every node (+-inf parts allowed;
    # inf - inf of the same sign counts as ordered).
    order_worst = 0.0
    order_ok = True
    if spec.barriers.h1 is not None and spec.barriers.h2 is not None:
        for k in range(grid.nt + 1):
            g1 = _sample_barrier(spec.barriers.h1, grid, k)
            g2 = _sample_barrier(spec.barriers.h2, grid, k)
            diff = g1 - g2
            diff[np.isnan(diff)] = -np.inf
            order_worst = max(order_worst, float(np.max(diff)))
        order_ok = order_worst <= 0.0
    checks.append(CheckResult("barrier_order", order_ok, True, order_worst,
                              "max of h1 - h2 over all nodes"))

    # Driver monotonicity on randomized samples (fixed seed: pure report).
    rng = np.random.default_rng(0)
    m = MONOTONICITY_SAMPLES
    ts = rng.uniform(0.0, dom.horizon, m)
    xs = [rng.uniform(0.0, L, m) for L in dom.lengths]
    phi_scale = 1.0 + float(np.max(np.abs(project_function(spec.terminal, grid, None))))
    ys = rng.normal(0.0, phi_scale, m)
    yps = rng.normal(0.0, phi_scale, m)
    fv = np.asarray(spec.driver.f(ts, *xs, ys), dtype=float)
    fvp = np.asarray(spec.driver.f(ts, *xs, yps), dtype=float)
    dy = ys - yps
    excess = (fv - fvp) * dy - spec.driver.kappa * dy**2
    mono_worst = float(np.max(excess)) if m else 0.0
    mono_ok = mono_worst <= 1e-9 * phi_scale**2
    checks.append(CheckResult("driver_monotonicity", mono_ok, False, mono_worst,
                              f"max of (f(y)-f(y'))(y-y') - kappa|y-y'|^2 over {m} samples"))

    # Continuity of f in y by finite sampling.
    eps = 1e-6 * phi_scale
    jump = np.asarray(spec.driver.f(ts, *xs, ys + eps), dtype=float) - fv
    cont_worst = float(np.max(np.abs(jump)))
    cont_ok = cont_worst <= 1e-3 * phi_scale
    checks.append(CheckResult("driver_continuity", cont_ok, False, cont_worst,
                              "max |f(y + 1e-6 s) - f(y)| over samples"))

    # Atom times inside (0, T], pairwise distinct.
    times = [tk for tk, _ in spec.measure.atoms]
    atoms_ok = all(0.0 < tk <= dom.horizon for tk in times) and len(set(times)) == len(times)
    checks.append(CheckResult("atom_times", atoms_ok, False,
                              0.0 if atoms_ok else 1.0, "atom times in (0, T], distinct"))

    total_variation = tv_norm(spec.measure, grid)
    checks.append(CheckResult("measure_tv_finite", bool(np.isfinite(total_variation)), False,
                              total_variation, "computed TV norm"))

    # ||f(.,.,0)||_L1 on the grid.
    fz = 0.0
    for k in range(grid.nt):
        t = grid.times[k]
        vals = np.asarray(spec.driver.f(t, *coords, np.zeros(grid.shape_interior)), dtype=float)
        fz += float(np.sum(np.abs(vals))) * grid.cellvol * grid.dt
    checks.append(CheckResult("f_zero_norm", True, False, fz, "||f(.,.,0)||_L1 on the grid"))

    # Terminal compatibility with the barriers (needed by the minimality
    # test suite, diagnostic otherwise).
    phi_arr = project_function(spec.terminal, grid, None)
    compat_worst = 0.0
    if spec.barriers.h1 is not None:
        h1T = _sample_barrier(spec.barriers.h1, grid, grid.nt)
        compat_worst = max(compat_worst, float(np.max(h1T - phi_arr)))
    if spec.barriers.h2 is not None:
        h2T = _sample_barrier(spec.barriers.h2, grid, grid.nt)
        compat_worst = max(compat_worst, float(np.max(phi_arr - h2T)))
    checks.append(CheckResult("terminal_between_barriers", compat_worst <= 0.0, False,
                              compat_worst, "max violation of h1(T) <= phi <= h2(T)"))

    # Separation witness sandwich, when supplied.
    if spec.separation_witness is not None:
        w = spec.separation_witness
        worst = 0.0
        for k in range(grid.nt + 1):
            t = grid.times[k]
            v = project_function(w.v, grid, t)
            if spec.barriers.h1 is not None:
                worst = max(worst, float(np.max(_sample_barrier(spec.barriers.h1, grid, k) - v)))
            if spec.barriers.h2 is not None:
                worst = max(worst, float(np.max(v - _sample_barrier(spec.barriers.h2, grid, k))))
        if w.phi_hat is not None:
            worst = max(worst, float(np.max(phi_arr - project_function(w.phi_hat, grid, None))))
        checks.append(CheckResult("separation_witness", worst <= 0.0, False, worst,
                                  "max violation of h1 <= v <= h2 and phi_hat >= phi"))

    report = ValidationReport(tuple(checks), fz, total_variation)
    if not report.hard_passed:
        exc = HardViolation("ellipticity or barrier ordering failed; see report")
        exc.report = report
        raise exc
    return report
