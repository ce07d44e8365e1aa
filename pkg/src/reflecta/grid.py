"""Uniform tensor grids, the half-divergence-form operator, projections.

The spatial operator discretizes ``A_t = 1/2 sum_ij d_j(a_ij d_i)`` with
the factor 1/2 retained, so analytic cross-checks (heat-kernel decay
``exp(-pi^2 (T-t)/2)``, the exit-time identity ``u''/2 = -1``) stay
literal.  Face coefficients are harmonic means of nodal values, which
preserves flux continuity and ellipticity for merely measurable
coefficients.  Grids are uniform per axis; boundary nodes carry the
homogeneous Dirichlet value.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .errors import GridMismatch, InvalidSample, NonEllipticAtNode

# 3-point Gauss-Legendre rule on [-1/2, 1/2], used for cell averages.
_GAUSS_OFFSETS = np.array([-0.5 * np.sqrt(3.0 / 5.0), 0.0, 0.5 * np.sqrt(3.0 / 5.0)])
_GAUSS_WEIGHTS = np.array([5.0, 8.0, 5.0]) / 18.0


class Grid:
    """Uniform space-time tensor grid over a box domain.

    ``nx`` counts interior nodes per axis (>= 3); the two boundary nodes
    per axis are stored as well and carry the Dirichlet value 0 for
    solution-space functions.  ``nt`` is the number of backward Euler
    steps, ``dt = T / nt``.
    """

    def __init__(self, domain, nx, nt):
        if isinstance(nx, int):
            nx = (nx,) * domain.dim
        nx = tuple(int(n) for n in nx)
        if len(nx) != domain.dim:
            raise ValueError("one interior node count per axis")
        if any(n < 3 for n in nx):
            raise ValueError("need nx >= 3 interior nodes per axis")
        if nt < 1:
            raise ValueError("need nt >= 1 time steps")
        self.domain = domain
        self.nx = nx
        self.nt = int(nt)
        self.h = tuple(L / (n + 1) for L, n in zip(domain.lengths, nx))
        self.dt = domain.horizon / self.nt
        self.axes = tuple(np.linspace(0.0, L, n + 2) for L, n in zip(domain.lengths, nx))
        self.times = np.linspace(0.0, domain.horizon, self.nt + 1)
        self.shape_full = tuple(n + 2 for n in nx)
        self.shape_interior = nx
        self.n_interior = int(np.prod(nx))
        self.cellvol = float(np.prod(self.h))

    @property
    def dim(self):
        return self.domain.dim

    def interior_meshes(self):
        ax = [a[1:-1] for a in self.axes]
        if self.dim == 1:
            return (ax[0],)
        return tuple(np.meshgrid(*ax, indexing="ij"))

    def full_meshes(self):
        if self.dim == 1:
            return (self.axes[0],)
        return tuple(np.meshgrid(*self.axes, indexing="ij"))

    def extract(self, full):
        """Interior values of a full-shape array, flattened C-order."""
        if self.dim == 1:
            return np.asarray(full)[1:-1].ravel()
        return np.asarray(full)[1:-1, 1:-1].ravel()

    def embed(self, flat):
        """Embed flat interior values into a full-shape array with zero
        boundary."""
        out = np.zeros(self.shape_full)
        if self.dim == 1:
            out[1:-1] = np.asarray(flat).reshape(self.shape_interior)
        else:
            out[1:-1, 1:-1] = np.asarray(flat).reshape(self.shape_interior)
        return out

    def time_index(self, t):
        """Grid slice nearest to ``t``; exact ties round to the earlier
        slice (measures live on (0, T], limits are taken from the left)."""
        pos = t / self.dt
        k = int(np.floor(pos))
        if k >= self.nt:
            return self.nt
        d_lo = pos - k
        d_hi = (k + 1) - pos
        return k if d_lo <= d_hi else k + 1

    def compatible_with(self, other):
        return (self.nx == other.nx and self.nt == other.nt
                and self.domain.lengths == other.domain.lengths
                and self.domain.horizon == other.domain.horizon)

    def __repr__(self):
        return f"Grid(nx={self.nx}, nt={self.nt}, h={self.h}, dt={self.dt:g})"


class GridFunction:
    """Nodal values of a function on every time slice of a grid.

    ``values`` has shape ``(nt + 1,) + shape_full``; solution-space
    functions keep their boundary entries at 0.
    """

    def __init__(self, grid: Grid, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        if values.shape != (grid.nt + 1,) + grid.shape_full:
            raise GridMismatch(f"values shape {values.shape} does not match grid")
        self.grid = grid
        self.values = values

    @staticmethod
    def zeros(grid):
        return GridFunction(grid, np.zeros((grid.nt + 1,) + grid.shape_full))

    def copy(self):
        return GridFunction(self.grid, self.values.copy())

    def interior(self, k):
        return self.grid.extract(self.values[k])

    def sup_norm(self):
        return float(np.max(np.abs(self.values)))

    def sup_distance(self, other):
        if not self.grid.compatible_with(other.grid):
            raise GridMismatch("grids differ")
        return float(np.max(np.abs(self.values - other.values)))

    def value_at(self, s, point):
        """Nearest slice in time, multilinear interpolation in space."""
        k = self.grid.time_index(s)
        pts = np.atleast_2d(np.asarray(point, dtype=float))
        return float(multilinear(self.grid, self.values[k], pts)[0])


def multilinear(grid: Grid, full: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of a full-shape nodal array.

    ``points`` has shape (n, dim); points outside the closed box are
    clamped to it.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    vals = None
    idxs = []
    wgts = []
    for ax in range(grid.dim):
        n_nodes = grid.shape_full[ax]
        pos = np.clip(points[:, ax], 0.0, grid.domain.lengths[ax]) / grid.h[ax]
        i0 = np.clip(np.floor(pos).astype(np.int64), 0, n_nodes - 2)
        w = pos - i0
        idxs.append(i0)
        wgts.append(w)
    if grid.dim == 1:
        i0, w = idxs[0], wgts[0]
        vals = (1.0 - w) * full[i0] + w * full[i0 + 1]
    else:
        i0, w0 = idxs[0], wgts[0]
        j0, w1 = idxs[1], wgts[1]
        vals = ((1 - w0) * (1 - w1) * full[i0, j0] + w0 * (1 - w1) * full[i0 + 1, j0]
                + (1 - w0) * w1 * full[i0, j0 + 1] + w0 * w1 * full[i0 + 1, j0 + 1])
    return vals


def project_function(fn: Callable, grid: Grid, t=None, boundary_zero=False,
                     allow_infinite=False) -> np.ndarray:
    """Sample a function at all grid nodes of one slice.

    Solution-space projections force the boundary nodes to 0
    (``boundary_zero=True``); data and barriers are sampled verbatim.
    ``t=None`` samples a space-only function such as the terminal data.
    Barriers may legitimately take +-inf on part of the domain
    (``allow_infinite=True``); NaN is always rejected.
    """
    meshes = grid.full_meshes()
    raw = fn(*meshes) if t is None else fn(t, *meshes)
    arr = np.broadcast_to(np.asarray(raw, dtype=float), grid.shape_full).copy()
    bad_mask = np.isnan(arr) if allow_infinite else ~np.isfinite(arr)
    if np.any(bad_mask):
        bad = np.argwhere(bad_mask)[0]
        raise InvalidSample(f"non-finite sample at node index {tuple(bad)} (t={t})")
    if boundary_zero:
        mask = np.zeros(grid.shape_full, dtype=bool)
        if grid.dim == 1:
            mask[1:-1] = True
        else:
            mask[1:-1, 1:-1] = True
        arr[~mask] = 0.0
    return arr


def project_spacetime(fn: Callable, grid: Grid, boundary_zero=False) -> GridFunction:
    """Stack per-slice projections into a GridFunction."""
    out = np.empty((grid.nt + 1,) + grid.shape_full)
    for k in range(grid.nt + 1):
        out[k] = project_function(fn, grid, grid.times[k], boundary_zero)
    return GridFunction(grid, out)


def barrier_slices(barrier: Optional[Callable], grid: Grid) -> Optional[np.ndarray]:
    """Interior nodal barrier values per slice, shape (nt+1, n_interior);
    None stays None (absent barrier)."""
    if barrier is None:
        return None
    out = np.empty((grid.nt + 1, grid.n_interior))
    for k in range(grid.nt + 1):
        out[k] = grid.extract(project_function(barrier, grid, grid.times[k],
                                               allow_infinite=True))
    return out


@dataclass
class SpatialOperator:
    """Sparse interior-node discretization of A_t at one time slice."""

    t: float
    grid: Grid
    matrix: sp.csr_matrix
    face_coeffs: tuple
    has_cross_terms: bool = False

    def apply_full(self, full):
        """A u for a full-shape slice (Dirichlet boundary), embedded back
        into full shape."""
        return self.grid.embed(self.matrix @ self.grid.extract(full))


def _harmonic(a, b):
    return 2.0 * a * b / (a + b)


def build_operator(coeffs, grid: Grid, t: float) -> SpatialOperator:
    """Assemble the divergence-form stencil at time ``t``.

    dim 1: interior row ``(1/2) [a_{i-1/2}, -(a_{i-1/2}+a_{i+1/2}),
    a_{i+1/2}] / h^2`` with harmonic-mean faces.  dim 2: the analogous
    5-point scheme per axis on the diagonal of ``a``; a nonzero ``a12``
    adds centered cross differences and emits a validity warning, since
    the M-matrix sign pattern may then fail.
    """
    if grid.dim == 1:
        a_nodes = coeffs.component_grid(t, (grid.axes[0],), 0)
        if np.any(a_nodes <= 0.0):
            i = int(np.argmax(a_nodes <= 0.0))
            raise NonEllipticAtNode(f"a <= 0 at node {i} (t={t})")
        faces = _harmonic(a_nodes[:-1], a_nodes[1:])
        if np.any(faces <= 0.0):
            i = int(np.argmax(faces <= 0.0))
            raise NonEllipticAtNode(f"face coefficient <= 0 at face {i} (t={t})")
        n = grid.nx[0]
        scale = 0.5 / grid.h[0] ** 2
        lower = faces[1:n] * scale
        diag = -(faces[:n] + faces[1:]) * scale
        upper = faces[1:n] * scale
        matrix = sp.diags([lower, diag, upper], offsets=[-1, 0, 1], format="csr")
        return SpatialOperator(t, grid, matrix, (faces,))

    meshes = grid.full_meshes()
    a11 = coeffs.component_grid(t, meshes, 0)
    a12 = coeffs.component_grid(t, meshes, 1)
    a22 = coeffs.component_grid(t, meshes, 2)
    for name, comp in (("a11", a11), ("a22", a22)):
        if np.any(comp <= 0.0):
            raise NonEllipticAtNode(f"{name} <= 0 at a node (t={t})")
    f0 = _harmonic(a11[:-1, :], a11[1:, :])  # faces along axis 0
    f1 = _harmonic(a22[:, :-1], a22[:, 1:])  # faces along axis 1
    if np.any(f0 <= 0.0) or np.any(f1 <= 0.0):
        raise NonEllipticAtNode(f"face coefficient <= 0 (t={t})")

    n1, n2 = grid.nx
    h1, h2 = grid.h
    I, J = np.meshgrid(np.arange(1, n1 + 1), np.arange(1, n2 + 1), indexing="ij")
    flat = ((I - 1) * n2 + (J - 1)).ravel()

    rows, cols, vals = [], [], []

    def add(mask, col_index, coeff):
        rows.append(flat[mask.ravel()])
        cols.append(col_index.ravel()[mask.ravel()])
        vals.append(coeff.ravel()[mask.ravel()])

    s0 = 0.5 / h1**2
    s1 = 0.5 / h2**2
    face_dn = f0[I - 1, J] * s0
    face_up = f0[I, J] * s0
    face_lf = f1[I, J - 1] * s1
    face_rt = f1[I, J] * s1

    rows.append(flat)
    cols.append(flat)
    vals.append(-(face_dn + face_up + face_lf + face_rt).ravel())
    add(I > 1, (I - 2) * n2 + (J - 1), face_dn)
    add(I < n1, I * n2 + (J - 1), face_up)
    add(J > 1, (I - 1) * n2 + (J - 2), face_lf)
    add(J < n2, (I - 1) * n2 + J, face_rt)

    has_cross = bool(np.max(np.abs(a12)) > 0.0)
    if has_cross:
        warnings.warn(
            "nonzero a12: centered cross differences are best-effort, the "
            "M-matrix sign pattern may fail", RuntimeWarning, stacklevel=2)
        c = a12
        s01 = 1.0 / (8.0 * h1 * h2)
        pp = (c[2:, 1:-1] + c[1:-1, 2:]) * s01     # coefficient of u_{i+1,j+1}
        mm = (c[:-2, 1:-1] + c[1:-1, :-2]) * s01   # u_{i-1,j-1}
        pm = -(c[2:, 1:-1] + c[1:-1, :-2]) * s01   # u_{i+1,j-1}
        mp = -(c[:-2, 1:-1] + c[1:-1, 2:]) * s01   # u_{i-1,j+1}
        add((I < n1) & (J < n2), I * n2 + J, pp)
        add((I > 1) & (J > 1), (I - 2) * n2 + (J - 2), mm)
        add((I < n1) & (J > 1), I * n2 + (J - 2), pm)
        add((I > 1) & (J < n2), (I - 2) * n2 + J, mp)

    matrix = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(grid.n_interior, grid.n_interior)).tocsr()
    return SpatialOperator(t, grid, matrix, (f0, f1), has_cross)


def build_operator_slices(coeffs, grid: Grid):
    """Operators for every time slice, built once per solve; a single
    operator is reused when the coefficients are time-independent."""
    if coeffs.time_independent:
        op = build_operator(coeffs, grid, grid.times[0])
        return [SpatialOperator(grid.times[k], grid, op.matrix, op.face_coeffs,
                                op.has_cross_terms) for k in range(grid.nt + 1)]
    return [build_operator(coeffs, grid, grid.times[k]) for k in range(grid.nt + 1)]


def _cell_average(fn, grid: Grid, t, absolute=False):
    """Per-cell Gauss average of a spatial field at one time, interior
    nodes only, returned in full shape with zero boundary."""
    if grid.dim == 1:
        x = grid.axes[0][1:-1]
        pts = x[:, None] + _GAUSS_OFFSETS[None, :] * grid.h[0]
        vals = np.asarray(fn(pts) if t is None else fn(t, pts), dtype=float)
        vals = np.broadcast_to(vals, pts.shape)
        if absolute:
            vals = np.abs(vals)
        avg = vals @ _GAUSS_WEIGHTS
        out = np.zeros(grid.shape_full)
        out[1:-1] = avg
        return out
    x1 = grid.axes[0][1:-1]
    x2 = grid.axes[1][1:-1]
    p1 = x1[:, None] + _GAUSS_OFFSETS[None, :] * grid.h[0]
    p2 = x2[:, None] + _GAUSS_OFFSETS[None, :] * grid.h[1]
    X1 = p1[:, None, :, None]
    X2 = p2[None, :, None, :]
    X1b, X2b = np.broadcast_arrays(X1, X2)
    vals = np.asarray(fn(X1b, X2b) if t is None else fn(t, X1b, X2b), dtype=float)
    vals = np.broadcast_to(vals, X1b.shape)
    if absolute:
        vals = np.abs(vals)
    w = _GAUSS_WEIGHTS
    avg = np.einsum("ijqr,q,r->ij", vals, w, w)
    out = np.zeros(grid.shape_full)
    out[1:-1, 1:-1] = avg
    return out


@dataclass
class DiscreteMeasure:
    """Grid representation of measure data: per-slice nodal densities
    plus time atoms snapped to grid slices.

    ``densities`` has shape (nt+1,) + shape_full with zero boundary;
    ``atoms`` maps slice index -> full-shape nodal spatial density.
    """

    grid: Grid
    densities: np.ndarray
    atoms: dict = field(default_factory=dict)

    @staticmethod
    def zero(grid):
        return DiscreteMeasure(grid, np.zeros((grid.nt + 1,) + grid.shape_full), {})

    def copy(self):
        return DiscreteMeasure(self.grid, self.densities.copy(),
                               {k: v.copy() for k, v in self.atoms.items()})

    def plus_density(self, slices):
        """New measure with ``slices`` (shape (nt+1,)+full) added to the
        density part."""
        out = self.copy()
        out.densities = out.densities + slices
        return out

    def density_mass(self):
        """Sum_k dt * sum_cells |g_k| * cellvol over slices 1..nt."""
        g = self.grid
        return float(np.sum(np.abs(self.densities[1:])) * g.cellvol * g.dt)

    def atom_mass(self):
        return float(sum(np.sum(np.abs(r)) * self.grid.cellvol for r in self.atoms.values()))

    def total_mass(self):
        return self.density_mass() + self.atom_mass()


def project_measure(measure, grid: Grid) -> DiscreteMeasure:
    """Cell-average the density per slice; snap each atom to the nearest
    grid time (ties to the earlier slice) as a nodal spatial density."""
    dens = np.zeros((grid.nt + 1,) + grid.shape_full)
    if measure.density is not None:
        for k in range(grid.nt + 1):
            dens[k] = _cell_average(measure.density, grid, grid.times[k])
    atoms = {}
    for tk, rho in measure.atoms:
        k = grid.time_index(tk)
        arr = _cell_average(rho, grid, None)
        if k in atoms:
            atoms[k] = atoms[k] + arr
        else:
            atoms[k] = arr
    return DiscreteMeasure(grid, dens, atoms)


def tv_norm(measure, grid: Grid) -> float:
    """Quadrature of ||mu||_TV: cell-averaged |g| summed over slices
    1..nt (the measure lives on (0, T]) plus the atom masses."""
    total = 0.0
    if measure.density is not None:
        for k in range(1, grid.nt + 1):
            slab = _cell_average(measure.density, grid, grid.times[k], absolute=True)
            total += float(np.sum(slab)) * grid.cellvol * grid.dt
    for tk, rho in measure.atoms:
        slab = _cell_average(rho, grid, None, absolute=True)
        total += float(np.sum(slab)) * grid.cellvol
    return total
