"""Bundled reference problems and their standard grids.

The JSON files under ``reflecta/problems/`` are the single source of
truth; tests and the CLI load the same documents.  Grid sizes follow the
benchmark resolutions used throughout the verification suite.
"""

from __future__ import annotations

from .config import BUILTIN_PROBLEMS, load_problem
from .grid import Grid

REFERENCE_GRIDS = {
    "heat": (256, 1024),
    "heat2d": (24, 128),
    "lower_barrier": (128, 512),
    "two_barrier": (128, 512),
    "time_atom": (128, 256),
}

# interior verification points (s, x) for the Feynman-Kac check
FK_POINTS = {
    "heat": ((0.0, 0.5), (0.25, 0.25), (0.5, 0.75)),
    "lower_barrier": ((0.15, 0.5), (0.3, 0.35), (0.45, 0.65)),
    "two_barrier": ((0.1, 0.5), (0.4, 0.35), (0.7, 0.5)),
}


def load_reference(name):
    spec, _doc = load_problem(name)
    return spec


def reference_grid(name, nx=None, nt=None):
    spec = load_reference(name)
    d_nx, d_nt = REFERENCE_GRIDS.get(name, (64, 128))
    return Grid(spec.domain, nx=nx or d_nx, nt=nt or d_nt)


def available():
    return BUILTIN_PROBLEMS
