"""Finite-difference solver and verification harness for semilinear
parabolic obstacle problems with one or two barriers and measure data.

The package solves the penalized approximations and the direct
complementarity problem on uniform tensor grids, and cross-checks them
against three independent routes: a Monte Carlo evaluation of the
stochastic representation, an explicit clamped dynamic program, and a
battery of analytic identities (comparison, minimality, L1 and entropy
estimates).
"""

__version__ = "0.1.0"

from .errors import (ConfigError, DegenerateFit, DominanceNotSatisfied,
                     EnvelopeViolation, GridMismatch, HardViolation,
                     InfiniteBarrierUnderMeasure, InvalidSample,
                     NewtonDivergence, NonC1Coefficients, NonEllipticAtNode,
                     PenaltyOverflow, ReflectaError, StabilityViolation,
                     StalledIteration)
from .problem import (BarrierPair, CoefficientField, Driver, MeasureData,
                      ProblemSpec, SeparationWitness, SpaceTimeDomain,
                      ValidationReport, validate)
from .grid import (DiscreteMeasure, Grid, GridFunction, SpatialOperator,
                   build_operator, multilinear, project_function,
                   project_measure, project_spacetime, tv_norm)
from .solver import (PenalizedSolution, ReactionMeasure, penalization_sweep,
                     solve_cauchy_dirichlet, solve_penalized)
from .lcp import EnvelopeReport, LcpSolution, envelope_check, solve_vi
from .montecarlo import (FunctionalAccumulator, McEstimate, PathBundle,
                         accumulate, drift, dynkin_value, feynman_kac_check,
                         simulate_paths)
from .diagnostics import (ComparisonResult, ConvergenceReport, EntropyResult,
                          L1EstimateResult, TruncationEnergyRow,
                          comparison_trial, entropy_residual,
                          l1_estimate_check, minimality_residual, rate_fit,
                          truncation_energy_check)
from .config import RunConfig, build_problem, load_problem
