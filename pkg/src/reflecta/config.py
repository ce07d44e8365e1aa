"""Problem files and run configuration.

A problem file is JSON with keys ``domain``, ``coefficients``, ``driver``,
``terminal``, ``measure``, ``barriers`` and optionally
``separation_witness``; scalar fields are expression strings over
``t, x (x1), x2, y`` (see ``expressions``).  The machine-readable schema
ships in ``reflecta/schemas/problem.schema.json``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
import numpy as np

from .errors import ConfigError
from .expressions import Expression, ExpressionError
from .problem import (BarrierPair, CoefficientField, Driver, MeasureData,
                      ProblemSpec, SeparationWitness, SpaceTimeDomain)

BUILTIN_PROBLEMS = ("heat", "heat2d", "lower_barrier", "two_barrier", "time_atom")


def _expr(source, what):
    if not isinstance(source, str):
        raise ConfigError(f"{what} must be an expression string, got {source!r}")
    try:
        return Expression(source)
    except ExpressionError as exc:
        raise ConfigError(f"{what}: {exc}") from exc


def _spacetime_callable(expr: Expression, dim):
    if dim == 1:
        return lambda t, x: expr(t=t, x=x)
    return lambda t, x1, x2: expr(t=t, x1=x1, x2=x2)


def _spatial_callable(expr: Expression, dim):
    if dim == 1:
        return lambda x: expr(x=x)
    return lambda x1, x2: expr(x1=x1, x2=x2)


def _driver_callable(expr: Expression, dim):
    if dim == 1:
        return lambda t, x, y: expr(t=t, x=x, y=y)
    return lambda t, x1, x2, y: expr(t=t, x1=x1, x2=x2, y=y)


def _build_coefficients(cfg, dim):
    kind = cfg.get("kind", "constant")
    smoothness = cfg.get("smoothness", "C1" if kind in ("constant", "identity") else "measurable")
    if kind == "identity":
        return CoefficientField.constant(1.0 if dim == 1 else np.eye(2), dim=dim)
    if kind == "constant":
        value = cfg.get("value", cfg.get("matrix"))
        if value is None:
            raise ConfigError("constant coefficients need 'value' or 'matrix'")
        return CoefficientField.constant(value, dim=dim)
    lam = cfg.get("lambda")
    if lam is None:
        raise ConfigError(f"coefficients kind {kind!r} needs an explicit 'lambda'")
    if kind == "isotropic":
        e = _expr(cfg["a"], "coefficients.a")
        fn = _spacetime_callable(e, dim)
        return CoefficientField.isotropic(fn, float(lam), dim=dim,
                                          smoothness_flag=smoothness,
                                          time_independent="t" not in e.variables)
    if kind in ("diagonal", "full"):
        if dim != 2:
            raise ConfigError(f"coefficients kind {kind!r} needs dim=2")
        e11 = _expr(cfg["a11"], "coefficients.a11")
        e22 = _expr(cfg["a22"], "coefficients.a22")
        if kind == "full":
            e12 = _expr(cfg["a12"], "coefficients.a12")
        else:
            e12 = _expr("0", "coefficients.a12")
        comp = tuple(_spacetime_callable(e, 2) for e in (e11, e12, e22))
        time_ind = all("t" not in e.variables for e in (e11, e12, e22))
        return CoefficientField(2, comp, float(lam), smoothness, time_ind)
    raise ConfigError(f"unknown coefficients kind {kind!r}")


def build_problem(doc: dict, name="") -> ProblemSpec:
    """Turn a parsed problem document into a ProblemSpec."""
    try:
        dom_cfg = doc["domain"]
        dom = SpaceTimeDomain(int(dom_cfg["dim"]),
                              tuple(float(L) for L in dom_cfg["lengths"]),
                              float(dom_cfg["horizon"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad domain section: {exc}") from exc
    dim = dom.dim
    coeffs = _build_coefficients(doc.get("coefficients", {"kind": "identity"}), dim)

    drv_cfg = doc.get("driver", {"f": "0", "kappa": 0.0})
    f_expr = _expr(drv_cfg.get("f", "0"), "driver.f")
    f_y = None
    if drv_cfg.get("f_y") is not None:
        f_y = _driver_callable(_expr(drv_cfg["f_y"], "driver.f_y"), dim)
    driver = Driver(f=_driver_callable(f_expr, dim),
                    kappa=float(drv_cfg.get("kappa", 0.0)), f_y=f_y)

    term_cfg = doc.get("terminal", {})
    phi = _spatial_callable(_expr(term_cfg.get("phi", "0"), "terminal.phi"), dim)

    meas_cfg = doc.get("measure", {})
    density = None
    if meas_cfg.get("density") is not None:
        density = _spacetime_callable(_expr(meas_cfg["density"], "measure.density"), dim)
    atoms = []
    for i, atom in enumerate(meas_cfg.get("atoms", ())):
        atoms.append((float(atom["t"]),
                      _spatial_callable(_expr(atom["rho"], f"measure.atoms[{i}].rho"), dim)))
    measure = MeasureData(density=density, atoms=tuple(atoms))

    bar_cfg = doc.get("barriers", {})
    h1 = h2 = None
    if bar_cfg.get("lower") is not None:
        h1 = _spacetime_callable(_expr(bar_cfg["lower"], "barriers.lower"), dim)
    if bar_cfg.get("upper") is not None:
        h2 = _spacetime_callable(_expr(bar_cfg["upper"], "barriers.upper"), dim)
    barriers = BarrierPair(h1, h2, bar_cfg.get("continuity", "quasi_continuous_proxy"))

    witness = None
    wit_cfg = doc.get("separation_witness")
    if wit_cfg is not None:
        lam_d = None
        if wit_cfg.get("lambda_density") is not None:
            lam_d = _spacetime_callable(
                _expr(wit_cfg["lambda_density"], "separation_witness.lambda_density"), dim)
        phi_hat = None
        if wit_cfg.get("phi_hat") is not None:
            phi_hat = _spatial_callable(
                _expr(wit_cfg["phi_hat"], "separation_witness.phi_hat"), dim)
        witness = SeparationWitness(
            v=_spacetime_callable(_expr(wit_cfg["v"], "separation_witness.v"), dim),
            lambda_density=lam_d, phi_hat=phi_hat)

    return ProblemSpec(dom, coeffs, driver, phi, measure, barriers, witness,
                       name=doc.get("name", name))


def builtin_problem_text(name: str) -> str:
    if name not in BUILTIN_PROBLEMS:
        raise ConfigError(f"unknown builtin problem {name!r}; "
                          f"available: {', '.join(BUILTIN_PROBLEMS)}")
    return resources.files("reflecta").joinpath(f"problems/{name}.json").read_text()


def load_problem(path_or_name: str):
    """Load a problem from a JSON file path or a builtin name.

    Returns (spec, document); the document is the parsed JSON, kept for
    manifests and hashing.
    """
    p = Path(path_or_name)
    if p.suffix == ".json" or p.exists():
        if not p.exists():
            raise ConfigError(f"problem file not found: {path_or_name}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"problem file is not valid JSON: {exc}") from exc
    else:
        doc = json.loads(builtin_problem_text(path_or_name))
    return build_problem(doc, name=p.stem), doc


@dataclass
class RunConfig:
    """Resolved command configuration; hashable into the run manifest."""

    command: str
    problem: str
    nx: int = 128
    nt: int = 512
    n_list: tuple = (1.0, 4.0, 16.0, 64.0, 256.0, 1024.0, 4096.0)
    paths: int = 100_000
    dt_mc: float = 1e-4
    seed: int = 0
    points: tuple = ()
    out_dir: str = "runs/out"
    sweep_mode: str = "direct"
    trials: int = 10
    dump_paths: bool = False
    tolerances: dict = field(default_factory=dict)

    def as_dict(self):
        d = dict(vars(self))
        d["n_list"] = list(self.n_list)
        d["points"] = [list(p) for p in self.points]
        d["tolerances"] = dict(self.tolerances)
        return d


def config_hash(doc) -> str:
    return hashlib.sha256(
        json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
