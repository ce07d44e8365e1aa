"""Arithmetic expression strings for problem config files.

Problem files describe coefficients, drivers, data and barriers as plain
strings like ``"0.15*sin(pi*x)**2 - 0.02"``.  The grammar is a fixed
arithmetic subset of Python expressions:

* binary ``+ - * / **``, unary ``-``/``+``,
* numeric literals,
* the variables ``t``, ``x`` (alias ``x1``), ``x2`` and ``y``,
* the functions ``sin cos tan sinh cosh tanh exp log sqrt abs sign
  min max step where``,
* the constants ``pi`` and ``e``.

``step(z)`` is the Heaviside function ``1 if z > 0 else 0`` (vectorized),
``where(c, a, b)`` selects ``a`` where ``c > 0`` and ``b`` elsewhere; both
exist so that piecewise barriers are expressible without comparisons.
Everything evaluates through numpy, so compiled expressions broadcast over
node arrays.
"""

from __future__ import annotations

import ast

import numpy as np

_FUNCTIONS = {
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "sinh": np.sinh,
    "cosh": np.cosh,
    "tanh": np.tanh,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "sign": np.sign,
    "min": np.minimum,
    "max": np.maximum,
    "step": lambda z: np.where(np.asarray(z) > 0.0, 1.0, 0.0),
    "where": lambda c, a, b: np.where(np.asarray(c) > 0.0, a, b),
}

_CONSTANTS = {"pi": np.pi, "e": np.e}

_VARIABLES = ("t", "x", "x1", "x2", "y")

_BINOPS = {
    ast.Add: lambda a, b: a + b,
    ast.Sub: lambda a, b: a - b,
    ast.Mult: lambda a, b: a * b,
    ast.Div: lambda a, b: a / b,
    ast.Pow: lambda a, b: a**b,
}

_UNARYOPS = {ast.UAdd: lambda a: a, ast.USub: lambda a: -a}


class ExpressionError(ValueError):
    """The expression string is outside the supported grammar."""


def _check(node: ast.AST, source: str) -> None:
    if isinstance(node, ast.Expression):
        _check(node.body, source)
    elif isinstance(node, ast.BinOp):
        if type(node.op) not in _BINOPS:
            raise ExpressionError(f"operator not allowed in {source!r}")
        _check(node.left, source)
        _check(node.right, source)
    elif isinstance(node, ast.UnaryOp):
        if type(node.op) not in _UNARYOPS:
            raise ExpressionError(f"operator not allowed in {source!r}")
        _check(node.operand, source)
    elif isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCTIONS:
            raise ExpressionError(f"unknown function in {source!r}")
        if node.keywords:
            raise ExpressionError(f"keyword arguments not allowed in {source!r}")
        for arg in node.args:
            _check(arg, source)
    elif isinstance(node, ast.Name):
        if node.id not in _VARIABLES and node.id not in _CONSTANTS:
            raise ExpressionError(f"unknown name {node.id!r} in {source!r}")
    elif isinstance(node, ast.Constant):
        if not isinstance(node.value, (int, float)):
            raise ExpressionError(f"non-numeric literal in {source!r}")
    else:
        raise ExpressionError(f"syntax not allowed in {source!r}")


class Expression:
    """A compiled arithmetic expression over (t, x[, x2], y)."""

    def __init__(self, source: str):
        try:
            tree = ast.parse(source, mode="eval")
        except SyntaxError as exc:
            raise ExpressionError(f"cannot parse {source!r}: {exc}") from exc
        _check(tree, source)
        self.source = source
        self.variables = {
            node.id for node in ast.walk(tree)
            if isinstance(node, ast.Name) and node.id in _VARIABLES
        }
        self._code = compile(tree, "<expression>", "eval")

    def __call__(self, **variables):
        env = dict(_FUNCTIONS)
        env.update(_CONSTANTS)
        for name in _VARIABLES:
            env.setdefault(name, 0.0)
        env.update(variables)
        if "x" in variables and "x1" not in variables:
            env["x1"] = variables["x"]
        if "x1" in variables and "x" not in variables:
            env["x"] = variables["x1"]
        return eval(self._code, {"__builtins__": {}}, env)

    def __repr__(self):
        return f"Expression({self.source!r})"


def compile_expression(source: str) -> Expression:
    return Expression(source)
