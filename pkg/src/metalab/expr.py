"""Safe closed-form expressions over Euclidean coordinates.

Expressions are ordinary Python arithmetic restricted to a whitelist of
nodes, names and numpy ufuncs. They are compiled once and evaluated on
batches of points of shape ``(n, d)``.

Coordinates are available as ``x1 .. xd`` and, for ``d <= 3``, also as
``x, y, z``.

>>> f = Expression("x1**2 + sin(x2)", dim=2)
>>> float(f(np.array([[2.0, 0.0]]))[0])
4.0
"""

from __future__ import annotations

import ast

import numpy as np

_FUNCTIONS = {
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "tanh": np.tanh,
    "sinh": np.sinh,
    "cosh": np.cosh,
    "arctan": np.arctan,
    "atan2": np.arctan2,
    "abs": np.abs,
    "min": np.minimum,
    "max": np.maximum,
}

_CONSTANTS = {"pi": np.pi, "e": np.e}

_ALLOWED_NODES = (
    ast.Expression,
    ast.BinOp,
    ast.UnaryOp,
    ast.Call,
    ast.Name,
    ast.Load,
    ast.Constant,
    ast.Add,
    ast.Sub,
    ast.Mult,
    ast.Div,
    ast.Pow,
    ast.USub,
    ast.UAdd,
)


def coordinate_names(dim):
    """Map variable names to coordinate indices for dimension ``dim``."""
    names = {f"x{k + 1}": k for k in range(dim)}
    if dim <= 3:
        names.update({c: k for k, c in enumerate("xyz"[:dim])})
    return names


class Expression:
    """Compiled scalar expression in the coordinates of ``R^dim``.

    Parameters
    ----------
    source : str or float
        Expression text, or a plain number.
    dim : int
        Ambient dimension.

    Raises
    ------
    ValueError
        If the text is not valid, uses a disallowed construct, or refers to
        an unknown name.
    """

    def __init__(self, source, dim):
        if isinstance(source, (int, float)) and not isinstance(source, bool):
            source = repr(float(source))
        if not isinstance(source, str):
            raise ValueError(f"expression must be a string or number, got {type(source).__name__}")
        self.source = source
        self.dim = int(dim)
        try:
            tree = ast.parse(source.strip(), mode="eval")
        except SyntaxError as exc:
            raise ValueError(f"cannot parse expression {source!r}: {exc.msg}") from None
        coords = coordinate_names(self.dim)
        self.variables = set()
        for node in ast.walk(tree):
            if not isinstance(node, _ALLOWED_NODES):
                raise ValueError(f"construct {type(node).__name__} not allowed in {source!r}")
            if isinstance(node, ast.Constant) and not isinstance(node.value, (int, float)):
                raise ValueError(f"only numeric constants allowed in {source!r}")
            if isinstance(node, ast.Call):
                if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCTIONS:
                    raise ValueError(f"unknown function in {source!r}")
                if node.keywords:
                    raise ValueError(f"keyword arguments not allowed in {source!r}")
            if isinstance(node, ast.Name):
                if node.id in coords:
                    self.variables.add(coords[node.id])
                elif node.id not in _FUNCTIONS and node.id not in _CONSTANTS:
                    raise ValueError(f"unknown name {node.id!r} in {source!r}")
        self._code = compile(tree, "<expression>", "eval")
        self._coords = coords
        self.is_constant = not self.variables
        self._constant_value = None
        if self.is_constant:
            value = eval(self._code, {"__builtins__": {}}, dict(_FUNCTIONS, **_CONSTANTS))
            self._constant_value = float(value)

    def __repr__(self):
        return f"Expression({self.source!r}, dim={self.dim})"

    def __call__(self, points):
        """Evaluate on points of shape ``(n, dim)``; returns shape ``(n,)``."""
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            points = points[None, :]
        n = points.shape[0]
        if self.is_constant:
            return np.full(n, self._constant_value)
        namespace = dict(_FUNCTIONS, **_CONSTANTS)
        for name, k in self._coords.items():
            namespace[name] = points[:, k]
        with np.errstate(all="ignore"):
            value = eval(self._code, {"__builtins__": {}}, namespace)
        value = np.asarray(value, dtype=float)
        if value.shape != (n,):
            value = np.broadcast_to(value, (n,)).copy()
        return value
