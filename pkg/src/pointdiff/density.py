"""Target densities on the unit square for rejection sampling and validation.

``expression`` densities accept a small arithmetic language over ``x`` and
``y``: numbers, ``pi``, ``e``, the operators ``+ - * / **``, and the
functions ``exp``, ``sin``, ``cos`` and ``pow``, e.g.
``"0.5 + 0.5*sin(pi*x)**2"``.
"""

from __future__ import annotations

import ast
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np

from .core import DataError

__all__ = ["DensitySpec", "parse_expression", "PROBE_RESOLUTION", "ORACLE_RESOLUTION"]

PROBE_RESOLUTION = 1024
ORACLE_RESOLUTION = 4096

_FUNCS = {"exp": np.exp, "sin": np.sin, "cos": np.cos, "pow": np.power}
_CONSTS = {"pi": math.pi, "e": math.e}
_BINOPS = {ast.Add: np.add, ast.Sub: np.subtract, ast.Mult: np.multiply, ast.Div: np.divide, ast.Pow: np.power}


def parse_expression(text: str) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Compile a restricted arithmetic expression in ``x``, ``y`` to a vectorized function."""
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as exc:
        raise DataError(f"bad density expression {text!r}: {exc.msg}") from None

    def build(node):
        if isinstance(node, ast.Expression):
            return build(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
            v = float(node.value)
            return lambda x, y: v
        if isinstance(node, ast.Name):
            if node.id == "x":
                return lambda x, y: x
            if node.id == "y":
                return lambda x, y: y
            if node.id in _CONSTS:
                v = _CONSTS[node.id]
                return lambda x, y: v
            raise DataError(f"unknown name {node.id!r} in density expression")
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            op, a, b = _BINOPS[type(node.op)], build(node.left), build(node.right)
            return lambda x, y: op(a(x, y), b(x, y))
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            a = build(node.operand)
            if isinstance(node.op, ast.USub):
                return lambda x, y: -a(x, y)
            return a
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS and not node.keywords:
            fn = _FUNCS[node.func.id]
            nargs = 2 if node.func.id == "pow" else 1
            if len(node.args) != nargs:
                raise DataError(f"{node.func.id} takes {nargs} argument(s)")
            args = [build(a) for a in node.args]
            return lambda x, y: fn(*(g(x, y) for g in args))
        raise DataError(f"unsupported construct in density expression: {ast.dump(node)[:60]}")

    fn = build(tree)

    def density(x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        return np.broadcast_to(np.asarray(fn(x, y), dtype=np.float64), np.broadcast_shapes(x.shape, y.shape))

    return density


def _blobby(x, y):
    return 0.2 * np.exp(-20.0 * (x * x + y * y)) + 0.2 * np.sin(np.pi * x) ** 2 * np.sin(np.pi * y) ** 2


@dataclass(frozen=True)
class DensitySpec:
    """Non-negative density with an upper bound ``bound`` used for rejection.

    Kinds: ``uniform``; ``linear_ramp`` with ``slope`` a in [-2, 2] giving
    ``1 + a (x - 1/2)`` (a = 2 is the ramp ``2x``); ``blobby``, a Gaussian
    bump at the origin plus a centered sine-squared hump; ``expression``.
    """

    kind: str = "uniform"
    slope: float = 2.0
    expression: str = ""
    bound: float | None = None
    _fn: Callable = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.kind == "uniform":
            fn, default = (lambda x, y: np.ones(np.broadcast_shapes(np.shape(x), np.shape(y)))), 1.0
        elif self.kind == "linear_ramp":
            if not -2.0 <= self.slope <= 2.0:
                raise DataError(f"ramp slope must lie in [-2, 2], got {self.slope}")
            a = self.slope
            fn, default = (lambda x, y: 1.0 + a * (np.asarray(x) - 0.5) + 0.0 * np.asarray(y)), 1.0 + abs(a) / 2
        elif self.kind == "blobby":
            # sup is 0.2 + 0.2*exp(-10) near the center
            fn, default = _blobby, 0.2001
        elif self.kind == "expression":
            fn, default = parse_expression(self.expression), None
        else:
            raise DataError(f"unknown density kind {self.kind!r}")
        object.__setattr__(self, "_fn", fn)
        if self.bound is None:
            if default is None:
                default = float(self.probe().max()) * 1.05
            object.__setattr__(self, "bound", default)

    @classmethod
    def parse(cls, text: str) -> "DensitySpec":
        """``uniform`` | ``blobby`` | ``ramp`` / ``ramp:<slope>`` | ``expr:<expression>``."""
        text = text.strip()
        if text in ("uniform", "blobby"):
            return cls(text)
        if text == "ramp" or text == "linear_ramp":
            return cls("linear_ramp")
        if text.startswith("ramp:"):
            return cls("linear_ramp", slope=float(text[5:]))
        if text.startswith("expr:"):
            return cls("expression", expression=text[5:])
        raise DataError(f"unknown density {text!r}")

    def __call__(self, x, y) -> np.ndarray:
        return self._fn(x, y)

    def probe(self, resolution: int = PROBE_RESOLUTION) -> np.ndarray:
        g = np.linspace(0.0, 1.0, resolution)
        gx, gy = np.meshgrid(g, g)
        return np.asarray(self(gx, gy), dtype=np.float64)

    def validate(self) -> None:
        """Check non-negativity and the rejection bound on the probe grid."""
        vals = self.probe()
        if not np.all(np.isfinite(vals)):
            raise DataError("density is not finite on the unit square")
        if vals.min() < 0.0:
            raise DataError(f"density is negative (min {vals.min():.3g})")
        if vals.max() > self.bound:
            raise DataError(f"bound {self.bound} below density maximum {vals.max()}")

    @cached_property
    def _oracle_blocks(self) -> np.ndarray:
        """Density summed over 8x8 blocks of the ``4096^2`` midpoint grid -> ``512^2``."""
        r = ORACLE_RESOLUTION
        mid = (np.arange(r) + 0.5) / r
        out = np.empty((r // 8, r // 8))
        for j0 in range(0, r, 256):
            vals = np.asarray(self(mid[None, :], mid[j0:j0 + 256, None]), dtype=np.float64)
            out[j0 // 8:(j0 + 256) // 8] = vals.reshape(32, 8, r // 8, 8).sum(axis=(1, 3))
        return out

    def normalizer(self) -> float:
        """Integral over the unit square, midpoint rule on a ``4096^2`` grid."""
        return float(self._oracle_blocks.sum()) / ORACLE_RESOLUTION**2

    def cell_masses(self, bins: int) -> np.ndarray:
        """Probability of each of ``bins x bins`` cells, indexed ``[iy, ix]``."""
        r = self._oracle_blocks.shape[0]
        if r % bins:
            raise ValueError(f"bins must divide {r}")
        k = r // bins
        m = self._oracle_blocks.reshape(bins, k, bins, k).sum(axis=(1, 3))
        return m / m.sum()
