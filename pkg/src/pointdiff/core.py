"""Point sets in the unit square, seeded random streams and the text format.

Everything in the package passes points around as :class:`PointSet`, an
immutable ``(n, 2)`` float64 array with coordinates in the half-open square
``[0, 1)^2``.
"""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "DataError",
    "NumericError",
    "PointSet",
    "SeededRng",
    "wrap_unit",
    "wrap_points",
    "read_pointset",
    "write_pointset",
    "read_batch",
    "write_batch",
    "batch_filename",
]

_MASK64 = (1 << 64) - 1


class DataError(ValueError):
    """Malformed or out-of-domain input data."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values or otherwise failed numerically."""


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class SeededRng:
    """Counter-based random stream keyed by ``(seed, stream)``.

    Backed by numpy's Philox generator with the pair used directly as the
    128-bit key, so a given pair yields the same draws on every platform and
    different stream ids give independent streams. Instances are meant to be
    owned by a single worker; use :meth:`spawn` to derive per-worker streams.
    """

    seed: int = 0
    stream: int = 0
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        key = np.array([self.seed & _MASK64, self.stream & _MASK64], dtype=np.uint64)
        object.__setattr__(self, "_gen", np.random.Generator(np.random.Philox(key=key)))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def spawn(self, *labels: int) -> "SeededRng":
        """Derive an independent stream from this one's id and integer labels."""
        s = self.stream & _MASK64
        for label in labels:
            s = _splitmix64(s ^ _splitmix64(label & _MASK64))
        return SeededRng(self.seed, s)

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def bits64(self, size=None) -> np.ndarray:
        return self._gen.integers(0, _MASK64, size=size, dtype=np.uint64, endpoint=True)


def wrap_points(xy: np.ndarray) -> np.ndarray:
    """Map coordinates into ``[0, 1)`` by subtracting their floor."""
    xy = np.asarray(xy, dtype=np.float64)
    if not np.all(np.isfinite(xy)):
        raise DataError("non-finite coordinate")
    out = xy - np.floor(xy)
    # tiny negatives round up to exactly 1.0
    out[out >= 1.0] = 0.0
    return out


def wrap_unit(p: Sequence[float]) -> tuple[float, float]:
    x, y = wrap_points(np.array(p, dtype=np.float64).reshape(2))
    return float(x), float(y)


@dataclass(frozen=True, eq=False)
class PointSet:
    """An immutable set of ``n >= 1`` points in ``[0, 1)^2``.

    Row order is storage order only; consumers must not attach meaning to it.
    """

    points: np.ndarray

    def __post_init__(self) -> None:
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise DataError(f"expected an (n, 2) array, got shape {pts.shape}")
        if pts.shape[0] < 1:
            raise DataError("point set is empty")
        if not np.all(np.isfinite(pts)):
            raise DataError("non-finite coordinate")
        if np.any(pts < 0.0) or np.any(pts >= 1.0):
            raise DataError("coordinate outside unit square")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def wrapped(cls, xy: np.ndarray) -> "PointSet":
        return cls(wrap_points(xy))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def __len__(self) -> int:
        return self.n

    def __array__(self, dtype=None, copy=None):
        return self.points if dtype is None else self.points.astype(dtype)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PointSet):
            return NotImplemented
        return np.array_equal(self.points, other.points)

    def __hash__(self) -> int:
        return hash(self.points.tobytes())

    def sorted(self) -> "PointSet":
        """Canonical lexicographic ordering, handy for set comparisons."""
        order = np.lexsort((self.points[:, 1], self.points[:, 0]))
        return PointSet(self.points[order])


def _fmt(v: float) -> str:
    return np.format_float_positional(v, unique=True, trim="0")


def write_pointset(points: PointSet | np.ndarray, path: str | os.PathLike) -> None:
    pts = points.points if isinstance(points, PointSet) else PointSet(points).points
    lines = [f"{_fmt(x)} {_fmt(y)}\n" for x, y in pts]
    Path(path).write_text("".join(lines))


def read_pointset(path: str | os.PathLike) -> PointSet:
    text = Path(path).read_text()
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: malformed line {line!r}")
        try:
            x, y = float(parts[0]), float(parts[1])
        except ValueError:
            raise DataError(f"{path}:{lineno}: malformed line {line!r}") from None
        if not (math.isfinite(x) and math.isfinite(y)):
            raise DataError(f"{path}:{lineno}: non-finite coordinate")
        if not (0.0 <= x < 1.0 and 0.0 <= y < 1.0):
            raise DataError(f"{path}:{lineno}: coordinate outside unit square")
        rows.append((x, y))
    if not rows:
        raise DataError(f"{path}: empty file")
    return PointSet(np.array(rows))


def batch_filename(index: int) -> str:
    return f"pts_{index:06d}.txt"


_BATCH_RE = re.compile(r"^pts_(\d{6})\.txt$")


def write_batch(sets: Iterable[PointSet | np.ndarray], directory: str | os.PathLike) -> int:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    count = 0
    for i, ps in enumerate(sets):
        write_pointset(ps, d / batch_filename(i))
        count += 1
    return count


def read_batch(directory: str | os.PathLike) -> list[PointSet]:
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"{d}: not a directory")
    files = sorted(p for p in d.iterdir() if _BATCH_RE.match(p.name))
    if not files:
        raise DataError(f"{d}: no pts_XXXXXX.txt files")
    return [read_pointset(p) for p in files]
