"""Point set <-> offset grid conversion through exact linear assignment.

A set of ``n = s*s`` points is matched to the centers of the ``s x s``
strata; each stratum stores the offset of its matched point in stratum
units, ``(p - c) * s``. Stratified inputs skip the assignment and keep the
point that already lives in each stratum.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import DataError, PointSet, wrap_points

__all__ = [
    "GridField",
    "Assignment",
    "MAX_ASSIGNMENT_SIZE",
    "grid_side",
    "strata_centers",
    "stratum_of",
    "detect_stratified",
    "solve_assignment",
    "assignment_cost",
    "embed",
    "unembed",
    "escape_rate",
    "write_field",
    "read_field",
]

MAX_ASSIGNMENT_SIZE = 4096


@dataclass(frozen=True, eq=False)
class GridField:
    """``(s, s, 2)`` per-stratum offsets; ``offsets[j, i]`` is stratum ``k = j*s + i``."""

    offsets: np.ndarray

    def __post_init__(self) -> None:
        off = np.array(self.offsets, dtype=np.float64, copy=True)
        if off.ndim != 3 or off.shape[0] != off.shape[1] or off.shape[2] != 2:
            raise DataError(f"grid field must be (s, s, 2), got {off.shape}")
        if not np.all(np.isfinite(off)):
            raise DataError("grid field has non-finite entries")
        off.setflags(write=False)
        object.__setattr__(self, "offsets", off)

    @property
    def s(self) -> int:
        return self.offsets.shape[0]


@dataclass(frozen=True)
class Assignment:
    """``perm[k]`` is the sample index matched to stratum ``k`` (row-major)."""

    perm: np.ndarray
    solved: bool = True


def grid_side(n: int) -> int:
    s = math.isqrt(n)
    if s * s != n:
        raise DataError(f"{n} points do not fill a square grid")
    return s


def strata_centers(s: int) -> PointSet:
    c = (np.arange(s) + 0.5) / s
    gx, gy = np.meshgrid(c, c)
    return PointSet(np.stack([gx.ravel(), gy.ravel()], axis=1))


def stratum_of(xy: np.ndarray, s: int) -> np.ndarray:
    """Row-major index of the left-closed stratum containing each point."""
    ij = np.minimum(np.floor(np.asarray(xy) * s).astype(np.int64), s - 1)
    return ij[:, 1] * s + ij[:, 0]


def detect_stratified(points: PointSet | np.ndarray, s: int) -> bool:
    xy = np.asarray(points)
    if xy.shape[0] != s * s:
        return False
    counts = np.bincount(stratum_of(xy, s), minlength=s * s)
    return bool(np.all(counts == 1))


def _cost_matrix(xy: np.ndarray, s: int) -> np.ndarray:
    c = strata_centers(s).points
    return ((c[:, None, :] - xy[None, :, :]) ** 2).sum(-1)


def assignment_cost(points: PointSet | np.ndarray, perm: np.ndarray, s: int) -> float:
    """Sum over strata of the squared distance to the matched sample."""
    xy = np.asarray(points)
    d = xy[np.asarray(perm)] - strata_centers(s).points
    return float(np.sum(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]))


def solve_assignment(points: PointSet | np.ndarray, s: int) -> Assignment:
    """Min-cost matching of strata centers to samples under squared distance.

    Uses the stratified shortcut when every stratum holds exactly one point,
    otherwise an exact shortest-augmenting-path solver.
    """
    xy = np.asarray(points)
    n = xy.shape[0]
    if n != s * s:
        raise DataError(f"size mismatch: {n} points for a {s}x{s} grid")
    if detect_stratified(xy, s):
        perm = np.empty(n, dtype=np.int64)
        perm[stratum_of(xy, s)] = np.arange(n)
        return Assignment(perm, solved=False)
    if n > MAX_ASSIGNMENT_SIZE:
        raise DataError(f"exact assignment refused for n={n} > {MAX_ASSIGNMENT_SIZE}")
    rows, cols = linear_sum_assignment(_cost_matrix(xy, s))
    perm = np.empty(n, dtype=np.int64)
    perm[rows] = cols
    return Assignment(perm, solved=True)


def embed(points: PointSet | np.ndarray, s: int | None = None) -> GridField:
    xy = np.asarray(points)
    s = grid_side(xy.shape[0]) if s is None else s
    perm = solve_assignment(xy, s).perm
    off = (xy[perm] - strata_centers(s).points) * s
    return GridField(off.reshape(s, s, 2))


def unembed(field: GridField | np.ndarray) -> PointSet:
    off = field.offsets if isinstance(field, GridField) else np.asarray(field, dtype=np.float64)
    s = off.shape[0]
    xy = strata_centers(s).points + off.reshape(-1, 2) / s
    return PointSet(wrap_points(xy))


def escape_rate(field: GridField | np.ndarray) -> float:
    """Fraction of strata whose offset leaves ``[-0.5, 0.5)`` on either axis.

    Accepts a single ``(s, s, 2)`` field or a stack ``(N, s, s, 2)``.
    """
    off = field.offsets if isinstance(field, GridField) else np.asarray(field)
    out = np.any((off < -0.5) | (off >= 0.5), axis=-1)
    return float(np.mean(out))


# GFLD: b"GFLD" | u16 version | u16 side | s*s*2 little-endian f32, row-major, (x, y) per stratum
GFLD_MAGIC = b"GFLD"
GFLD_VERSION = 1


def write_field(field: GridField | np.ndarray, path: str | os.PathLike) -> None:
    off = field.offsets if isinstance(field, GridField) else GridField(field).offsets
    s = off.shape[0]
    Path(path).write_bytes(GFLD_MAGIC + struct.pack("<HH", GFLD_VERSION, s) + off.astype("<f4").tobytes())


def read_field(path: str | os.PathLike) -> GridField:
    buf = Path(path).read_bytes()
    if buf[:4] != GFLD_MAGIC:
        raise DataError(f"{path}: not a GFLD file")
    version, s = struct.unpack_from("<HH", buf, 4)
    if version != GFLD_VERSION:
        raise DataError(f"{path}: unsupported GFLD version {version}")
    if len(buf) != 8 + 4 * s * s * 2:
        raise DataError(f"{path}: expected {s}x{s} field, file length {len(buf)}")
    off = np.frombuffer(buf, dtype="<f4", offset=8).astype(np.float64).reshape(s, s, 2)
    return GridField(off)
