"""Point-set statistics: L2 discrepancy, OT energy, spectra, integration error, spacing."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog
from scipy.spatial import cKDTree
from scipy.special import erf

from .core import NumericError, PointSet, SeededRng
from .density import DensitySpec

__all__ = [
    "l2_discrepancy",
    "l2_discrepancy_sq",
    "ot_energy",
    "sliced_ot_energy",
    "exact_ot_energy",
    "SpectrumGrid",
    "RadialSpectrum",
    "power_spectrum",
    "radial_mean",
    "RADIAL_BIN_WIDTH",
    "RADIAL_BIN_COUNT",
    "min_distance",
    "GaussianIntegrands",
    "HeavisideIntegrands",
    "gaussian_mse",
    "heaviside_mse",
    "density_match",
    "unwarp",
    "warp",
    "MetricReport",
    "evaluate",
    "violin_export",
    "read_violin",
    "QUANTILES",
    "METRICS",
]

# fixed default streams so that every point set is scored against the same
# integrands / projection directions
_INTEGRAND_SEED = 0x1A7E
_SLICE_SEED = 0x511CE


def _xy(points) -> np.ndarray:
    return np.asarray(points, dtype=np.float64)


# -- discrepancy ---------------------------------------------------------------


def l2_discrepancy_sq(points) -> float:
    """Squared origin-anchored L2 discrepancy via Warnock's double sum (2-D)."""
    xy = _xy(points)
    n = xy.shape[0]
    if n == 0:
        raise ValueError("empty point set")
    term1 = np.prod((1.0 - xy ** 2) / 2.0, axis=1).sum()
    cross = 0.0
    for i0 in range(0, n, 1024):
        blk = xy[i0:i0 + 1024]
        mx = np.maximum(blk[:, None, 0], xy[None, :, 0])
        my = np.maximum(blk[:, None, 1], xy[None, :, 1])
        cross += ((1.0 - mx) * (1.0 - my)).sum()
    return 1.0 / 9.0 - 2.0 / n * term1 + cross / n ** 2


def l2_discrepancy(points) -> float:
    return math.sqrt(max(l2_discrepancy_sq(points), 0.0))


# -- optimal transport energy --------------------------------------------------


def _trapezoid_parts(p: float, q: float):
    """CDF-inverse and partial moments of ``p U + q V`` (``p >= q >= 0``)."""
    if q < 1e-9 * p:
        quant = lambda u: p * u
        m1 = lambda z: z * z / (2 * p)
        m2 = lambda z: z ** 3 / (3 * p)
        return quant, m1, m2

    pq = p * q

    def quant(u):
        u = np.asarray(u, dtype=np.float64)
        lo = np.sqrt(2 * pq * np.clip(u, 0, None))
        mid = p * u + q / 2
        hi = p + q - np.sqrt(2 * pq * np.clip(1 - u, 0, None))
        return np.where(u <= q / (2 * p), lo, np.where(u <= 1 - q / (2 * p), mid, hi))

    def _hi(z, k):
        # integral of w^k (p + q - w) / pq from p to z
        s = p + q
        f = lambda w: (s * w ** (k + 1) / (k + 1) - w ** (k + 2) / (k + 2)) / pq
        return f(z) - f(p)

    m1p = q * q / (3 * p) + (p * p - q * q) / (2 * p)
    m2p = q ** 3 / (4 * p) + (p ** 3 - q ** 3) / (3 * p)

    def m1(z):
        z = np.asarray(z, dtype=np.float64)
        return np.where(z <= q, z ** 3 / (3 * pq),
                        np.where(z <= p, q * q / (3 * p) + (z * z - q * q) / (2 * p), m1p + _hi(z, 1)))

    def m2(z):
        z = np.asarray(z, dtype=np.float64)
        return np.where(z <= q, z ** 4 / (4 * pq),
                        np.where(z <= p, q ** 3 / (4 * p) + (z ** 3 - q ** 3) / (3 * p), m2p + _hi(z, 2)))

    return quant, m1, m2


def _w2_to_projected_uniform(t: np.ndarray, theta: float) -> float:
    c, s = math.cos(theta), math.sin(theta)
    a, b = abs(c), abs(s)
    shift = min(c, 0.0) + min(s, 0.0)
    p, q = max(a, b), min(a, b)
    quant, m1, m2 = _trapezoid_parts(p, q)
    z = np.sort(t - shift)
    n = z.size
    edges = quant(np.arange(n + 1) / n)
    edges[0], edges[-1] = 0.0, p + q
    d1 = np.diff(m1(edges))
    d2 = np.diff(m2(edges))
    return float(np.sum(z * z / n - 2 * z * d1 + d2))


def sliced_ot_energy(points, directions: int = 64, rng: SeededRng | None = None) -> float:
    """Mean squared W2 between 1-D projections of the set and of the uniform square."""
    xy = _xy(points)
    rng = rng or SeededRng(_SLICE_SEED)
    thetas = rng.uniform(directions) * math.pi
    vals = [_w2_to_projected_uniform(xy @ np.array([math.cos(th), math.sin(th)]), th) for th in thetas]
    return float(np.mean(vals))


def _jitter_refs(m: int, rng: SeededRng) -> np.ndarray:
    a = max(d for d in range(1, math.isqrt(m) + 1) if m % d == 0)
    b = m // a
    j, i = np.divmod(np.arange(m), a)
    u = rng.uniform((m, 2))
    return np.stack([(i + u[:, 0]) / a, (j + u[:, 1]) / b], axis=1)


def exact_ot_energy(points, refs_per_point: int = 64, rng: SeededRng | None = None, neighbors: int = 24) -> float:
    """Discrete proxy of the semi-discrete OT energy.

    ``refs_per_point * n`` jittered-stratified reference points are matched
    to the samples, each sample receiving exactly ``refs_per_point`` of
    them, minimizing total squared distance; returns cost per reference.
    The transport LP is solved exactly with HiGHS on a sparse candidate edge
    set, grown until every reduced cost of the full problem is non-negative.
    """
    xy = _xy(points)
    n = xy.shape[0]
    m = refs_per_point * n
    refs = _jitter_refs(m, rng or SeededRng(_SLICE_SEED, 1))
    cost = ((xy[:, None, :] - refs[None, :, :]) ** 2).sum(-1)
    if n == 1:
        return float(cost.mean())
    b_eq = np.r_[np.full(n, float(refs_per_point)), np.ones(m)]
    k = min(n, neighbors)
    while True:
        res = _transport_lp(cost, b_eq, _candidate_edges(cost, k, refs_per_point))
        if res is not None:
            return res
        if k == n:
            raise NumericError("transport LP infeasible on the dense edge set")
        k = min(n, 2 * k)


def _candidate_edges(cost: np.ndarray, k: int, refs_per_point: int) -> np.ndarray:
    """Boolean ``(n, m)`` mask: the ``k`` nearest samples of every reference
    plus the ``2 * refs_per_point`` nearest references of every sample."""
    n, m = cost.shape
    have = np.zeros((n, m), dtype=bool)
    rows = np.argpartition(cost, k - 1, axis=0)[:k] if k < n else np.broadcast_to(np.arange(n)[:, None], (n, m))
    have[rows, np.broadcast_to(np.arange(m), rows.shape)] = True
    r = min(m, 2 * refs_per_point)
    cols = np.argpartition(cost, r - 1, axis=1)[:, :r] if r < m else np.broadcast_to(np.arange(m), (n, m))
    have[np.broadcast_to(np.arange(n)[:, None], cols.shape), cols] = True
    return have


def _transport_lp(cost: np.ndarray, b_eq: np.ndarray, have: np.ndarray) -> float | None:
    """Column generation over the edge mask; ``None`` if the restricted LP is infeasible."""
    n, m = cost.shape
    for _ in range(50):
        rows, cols = np.nonzero(have)
        e = rows.size
        ones = np.ones(e)
        a_eq = sp.vstack([
            sp.csr_matrix((ones, (rows, np.arange(e))), shape=(n, e)),
            sp.csr_matrix((ones, (cols, np.arange(e))), shape=(m, e)),
        ]).tocsc()
        res = linprog(cost[rows, cols], A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
        if res.status == 2:
            return None
        if res.status != 0:
            raise NumericError(f"transport LP failed: {res.message}")
        u = res.eqlin.marginals[:n]
        v = res.eqlin.marginals[n:]
        viol = (cost - u[:, None] - v[None, :] < -1e-10) & ~have
        if not viol.any():
            return float(res.fun) / m
        have |= viol
    raise NumericError("transport LP column generation did not converge")


def ot_energy(points, mode: str = "sliced", **kw) -> float:
    """OT energy to the uniform square: ``"sliced"`` (default) or ``"exact_small"`` (n <= 256)."""
    if mode == "sliced":
        return sliced_ot_energy(points, **kw)
    if mode == "exact_small":
        if _xy(points).shape[0] > 256:
            raise ValueError("exact_small OT energy is limited to n <= 256")
        return exact_ot_energy(points, **kw)
    raise ValueError(f"unknown OT mode {mode!r}")


# -- spectra -------------------------------------------------------------------

RADIAL_BIN_WIDTH = 0.0625
RADIAL_BIN_COUNT = 79  # centers 0.0625 .. 4.9375


@dataclass(frozen=True)
class SpectrumGrid:
    """Mean periodogram ``values[iy, ix]`` at integer frequencies ``i - R/2``."""

    values: np.ndarray
    count: int
    n: int

    @property
    def R(self) -> int:
        return self.values.shape[0]

    def frequencies(self) -> np.ndarray:
        return np.arange(self.R) - self.R // 2


@dataclass(frozen=True)
class RadialSpectrum:
    centers: np.ndarray
    power: np.ndarray  # NaN where an annulus is empty or not fully inside the grid
    counts: np.ndarray


def power_spectrum(pointsets: Iterable, R: int = 128) -> SpectrumGrid:
    """Average of ``|sum_j exp(-2 pi i f.x_j)|^2 / n`` over the given sets."""
    if R % 2:
        raise ValueError("R must be even")
    f = np.arange(R) - R // 2
    acc = np.zeros((R, R))
    count = 0
    n_ref = None
    for ps in pointsets:
        xy = _xy(ps)
        n = xy.shape[0]
        if n_ref is None:
            n_ref = n
        elif n != n_ref:
            raise ValueError("all point sets must have the same size")
        ex = np.exp(-2j * np.pi * np.outer(xy[:, 0], f))
        ey = np.exp(-2j * np.pi * np.outer(xy[:, 1], f))
        s = ey.T @ ex
        acc += (s.real ** 2 + s.imag ** 2) / n
        count += 1
    if not count:
        raise ValueError("no point sets")
    return SpectrumGrid(acc / count, count, n_ref)


def radial_mean(grid: SpectrumGrid, n: int | None = None) -> RadialSpectrum:
    """Annular means over ``nu = |f| / sqrt(n)`` in bins ``(c - w/2, c + w/2]``."""
    n = grid.n if n is None else n
    f = grid.frequencies()
    fx, fy = np.meshgrid(f, f)
    nu = np.hypot(fx, fy) / math.sqrt(n)
    k = np.ceil(nu / RADIAL_BIN_WIDTH - 0.5).astype(np.int64)
    valid = (nu > 0) & (k >= 1) & (k <= RADIAL_BIN_COUNT)
    sums = np.bincount(k[valid], grid.values[valid], minlength=RADIAL_BIN_COUNT + 1)[1:]
    counts = np.bincount(k[valid], minlength=RADIAL_BIN_COUNT + 1)[1:]
    centers = RADIAL_BIN_WIDTH * np.arange(1, RADIAL_BIN_COUNT + 1)
    outer = (centers + RADIAL_BIN_WIDTH / 2) * math.sqrt(n)
    with np.errstate(invalid="ignore", divide="ignore"):
        power = np.where((counts > 0) & (outer <= grid.R // 2), sums / np.maximum(counts, 1), np.nan)
    return RadialSpectrum(centers, power, counts)


# -- spacing -------------------------------------------------------------------


def min_distance(points) -> float:
    """Smallest Euclidean (non-toroidal) distance between two samples."""
    xy = _xy(points)
    if xy.shape[0] < 2:
        raise ValueError("needs >= 2 points")
    _, idx = cKDTree(xy).query(xy, k=2)
    d = xy[idx[:, 1]] - xy
    return float(np.min(np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1])))


# -- integration error ---------------------------------------------------------


def _gauss_legendre_panels(panels: int = 64, order: int = 16) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(order)
    a = np.arange(panels)[:, None] / panels
    nodes = (a + (x[None, :] + 1) / (2 * panels)).ravel()
    weights = np.tile(w / (2 * panels), panels)
    return nodes, weights


@dataclass(frozen=True)
class GaussianIntegrands:
    """Anisotropic unnormalized Gaussians ``exp(-|R(p - c)|^2_Sigma / 2)``.

    Centers are uniform in the square, orientations uniform in ``[0, pi)``,
    major standard deviation uniform in ``[0.1, 0.333]`` and aspect ratio
    uniform in ``[1, 9]``.
    """

    centers: np.ndarray
    angles: np.ndarray
    sig_major: np.ndarray
    sig_minor: np.ndarray

    @classmethod
    def random(cls, k: int, rng: SeededRng | None = None) -> "GaussianIntegrands":
        rng = rng or SeededRng(_INTEGRAND_SEED)
        c = rng.uniform((k, 2))
        ang = rng.uniform(k) * math.pi
        major = 0.1 + rng.uniform(k) * (0.333 - 0.1)
        ratio = 1.0 + rng.uniform(k) * 8.0
        return cls(c, ang, major, major / ratio)

    def __len__(self) -> int:
        return len(self.angles)

    def _quadratic(self, power: float = 1.0):
        c, s = np.cos(self.angles), np.sin(self.angles)
        i1, i2 = 1 / self.sig_major ** 2, 1 / self.sig_minor ** 2
        a = (c * c * i1 + s * s * i2) * power
        b = (c * s * (i1 - i2)) * power
        cc = (s * s * i1 + c * c * i2) * power
        return a, b, cc

    def values(self, points) -> np.ndarray:
        """``(K, n)`` integrand values at the points."""
        xy = _xy(points)
        a, b, c = self._quadratic()
        dx = xy[None, :, 0] - self.centers[:, 0:1]
        dy = xy[None, :, 1] - self.centers[:, 1:2]
        return np.exp(-0.5 * (a[:, None] * dx * dx + 2 * b[:, None] * dx * dy + c[:, None] * dy * dy))

    def integrals(self, power: float = 1.0) -> np.ndarray:
        """Integrals of ``g**power`` over the unit square.

        The inner integral over y is closed form (erf); the outer one uses
        64-panel, 16-point Gauss-Legendre quadrature.
        """
        a, b, c = self._quadratic(power)
        xs, w = _gauss_legendre_panels()
        dx = xs[None, :] - self.centers[:, 0:1]
        a_, b_, c_ = a[:, None], b[:, None], c[:, None]
        # complete the square in dy: c (dy + b dx / c)^2 + (a - b^2/c) dx^2
        m = b_ * dx / c_
        k = np.sqrt(c_ / 2)
        y0 = -self.centers[:, 1:2]
        y1 = 1.0 - self.centers[:, 1:2]
        inner = np.sqrt(np.pi / (2 * c_)) * (erf(k * (y1 + m)) - erf(k * (y0 + m)))
        outer = np.exp(-0.5 * (a_ - b_ * b_ / c_) * dx * dx) * inner
        return outer @ w

    def variances(self) -> np.ndarray:
        """``Var g(U)`` for ``U`` uniform on the square."""
        return self.integrals(2.0) - self.integrals(1.0) ** 2


@dataclass(frozen=True)
class HeavisideIntegrands:
    """Indicators of random half-planes ``(p - q) . u >= 0``."""

    anchors: np.ndarray
    normals: np.ndarray

    @classmethod
    def random(cls, k: int, rng: SeededRng | None = None) -> "HeavisideIntegrands":
        rng = rng or SeededRng(_INTEGRAND_SEED, 1)
        q = rng.uniform((k, 2))
        phi = rng.uniform(k) * 2 * math.pi
        return cls(q, np.stack([np.cos(phi), np.sin(phi)], axis=1))

    def __len__(self) -> int:
        return len(self.normals)

    def values(self, points) -> np.ndarray:
        xy = _xy(points)
        side = xy @ self.normals.T - (self.anchors * self.normals).sum(1)[None, :]
        return (side >= 0).T.astype(np.float64)

    def integrals(self) -> np.ndarray:
        """Exact area of the unit square clipped by each half-plane."""
        out = np.empty(len(self))
        for i, (q, u) in enumerate(zip(self.anchors, self.normals)):
            out[i] = _clipped_square_area(q, u)
        return out


def _clipped_square_area(q: np.ndarray, u: np.ndarray) -> float:
    poly = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]
    h = lambda p: (p[0] - q[0]) * u[0] + (p[1] - q[1]) * u[1]
    out = []
    for i in range(4):
        p0, p1 = poly[i], poly[(i + 1) % 4]
        h0, h1 = h(p0), h(p1)
        if h0 >= 0:
            out.append(p0)
        if (h0 >= 0) != (h1 >= 0):
            t = h0 / (h0 - h1)
            out.append((p0[0] + t * (p1[0] - p0[0]), p0[1] + t * (p1[1] - p0[1])))
    if len(out) < 3:
        return 0.0
    xs = np.array([p[0] for p in out])
    ys = np.array([p[1] for p in out])
    return float(0.5 * abs(np.dot(xs, np.roll(ys, -1)) - np.dot(ys, np.roll(xs, -1))))


def integration_errors(points, integrands) -> np.ndarray:
    """Per-integrand signed error of the plain Monte Carlo estimate."""
    return integrands.values(points).mean(axis=1) - integrands.integrals()


def gaussian_mse(points, K: int = 1024, rng: SeededRng | None = None,
                 integrands: GaussianIntegrands | None = None) -> float:
    integrands = integrands or GaussianIntegrands.random(K, rng)
    return float(np.mean(integration_errors(points, integrands) ** 2))


def heaviside_mse(points, K: int = 1024, rng: SeededRng | None = None,
                  integrands: HeavisideIntegrands | None = None) -> float:
    integrands = integrands or HeavisideIntegrands.random(K, rng)
    return float(np.mean(integration_errors(points, integrands) ** 2))


# -- non-uniform densities -------------------------------------------------------


def density_match(pointsets: Iterable, density: DensitySpec, bins: int = 32, marginal: str | None = None) -> float:
    """L1 distance between the pooled histogram and the density's cell masses.

    The histogram is ``bins x bins`` by default; ``marginal="x"`` or ``"y"``
    compares the ``bins``-cell histogram of that coordinate alone.
    """
    xy = np.concatenate([_xy(p) for p in pointsets])
    mass = density.cell_masses(bins)  # [y, x]
    if marginal is None:
        h, _, _ = np.histogram2d(xy[:, 1], xy[:, 0], bins=bins, range=[[0, 1], [0, 1]])
    elif marginal in ("x", "y"):
        axis = 0 if marginal == "x" else 1
        h, _ = np.histogram(xy[:, axis], bins=bins, range=(0, 1))
        mass = mass.sum(axis=axis)
    else:
        raise ValueError(f"marginal must be None, 'x' or 'y', got {marginal!r}")
    return float(np.abs(h / h.sum() - mass).sum())


def _ramp_slope(density: DensitySpec) -> float:
    if density.kind == "uniform":
        return 0.0
    if density.kind == "linear_ramp":
        return float(density.slope)
    raise ValueError(f"unwarping is only available for uniform and linear_ramp densities, not {density.kind!r}")


def unwarp(points, density: DensitySpec) -> PointSet:
    """Map density-distributed points to uniform ones through the x-marginal CDF."""
    a = _ramp_slope(density)
    xy = _xy(points).copy()
    x = xy[:, 0]
    xy[:, 0] = x + 0.5 * a * (x * x - x)
    return PointSet(np.minimum(xy, np.nextafter(1.0, 0.0)))


def warp(points, density: DensitySpec) -> PointSet:
    """Inverse of :func:`unwarp`: uniform points to density-distributed points."""
    a = _ramp_slope(density)
    xy = _xy(points).copy()
    u = xy[:, 0]
    h = 1.0 - 0.5 * a
    xy[:, 0] = 2 * u / (h + np.sqrt(h * h + 2 * a * u)) if a else u
    return PointSet(np.minimum(xy, np.nextafter(1.0, 0.0)))


# -- batch evaluation ------------------------------------------------------------

QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


def _metric_fns(K: int):
    gi = GaussianIntegrands.random(K)
    hi = HeavisideIntegrands.random(K)
    return {
        "discrepancy": l2_discrepancy,
        "ot_energy": sliced_ot_energy,
        "min_dist": min_distance,
        "gaussian_mse": lambda p: gaussian_mse(p, integrands=gi),
        "heaviside_mse": lambda p: heaviside_mse(p, integrands=hi),
    }


METRICS = ("discrepancy", "ot_energy", "min_dist", "gaussian_mse", "heaviside_mse")


@dataclass
class MetricReport:
    """Per-set scalar metrics (``values[name][i]`` for set ``i``)."""

    values: dict[str, np.ndarray] = field(default_factory=dict)

    def mean(self, name: str) -> float:
        return float(np.mean(self.values[name]))

    def quantiles(self, name: str) -> dict[float, float]:
        q = np.quantile(self.values[name], QUANTILES)
        return dict(zip(QUANTILES, map(float, q)))


def evaluate(pointsets: Sequence, metrics: Sequence[str] = METRICS, K: int = 1024) -> MetricReport:
    fns = _metric_fns(K)
    unknown = [m for m in metrics if m not in fns]
    if unknown:
        raise ValueError(f"unknown metrics {unknown}; choose from {list(fns)}")
    report = MetricReport()
    for name in metrics:
        vals = np.array([fns[name](p) for p in pointsets], dtype=np.float64)
        if not np.all(np.isfinite(vals)):
            raise NumericError(f"metric {name} produced non-finite values")
        report.values[name] = vals
    return report


def violin_export(groups: Mapping[str, Sequence[float]], path: str | os.PathLike) -> None:
    """CSV rows ``group,stat,value``: raw values then the 5/25/50/75/95% quantiles."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "stat", "value"])
        for label, vals in groups.items():
            vals = np.asarray(vals, dtype=np.float64)
            for v in vals:
                w.writerow([label, "raw", repr(float(v))])
            for q, v in zip(QUANTILES, np.quantile(vals, QUANTILES)):
                w.writerow([label, f"q{round(q * 100):02d}", repr(float(v))])


def read_violin(path: str | os.PathLike) -> dict[str, dict[str, list[float]]]:
    out: dict[str, dict[str, list[float]]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["group"], {}).setdefault(row["stat"], []).append(float(row["value"]))
    return out
