"""Reference samplers: Sobol'+Owen, rank-1 lattices, Poisson disk, jitter, white noise.

All samplers are pure functions of their parameters and a :class:`SeededRng`
and return :class:`PointSet` objects in ``[0, 1)^2``. Optimization-based
samplers (SOT, GBN, LDBN, LatNetBuilder) are not generated here; their
output is imported with :func:`pointdiff.core.read_pointset`.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .core import DataError, PointSet, SeededRng, wrap_points
from .density import DensitySpec

__all__ = [
    "SOBOL_BITS",
    "sobol_matrices",
    "sobol_points",
    "owen_scramble",
    "sobol_owen",
    "FIBONACCI_GENERATORS",
    "rank1_lattice",
    "PackingInfeasible",
    "poisson_disk",
    "toroidal_min_distance",
    "stratified_jitter",
    "whitenoise",
    "DensityBoundTooLoose",
    "rejection_sample",
    "SAMPLERS",
    "get_sampler",
]

SOBOL_BITS = 32


def sobol_matrices(bits: int = SOBOL_BITS) -> np.ndarray:
    """Direction numbers ``v[d, k]`` (as ``bits``-bit integers) for the first two dimensions.

    Dimension 1 is the van der Corput sequence. Dimension 2 uses the
    Joe-Kuo entry for the primitive polynomial ``x + 1`` with ``m_1 = 1``,
    whose recurrence ``m_k = 2 m_{k-1} xor m_{k-1}`` yields Pascal's
    triangle mod 2.
    """
    v = np.zeros((2, bits), dtype=np.uint64)
    m = 1
    for k in range(1, bits + 1):
        v[0, k - 1] = 1 << (bits - k)
        if k > 1:
            m = (m << 1) ^ m
        v[1, k - 1] = m << (bits - k)
    return v


def sobol_points(n: int, bits: int = SOBOL_BITS) -> np.ndarray:
    """First ``n`` unscrambled points as ``(n, 2)`` integers in Gray-code order."""
    i = np.arange(n, dtype=np.uint64)
    g = i ^ (i >> np.uint64(1))
    v = sobol_matrices(bits)
    out = np.zeros((n, 2), dtype=np.uint64)
    for k in range(bits):
        mask = ((g >> np.uint64(k)) & np.uint64(1)).astype(bool)
        out[mask] ^= v[:, k]
    return out


def _mix64(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def owen_scramble(values: np.ndarray, key: int, bits: int = SOBOL_BITS) -> np.ndarray:
    """Nested uniform scramble of ``bits``-bit integers.

    The flip applied to digit ``d`` is a hash of ``(key, d, leading d
    digits)``, i.e. a lazily evaluated random binary tree of depth ``bits``.
    """
    x = np.asarray(values, dtype=np.uint64)
    out = np.zeros_like(x)
    k = np.uint64(key)
    with np.errstate(over="ignore"):
        for d in range(bits):
            shift = np.uint64(bits - 1 - d)
            digit = (x >> shift) & np.uint64(1)
            prefix = x >> np.uint64(bits - d) if d else np.zeros_like(x)
            node = _mix64(k ^ _mix64(prefix ^ (np.uint64(d + 1) << np.uint64(56))))
            flip = node >> np.uint64(63)
            out |= (digit ^ flip) << shift
    return out


def sobol_owen(n: int, rng: SeededRng | None = None, scramble: bool = True) -> PointSet:
    """First ``n`` Sobol' points, Owen-scrambled per axis unless ``scramble`` is off."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ints = sobol_points(n)
    if scramble:
        if rng is None:
            raise ValueError("scrambling needs an rng")
        keys = rng.bits64(2)
        ints = np.stack([owen_scramble(ints[:, a], int(keys[a])) for a in range(2)], axis=1)
    return PointSet(ints.astype(np.float64) / float(1 << SOBOL_BITS))


_FIB = [1, 1, 2, 3, 5, 8, 13, 21, 34, 55, 89, 144, 233, 377, 610, 987, 1597, 2584, 4181, 6765, 10946]
FIBONACCI_GENERATORS: dict[int, tuple[int, int]] = {_FIB[k]: (1, _FIB[k - 1]) for k in range(2, len(_FIB))}


def _default_generator(n: int) -> tuple[int, int]:
    if n in FIBONACCI_GENERATORS:
        return FIBONACCI_GENERATORS[n]
    # golden-ratio stand-in for non-Fibonacci sizes, nudged to be coprime with n
    g = max(1, round(n / ((1 + math.sqrt(5)) / 2)))
    while math.gcd(g, n) != 1:
        g += 1
    return (1, g % n if n > 1 else 0)


def rank1_lattice(n: int, g: tuple[int, int] | None = None, shift=(0.0, 0.0)) -> PointSet:
    """Points ``wrap(shift + i g / n)``, ``i < n``; ``g`` defaults to a Fibonacci generator."""
    if n < 1:
        raise ValueError("n must be >= 1")
    gx, gy = g if g is not None else _default_generator(n)
    i = np.arange(n, dtype=np.int64)
    base = np.stack([(i * gx) % n, (i * gy) % n], axis=1) / n
    return PointSet(wrap_points(base + np.asarray(shift, dtype=np.float64)))


class PackingInfeasible(RuntimeError):
    pass


def toroidal_min_distance(xy: np.ndarray) -> float:
    xy = np.asarray(xy)
    if len(xy) < 2:
        return math.inf
    d = np.abs(xy[:, None, :] - xy[None, :, :])
    d = np.minimum(d, 1.0 - d)
    r2 = (d ** 2).sum(-1)
    np.fill_diagonal(r2, np.inf)
    return float(np.sqrt(r2.min()))


def _dart_throw(n: int, r: float, rng: SeededRng, budget: int, chunk: int = 4096) -> np.ndarray | None:
    acc = np.empty((n, 2))
    m = 0
    tried = 0
    r2 = r * r
    while tried < budget:
        size = min(chunk, budget - tried)
        cand = rng.uniform((size, 2))
        tried += size
        if m:
            d = np.abs(cand[:, None, :] - acc[None, :m, :])
            d = np.minimum(d, 1.0 - d)
            ok = ((d ** 2).sum(-1) >= r2).all(axis=1)
            cand = cand[ok]
        for c in cand:
            if m:
                d = np.abs(acc[:m] - c)
                d = np.minimum(d, 1.0 - d)
                if ((d ** 2).sum(-1) < r2).any():
                    continue
            acc[m] = c
            m += 1
            if m == n:
                return acc
    return None


def poisson_disk(
    n_target: int,
    rng: SeededRng,
    gamma: float = 0.68,
    attempts_per_point: int = 10_000,
    shrink: float = 0.95,
    max_reductions: int = 20,
) -> tuple[PointSet, float]:
    """Dart throwing on the torus; returns the point set and its final radius.

    Starts from ``r = gamma / sqrt(n)``. If ``attempts_per_point * n``
    candidates do not yield ``n`` points, ``r`` shrinks by ``shrink`` and
    throwing restarts from scratch.
    """
    if n_target < 1:
        raise ValueError("n_target must be >= 1")
    r = gamma / math.sqrt(n_target)
    for attempt in range(max_reductions + 1):
        pts = _dart_throw(n_target, r, rng.spawn(attempt), attempts_per_point * n_target)
        if pts is not None:
            return PointSet.wrapped(pts), r
        r *= shrink
    raise PackingInfeasible("packing infeasible")


def stratified_jitter(n: int, rng: SeededRng) -> PointSet:
    """One uniform point in each cell of the ``sqrt(n) x sqrt(n)`` grid."""
    s = math.isqrt(n)
    if n < 1 or s * s != n:
        raise ValueError(f"stratified sampling needs a perfect square, got {n}")
    j, i = np.divmod(np.arange(n), s)
    u = rng.uniform((n, 2))
    xy = np.stack([(i + u[:, 0]) / s, (j + u[:, 1]) / s], axis=1)
    return PointSet.wrapped(xy)


def whitenoise(n: int, rng: SeededRng) -> PointSet:
    if n < 1:
        raise ValueError("n must be >= 1")
    return PointSet(rng.uniform((n, 2)))


class DensityBoundTooLoose(RuntimeError):
    pass


def _candidate_size(base: str, n: int) -> int:
    if base == "stratified":
        s = math.isqrt(n)
        return s * s if s * s == n else (s + 1) ** 2
    return n


def rejection_sample(
    base: str | Callable[[int, SeededRng], PointSet],
    density: DensitySpec,
    n: int,
    rng: SeededRng,
    min_rate: float = 1e-4,
    rate_window: int = 1_000_000,
) -> PointSet:
    """Thin candidates from repeated base realizations, keeping ``p`` w.p. ``f(p)/M``.

    Accepted points keep their base order. Surplus acceptances of the last
    realization are dropped at random rather than from its tail, since
    ordered bases (row-major strata, lattices) would otherwise bias the
    output toward the start of their ordering. Realization ``r`` uses stream
    ``rng.spawn(r, 0)``, its acceptance draws ``rng.spawn(r, 1)``, and the
    surplus choice ``rng.spawn(r, 2)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if isinstance(base, str):
        fn = get_sampler(base)
        m = _candidate_size(base, n)
    else:
        fn, m = base, n
    bound = float(density.bound)
    out: list[np.ndarray] = []
    got = 0
    seen = 0
    r = 0
    while got < n:
        cand = np.asarray(fn(m, rng.spawn(r, 0)))
        u = rng.spawn(r, 1).uniform(len(cand))
        keep = cand[u * bound < density(cand[:, 0], cand[:, 1])]
        if got + len(keep) > n:
            drop = rng.spawn(r, 2).permutation(len(keep))[: got + len(keep) - n]
            keep = np.delete(keep, drop, axis=0)
        out.append(keep)
        got += len(keep)
        seen += len(cand)
        r += 1
        if seen >= rate_window and got < min_rate * seen:
            raise DensityBoundTooLoose(f"density bound too loose: acceptance {got}/{seen}")
    return PointSet(np.concatenate(out))


def _poisson_points(n: int, rng: SeededRng) -> PointSet:
    return poisson_disk(n, rng)[0]


SAMPLERS: dict[str, Callable[[int, SeededRng], PointSet]] = {
    "whitenoise": whitenoise,
    "stratified": stratified_jitter,
    "sobol": sobol_owen,
    "poisson": _poisson_points,
    "rank1": lambda n, rng: rank1_lattice(n, shift=rng.uniform(2)),
}


def get_sampler(name: str) -> Callable[[int, SeededRng], PointSet]:
    try:
        return SAMPLERS[name]
    except KeyError:
        raise DataError(f"unknown sampler {name!r}; choose from {sorted(SAMPLERS)}") from None
