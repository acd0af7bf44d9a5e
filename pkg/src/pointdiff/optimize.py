"""Post-optimization of generated point sets through the frozen reverse chain.

The trained weights and the per-step noise realization are held fixed, which
makes the reverse chain a deterministic differentiable map from the initial
Gaussian field to a point set. Adam then descends the squared L2 discrepancy
of that point set with respect to the initial field.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch

from . import tensor as T
from .core import NumericError, PointSet, SeededRng
from .diffusion import Schedule, reverse_chain
from .transport import escape_rate, strata_centers, unembed

__all__ = ["OptimizeConfig", "OptimizeResult", "warnock_d2", "chain_points", "optimize_input"]

OBJECTIVES = ("l2_discrepancy",)


@dataclass(frozen=True)
class OptimizeConfig:
    steps: int = 100
    iterations: int = 200
    lr: float = 0.02
    seed: int = 0
    objective: str = "l2_discrepancy"
    divergence_factor: float = 10.0

    def __post_init__(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}; choose from {list(OBJECTIVES)}")
        if self.steps < 1 or self.iterations < 0:
            raise ValueError("steps must be >= 1 and iterations >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimizeResult:
    before: PointSet
    after: PointSet
    trajectory: list[float]
    best_iteration: int
    escape_before: float
    escape_after: float
    stopped_early: bool = False
    initial_field: np.ndarray = field(repr=False, default=None)


def _max_first(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # gradient goes to the larger argument, ties to ``a``
    return torch.where(a >= b, a, b)


def warnock_d2(p: torch.Tensor) -> torch.Tensor:
    """Differentiable squared L2 discrepancy of an ``(n, 2)`` tensor."""
    n = p.shape[0]
    term1 = torch.prod((1.0 - p ** 2) / 2.0, dim=1).sum()
    mx = _max_first(p[:, None, 0], p[None, :, 0])
    my = _max_first(p[:, None, 1], p[None, :, 1])
    cross = ((1.0 - mx) * (1.0 - my)).sum()
    return 1.0 / 9.0 - (2.0 / n) * term1 + cross / n ** 2


def chain_points(
    model: Callable,
    x: torch.Tensor,
    schedule: Schedule,
    noises: list,
    steps: int,
    data_scale: float = 1.0,
    data_offset: tuple[float, float] = (0.0, 0.0),
) -> tuple[torch.Tensor, torch.Tensor]:
    """Reverse chain then differentiable unembed; returns ``(field, points)``.

    ``x`` is ``(1, 2, s, s)``. The wrap into the unit square is applied in
    the forward pass and treated as the identity in the backward pass.
    """
    s = x.shape[-1]
    shift = torch.tensor(data_offset, dtype=x.dtype)[:, None, None]
    fld = reverse_chain(model, x, schedule, noises=noises, steps=steps) / data_scale + shift
    off = fld[0].permute(1, 2, 0).reshape(-1, 2)
    c = torch.tensor(strata_centers(s).points, dtype=x.dtype)
    p = c + off / s
    return fld, p - torch.floor(p).detach()


def optimize_input(
    model: torch.nn.Module,
    s: int,
    config: OptimizeConfig,
    schedule: Schedule,
    data_scale: float = 1.0,
    progress: Callable[[int, float], None] | None = None,
    data_offset: tuple[float, float] = (0.0, 0.0),
) -> OptimizeResult:
    """Minimize the generated set's D^2 over the initial field with Adam.

    Returns the unoptimized and best-iterate point sets together with the
    objective at every evaluated iterate (index 0 is the unoptimized one).
    Stops early once the objective exceeds ``divergence_factor`` times its
    initial value.
    """
    if config.steps > schedule.T:
        raise ValueError(f"steps={config.steps} exceeds trained T={schedule.T}")
    if hasattr(model, "check_side"):
        model.check_side(s)
    dtype = next(model.parameters()).dtype
    rng = SeededRng(config.seed, 0x0971)
    x = torch.from_numpy(rng.spawn(0).normal((1, 2, s, s))).to(dtype).requires_grad_(True)
    n_steps = len(schedule.timesteps(config.steps))
    noises = [
        torch.from_numpy(rng.spawn(1, k).normal((1, 2, s, s))).to(dtype) if k + 1 < n_steps else None
        for k in range(n_steps)
    ]
    x_init = x.detach().clone()

    frozen = [(p, p.requires_grad) for p in model.parameters()]
    for p, _ in frozen:
        p.requires_grad_(False)
    adam = T.AdamState(lr=config.lr)
    trajectory: list[float] = []
    best = (math.inf, -1, None)
    first_field = None
    stopped = False
    try:
        for it in range(config.iterations + 1):
            fld, pts = chain_points(model, x, schedule, noises, config.steps, data_scale, data_offset)
            obj = warnock_d2(pts)
            val = float(obj.detach())
            if not math.isfinite(val):
                raise NumericError(f"non-finite objective at iteration {it}; escape rate {escape_rate(_np_field(fld)):.3f}")
            trajectory.append(val)
            if progress is not None:
                progress(it, val)
            if first_field is None:
                first_field = _np_field(fld)
            if val < best[0]:
                best = (val, it, _np_field(fld))
            if val > config.divergence_factor * trajectory[0]:
                stopped = True
                break
            if it == config.iterations:
                break
            x.grad = None
            grads = T.backward(obj, {"x": x})
            T.adam_step({"x": x}, grads, adam)
    finally:
        for p, flag in frozen:
            p.requires_grad_(flag)
    return OptimizeResult(
        before=unembed(first_field),
        after=unembed(best[2]),
        trajectory=trajectory,
        best_iteration=best[1],
        escape_before=escape_rate(first_field),
        escape_after=escape_rate(best[2]),
        stopped_early=stopped,
        initial_field=x_init[0].permute(1, 2, 0).double().numpy(),
    )


def _np_field(fld: torch.Tensor) -> np.ndarray:
    return fld.detach()[0].permute(1, 2, 0).double().numpy()
