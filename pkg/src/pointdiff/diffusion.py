"""Constant-variance DDPM over offset grids: schedule, noising, training, sampling."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch
from torch import nn

from . import tensor as T
from .core import NumericError, SeededRng
from .denoiser import UNet, UNetConfig

log = logging.getLogger(__name__)

__all__ = [
    "Schedule",
    "TrainConfig",
    "q_sample",
    "train_step",
    "reverse_chain",
    "sample",
    "train",
    "load_checkpoint",
]


@dataclass(frozen=True)
class Schedule:
    """``T`` steps of constant noise variance ``beta``.

    ``alpha_bar[t] = (1 - beta)**t`` with ``alpha_bar[0] = 1``. The reverse
    update adds noise of variance ``beta`` per step; ``literal_sigma`` uses
    ``beta`` as the standard deviation instead.
    """

    T: int = 1000
    beta: float = 1e-2
    literal_sigma: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if self.T < 1:
            raise ValueError("T must be >= 1")

    @property
    def alpha(self) -> float:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return (1.0 - self.beta) ** np.arange(self.T + 1, dtype=np.float64)

    def sigma(self, beta_step: float) -> float:
        return beta_step if self.literal_sigma else math.sqrt(beta_step)

    def timesteps(self, steps: int | None = None) -> np.ndarray:
        """Decreasing step indices visited by the reverse chain.

        ``steps`` picks a uniformly strided subset ``ceil(k T / steps)``,
        ``k = steps..1``, of the trained steps.
        """
        if steps is None or steps == self.T:
            return np.arange(self.T, 0, -1)
        if not 1 <= steps <= self.T:
            raise ValueError(f"steps must be in [1, {self.T}], got {steps}")
        k = np.arange(steps, 0, -1)
        return -((-k * self.T) // steps)


def q_sample(x0, t, eps, schedule: Schedule):
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`` for a scalar or per-item ``t``."""
    ab = schedule.alpha_bar[np.asarray(t)]
    if isinstance(x0, torch.Tensor):
        ab = torch.as_tensor(ab, dtype=x0.dtype).reshape(-1, *([1] * (x0.dim() - 1))) if np.ndim(t) else float(ab)
        return (ab ** 0.5) * x0 + ((1.0 - ab) ** 0.5) * eps
    ab = ab.reshape(-1, *([1] * (np.ndim(x0) - 1))) if np.ndim(t) else ab
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def _normal(rng: SeededRng, shape, dtype) -> torch.Tensor:
    return torch.from_numpy(rng.normal(shape)).to(dtype)


def train_step(
    model: nn.Module,
    batches: Mapping[int, torch.Tensor],
    schedule: Schedule,
    rng: SeededRng,
    adam: T.AdamState,
) -> float:
    """One Adam step on the summed-over-sizes noise prediction loss.

    Each batch holds ``(B, 2, s, s)`` clean fields for one grid side. The
    per-size loss is the mean squared error over all entries, so the zero
    predictor scores 1 per size.
    """
    params = {k: p for k, p in model.named_parameters() if p.requires_grad}
    for p in params.values():
        p.grad = None
    total = 0.0
    for s in sorted(batches):
        x0 = batches[s]
        if isinstance(model, UNet):
            model.check_side(s)
        b = x0.shape[0]
        t = rng.integers(1, schedule.T + 1, b)
        eps = _normal(rng, tuple(x0.shape), x0.dtype)
        xt = q_sample(x0, t, eps, schedule)
        loss = torch.mean((model(xt, torch.as_tensor(t)) - eps) ** 2)
        if loss.requires_grad:
            T.backward(loss)
        total += float(loss.detach())
    if not math.isfinite(total):
        raise NumericError(f"non-finite training loss {total}")
    grads = {k: p.grad for k, p in params.items() if p.grad is not None}
    if grads:
        T.adam_step(params, grads, adam)
    return total


def reverse_chain(
    model: Callable,
    x: torch.Tensor,
    schedule: Schedule,
    noises: list[torch.Tensor | None] | None = None,
    rng: SeededRng | None = None,
    steps: int | None = None,
) -> torch.Tensor:
    """Run the reverse update from ``x`` (at step ``T``) down to step 0.

    Noise for each step comes from ``noises`` (one entry per visited step,
    ``None`` meaning zero) or else is drawn from ``rng``. No noise is added
    at the final step. Gradients flow through when ``x`` requires them.
    """
    taus = schedule.timesteps(steps)
    ab = schedule.alpha_bar
    for k, t in enumerate(taus):
        prev = taus[k + 1] if k + 1 < len(taus) else 0
        a = (1.0 - schedule.beta) ** (t - prev)
        b = 1.0 - a
        eps_hat = model(x, torch.full((x.shape[0],), float(t), dtype=x.dtype))
        x = (x - (b / math.sqrt(1.0 - ab[t])) * eps_hat) / math.sqrt(a)
        if prev > 0:
            if noises is not None:
                z = noises[k]
            elif rng is not None:
                z = _normal(rng, tuple(x.shape), x.dtype)
            else:
                z = None
            if z is not None:
                x = x + schedule.sigma(b) * z
    return x


@torch.no_grad()
def sample(
    model: Callable,
    s: int,
    schedule: Schedule,
    rng: SeededRng,
    count: int = 1,
    steps_override: int | None = None,
    batch: int = 64,
    data_scale: float = 1.0,
    dtype: torch.dtype | None = None,
    data_offset: tuple[float, float] = (0.0, 0.0),
) -> np.ndarray:
    """Generate ``count`` fields as a ``(count, s, s, 2)`` float64 array.

    Realization ``i`` draws from its own stream ``rng.spawn(i)``, so results
    depend on ``batch`` only through floating-point rounding. Chain outputs
    are mapped back to offsets as ``x / data_scale + data_offset``.
    """
    if isinstance(model, UNet):
        model.check_side(s)
    dtype = dtype or T.default_dtype()
    out = []
    for start in range(0, count, batch):
        idx = range(start, min(count, start + batch))
        streams = [rng.spawn(i) for i in idx]
        x = torch.stack([_normal(r, (2, s, s), dtype) for r in streams])
        taus = schedule.timesteps(steps_override)
        noises = [
            torch.stack([_normal(r, (2, s, s), dtype) for r in streams]) if k + 1 < len(taus) else None
            for k in range(len(taus))
        ]
        x0 = reverse_chain(model, x, schedule, noises=noises, steps=steps_override)
        out.append(x0.permute(0, 2, 3, 1).double().numpy() / data_scale + np.asarray(data_offset, dtype=np.float64))
    fields = np.concatenate(out)
    if not np.all(np.isfinite(fields)):
        raise NumericError("sampling produced non-finite offsets")
    return fields


# -- training loop -------------------------------------------------------------


LR_DECAYS = ("constant", "cosine")


@dataclass
class TrainConfig:
    sizes: tuple[int, ...] = (8, 16, 32)
    batch_size: int = 8
    lr: float = 2e-4
    steps: int = 1000
    seed: int = 0
    checkpoint_every: int = 0
    data_scale: float = 1.0
    # per-channel (x, y) shift subtracted from offsets before scaling
    data_offset: tuple[float, float] = (0.0, 0.0)
    lr_decay: str = "constant"
    unet: UNetConfig = field(default_factory=UNetConfig)
    schedule: Schedule = field(default_factory=Schedule)

    def __post_init__(self) -> None:
        self.data_offset = tuple(float(v) for v in self.data_offset)
        if len(self.data_offset) != 2:
            raise ValueError(f"data_offset needs 2 values, got {len(self.data_offset)}")
        if self.lr_decay not in LR_DECAYS:
            raise ValueError(f"unknown lr_decay {self.lr_decay!r}; choose from {list(LR_DECAYS)}")

    def lr_at(self, step: int) -> float:
        """Learning rate for 0-based ``step``; cosine decays to zero at ``steps``."""
        if self.lr_decay == "cosine":
            return self.lr * 0.5 * (1.0 + math.cos(math.pi * step / self.steps))
        return self.lr

    def to_dict(self) -> dict:
        return {
            "sizes": list(self.sizes),
            "batch_size": self.batch_size,
            "lr": self.lr,
            "steps": self.steps,
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
            "data_scale": self.data_scale,
            "data_offset": list(self.data_offset),
            "lr_decay": self.lr_decay,
            "unet": self.unet.to_dict(),
            "schedule": asdict(self.schedule),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["sizes"] = tuple(d["sizes"])
        d["unet"] = UNetConfig.from_dict(d["unet"])
        d["schedule"] = Schedule(**d["schedule"])
        return cls(**d)


def _save_checkpoint(path: Path, model: UNet, adam: T.AdamState, cfg: TrainConfig, step: int) -> None:
    tensors = {}
    for k in adam.m:
        tensors[f"adam.m.{k}"] = adam.m[k]
        tensors[f"adam.v.{k}"] = adam.v[k]
    extra = {
        "step": step,
        "adam": {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "step": adam.step},
        "train": cfg.to_dict(),
    }
    model.save(path, extra=extra, tensors=tensors)


def load_checkpoint(path: str | os.PathLike) -> tuple[UNet, T.AdamState, TrainConfig, int]:
    model, header, extra = UNet.load(path)
    a = header.get("adam", {})
    adam = T.AdamState(**a) if a else T.AdamState()
    for k, arr in extra.items():
        kind, name = k.split(".", 2)[1:]
        getattr(adam, kind)[name] = torch.from_numpy(arr)
    cfg = TrainConfig.from_dict(header["train"]) if "train" in header else TrainConfig(unet=model.config)
    return model, adam, cfg, int(header.get("step", 0))


def _batch_for(data: np.ndarray, rng: SeededRng, b: int, scale: float, offset, dtype) -> torch.Tensor:
    idx = rng.integers(0, data.shape[0], b)
    x = (data[idx] - np.asarray(offset, dtype=np.float64)) * scale
    return torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2))).to(dtype)


def train(
    config: TrainConfig,
    data: Mapping[int, np.ndarray],
    out_dir: str | os.PathLike | None = None,
    resume: str | os.PathLike | None = None,
    stop_at: int | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> tuple[UNet, list[float]]:
    """Train a U-Net on ``(N, s, s, 2)`` offset datasets keyed by grid side.

    Step ``k`` draws its batch indices, time steps and noise from the stream
    ``SeededRng(seed, 1).spawn(k)``, so a resumed run replays exactly. With
    ``out_dir``, the loss curve goes to ``loss.csv`` and checkpoints to
    ``ckpt_<step>.pfwt`` every ``checkpoint_every`` steps plus the final
    ``weights.pfwt``.
    """
    missing = [s for s in config.sizes if s not in data]
    if missing:
        raise ValueError(f"no training data for grid sides {missing}")
    if resume is not None:
        model, adam, _, start = load_checkpoint(resume)
    else:
        model = UNet(config.unet, seed=config.seed)
        adam = T.AdamState(lr=config.lr)
        start = 0
    for s in config.sizes:
        model.check_side(s)
    dtype = T.default_dtype()
    model.to(dtype)
    for k in list(adam.m):
        adam.m[k] = adam.m[k].to(dtype)
        adam.v[k] = adam.v[k].to(dtype)
    root = SeededRng(config.seed, 1)
    end = config.steps if stop_at is None else min(stop_at, config.steps)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    losses: list[float] = []
    for step in range(start, end):
        rng = root.spawn(step)
        batches = {s: _batch_for(data[s], rng.spawn(s), config.batch_size, config.data_scale, config.data_offset, dtype) for s in config.sizes}
        adam.lr = config.lr_at(step)
        loss = train_step(model, batches, config.schedule, rng.spawn(0), adam)
        losses.append(loss)
        if progress is not None:
            progress(step + 1, loss)
        if out is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            _save_checkpoint(out / f"ckpt_{step + 1:07d}.pfwt", model, adam, config, step + 1)
    if out is not None:
        # a resume into a fresh directory starts a new file at step ``start + 1``
        mode = "a" if resume is not None and (out / "loss.csv").exists() else "w"
        with open(out / "loss.csv", mode, newline="") as fh:
            w = csv.writer(fh)
            if mode == "w":
                w.writerow(["step", "loss"])
            for i, v in enumerate(losses, start + 1):
                w.writerow([i, repr(v)])
        _save_checkpoint(out / "weights.pfwt", model, adam, config, end)
    return model, losses
