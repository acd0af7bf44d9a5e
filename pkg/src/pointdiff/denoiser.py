"""Size-agnostic U-Net noise predictor over offset grids.

Weight shapes depend only on :class:`UNetConfig`, never on the grid side, so
one network can be trained and evaluated on several grid sizes. With the
default circular padding and attention without positional encoding the
network commutes with toroidal shifts that are multiples of the total
downsampling factor.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import tensor as T
from .core import SeededRng

__all__ = ["UNetConfig", "UNet", "time_embedding", "forward", "count_parameters"]


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 3
    base_channels: int = 32
    channel_mult: tuple[int, ...] = (1, 2, 2)
    time_embed_dim: int = 128
    groups: int = 8
    padding: str = "circular"
    # fixed by design, exposed read-only for serialization
    attention: bool = field(default=True, init=False)
    resblocks: int = field(default=2, init=False)

    def __post_init__(self) -> None:
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if len(self.channel_mult) != self.levels:
            raise ValueError(f"channel_mult needs {self.levels} entries, got {len(self.channel_mult)}")
        for c in self.widths:
            if c % self.groups:
                raise ValueError(f"width {c} not divisible by {self.groups} norm groups")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if self.padding not in ("circular", "zeros"):
            raise ValueError(f"padding must be 'circular' or 'zeros', got {self.padding!r}")

    @property
    def widths(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_mult]

    @property
    def factor(self) -> int:
        """Total downsampling factor; grid sides must be multiples of it."""
        return 2 ** (self.levels - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        d.pop("attention")
        d.pop("resblocks")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        d = dict(d)
        d["channel_mult"] = tuple(d["channel_mult"])
        return cls(**d)


def time_embedding(t, dim: int) -> torch.Tensor:
    """Sinusoidal step embedding: ``dim/2`` sines then ``dim/2`` cosines.

    Angular frequencies form a geometric ladder from 1 down to 1e-4.
    """
    t = torch.as_tensor(t, dtype=T.default_dtype()).reshape(-1)
    half = dim // 2
    if half > 1:
        ladder = torch.arange(half, dtype=torch.float64) / (half - 1)
    else:
        ladder = torch.zeros(1, dtype=torch.float64)
    freqs = torch.exp(-math.log(1e4) * ladder).to(t.dtype)
    ang = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class _Conv(nn.Module):
    def __init__(self, cin: int, cout: int, k: int, padding: str, stride: int = 1):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(cout, cin, k, k))
        self.bias = nn.Parameter(torch.empty(cout))
        self.padding = padding
        self.stride = stride

    def forward(self, x):
        if self.stride == 2:
            return T.conv2d_stride2(x, self.weight, self.bias, self.padding)
        return T.conv2d(x, self.weight, self.bias, self.padding)


class _Linear(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(cout, cin))
        self.bias = nn.Parameter(torch.empty(cout))

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class _Norm(nn.Module):
    def __init__(self, ch: int, groups: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(ch))
        self.bias = nn.Parameter(torch.zeros(ch))
        self.groups = groups

    def forward(self, x):
        return T.group_norm(x, self.groups, self.weight, self.bias)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int, cfg: UNetConfig):
        super().__init__()
        self.norm1 = _Norm(cin, cfg.groups)
        self.conv1 = _Conv(cin, cout, 3, cfg.padding)
        self.temb = _Linear(tdim, cout)
        self.norm2 = _Norm(cout, cfg.groups)
        self.conv2 = _Conv(cout, cout, 3, cfg.padding)
        self.skip = _Conv(cin, cout, 1, cfg.padding) if cin != cout else None

    def forward(self, x, temb):
        h = self.conv1(T.silu(self.norm1(x)))
        h = T.add(h, self.temb(T.silu(temb))[:, :, None, None])
        h = self.conv2(T.silu(self.norm2(h)))
        return T.add(h, x if self.skip is None else self.skip(x))


class AttnBlock(nn.Module):
    def __init__(self, ch: int, cfg: UNetConfig):
        super().__init__()
        self.norm = _Norm(ch, cfg.groups)
        self.q = _Linear(ch, ch)
        self.k = _Linear(ch, ch)
        self.v = _Linear(ch, ch)
        self.proj = _Conv(ch, ch, 1, cfg.padding)

    def forward(self, x):
        h = self.norm(x)
        h = T.self_attention(h, self.q.weight, self.q.bias, self.k.weight, self.k.bias, self.v.weight, self.v.bias)
        return T.add(x, self.proj(h))


class UNet(nn.Module):
    """Noise predictor ``eps(x_t, t)`` for ``(B, 2, s, s)`` offset fields."""

    def __init__(self, config: UNetConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = self.config = config or UNetConfig()
        td = cfg.time_embed_dim
        w = cfg.widths
        self.temb1 = _Linear(td, td)
        self.temb2 = _Linear(td, td)
        self.inc = _Conv(2, w[0], 3, cfg.padding)

        self.down = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsample = nn.ModuleList()
        ch = w[0]
        for lvl in range(cfg.levels):
            for _ in range(cfg.resblocks):
                self.down.append(ResBlock(ch, w[lvl], td, cfg))
                self.down_attn.append(AttnBlock(w[lvl], cfg))
                ch = w[lvl]
            if lvl < cfg.levels - 1:
                self.downsample.append(_Conv(ch, ch, 3, cfg.padding, stride=2))

        self.mid1 = ResBlock(ch, ch, td, cfg)
        self.mid_attn = AttnBlock(ch, cfg)
        self.mid2 = ResBlock(ch, ch, td, cfg)

        self.up = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for lvl in reversed(range(cfg.levels)):
            for _ in range(cfg.resblocks):
                # skip features are concatenated, the block's first conv reduces width
                self.up.append(ResBlock(ch + w[lvl], w[lvl], td, cfg))
                self.up_attn.append(AttnBlock(w[lvl], cfg))
                ch = w[lvl]
            if lvl > 0:
                self.upsample.append(_Conv(ch, ch, 3, cfg.padding))

        self.out_norm = _Norm(ch, cfg.groups)
        self.out = _Conv(ch, 2, 3, cfg.padding)
        self.reset_parameters(seed)

    @torch.no_grad()
    def reset_parameters(self, seed: int = 0) -> None:
        """Fan-in uniform init drawn from a platform-stable stream."""
        rng = SeededRng(seed, 0x5EED)
        for mod in self.modules():
            if isinstance(mod, _Norm):
                mod.weight.fill_(1.0)
                mod.bias.zero_()
            elif isinstance(mod, (_Conv, _Linear)):
                bound = 1.0 / math.sqrt(mod.weight[0].numel())
                for p in (mod.weight, mod.bias):
                    p.copy_(torch.from_numpy(rng.uniform(p.shape) * 2.0 - 1.0) * bound)

    def check_side(self, s: int) -> None:
        f = self.config.factor
        if s < f or s % f:
            raise ValueError(
                f"grid side {s} is not a multiple of {f} (required by {self.config.levels} levels); "
                f"use e.g. {max(f, (s // f) * f)} or {(s // f + 1) * f}"
            )

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x[None]
        if x.dim() != 4 or x.shape[1] != 2 or x.shape[2] != x.shape[3]:
            raise T.ShapeError(f"UNet: expected (B, 2, s, s) input, got {tuple(x.shape)}")
        self.check_side(x.shape[-1])
        t = torch.as_tensor(t, dtype=x.dtype).reshape(-1)
        if t.numel() == 1:
            t = t.expand(x.shape[0])
        emb = time_embedding(t, self.config.time_embed_dim).to(x.dtype)
        emb = self.temb2(T.silu(self.temb1(emb)))

        h = self.inc(x)
        skips = []
        i = 0
        for lvl in range(self.config.levels):
            for _ in range(self.config.resblocks):
                h = self.down_attn[i](self.down[i](h, emb))
                skips.append(h)
                i += 1
            if lvl < self.config.levels - 1:
                h = self.downsample[lvl](h)

        h = self.mid2(self.mid_attn(self.mid1(h, emb)), emb)

        i = 0
        for j, lvl in enumerate(reversed(range(self.config.levels))):
            for _ in range(self.config.resblocks):
                h = self.up_attn[i](self.up[i](T.concat_channels(h, skips.pop()), emb))
                i += 1
            if lvl > 0:
                h = self.upsample[j](T.upsample_nearest2x(h))

        out = self.out(T.silu(self.out_norm(h)))
        return out[0] if squeeze else out

    # -- persistence -----------------------------------------------------------

    def save(self, path: str | os.PathLike, extra: dict | None = None, tensors: dict | None = None) -> None:
        header = {"unet": self.config.to_dict(), **(extra or {})}
        named = dict(self.state_dict())
        named.update(tensors or {})
        T.save_weights(path, named, header)

    @classmethod
    def load(cls, path: str | os.PathLike) -> tuple["UNet", dict, dict]:
        """Return ``(model, header, extra_tensors)`` from a PFWT file."""
        arrays, header = T.load_weights(path)
        model = cls(UNetConfig.from_dict(header["unet"]))
        own = model.state_dict()
        with torch.no_grad():
            for k in own:
                own[k].copy_(torch.from_numpy(arrays.pop(k)))
        return model, header, arrays


def forward(weights: UNet, field: torch.Tensor, t) -> torch.Tensor:
    """Predicted noise for a ``(2, s, s)`` or ``(B, 2, s, s)`` field at step ``t``."""
    return weights(field, t)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
