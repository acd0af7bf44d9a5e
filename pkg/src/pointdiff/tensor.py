"""Differentiable array primitives used by the denoiser.

The heavy lifting (storage, tape, reverse-mode gradients) is delegated to
torch's autograd; this module pins down the exact primitive set the U-Net is
allowed to use, their conventions (circular padding unless zeros are
requested, 8-group norm, single-head unpositioned attention), shape checking with errors that
name the primitive, a functional Adam, and the ``PFWT`` weights format.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .core import DataError

__all__ = [
    "ShapeError",
    "set_precision",
    "default_dtype",
    "as_tensor",
    "add",
    "mul",
    "scale",
    "matmul",
    "conv2d",
    "conv2d_stride2",
    "upsample_nearest2x",
    "group_norm",
    "silu",
    "softmax",
    "self_attention",
    "linear",
    "reshape",
    "concat_channels",
    "backward",
    "AdamState",
    "adam_step",
    "save_weights",
    "load_weights",
]

Tensor = torch.Tensor

_DTYPES = {"single": torch.float32, "double": torch.float64}
_precision = "single"


class ShapeError(ValueError):
    pass


def set_precision(name: str) -> None:
    """Select the global working precision, ``"single"`` or ``"double"``."""
    global _precision
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}")
    _precision = name


def default_dtype() -> torch.dtype:
    return _DTYPES[_precision]


def as_tensor(a, requires_grad: bool = False, dtype: torch.dtype | None = None) -> Tensor:
    t = torch.as_tensor(np.asarray(a), dtype=dtype or default_dtype())
    if requires_grad:
        t = t.clone().requires_grad_(True)
    return t


def _check(cond: bool, op: str, msg: str) -> None:
    if not cond:
        raise ShapeError(f"{op}: {msg}")


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(f"add: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast") from None
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(f"mul: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast") from None
    return a * b


def scale(a: Tensor, c: float) -> Tensor:
    return a * c


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.dim() >= 2 and b.dim() >= 2, "matmul", "operands must be at least 2-d")
    _check(a.shape[-1] == b.shape[-2], "matmul", f"inner dims differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def _pad_circular(x: Tensor, p: int) -> Tensor:
    x = torch.cat([x[..., -p:, :], x, x[..., :p, :]], dim=-2)
    return torch.cat([x[..., -p:], x, x[..., :p]], dim=-1)


def _conv_checks(op: str, x: Tensor, w: Tensor, b: Tensor | None) -> None:
    _check(x.dim() == 4, op, f"input must be (B, C, H, W), got {tuple(x.shape)}")
    _check(w.dim() == 4 and w.shape[2] == w.shape[3], op, f"kernel must be (O, I, k, k), got {tuple(w.shape)}")
    _check(w.shape[1] == x.shape[1], op, f"kernel expects {w.shape[1]} input channels, got {x.shape[1]}")
    _check(b is None or b.shape == (w.shape[0],), op, "bias length must equal output channels")


PADDINGS = ("circular", "zeros")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: str = "circular") -> Tensor:
    """Stride-1 convolution with circular (toroidal) or zero padding; odd kernels keep H, W."""
    _conv_checks("conv2d", x, w, b)
    _check(padding in PADDINGS, "conv2d", f"padding must be one of {PADDINGS}, got {padding!r}")
    k = w.shape[-1]
    _check(k % 2 == 1, "conv2d", f"kernel size must be odd, got {k}")
    p = k // 2
    if padding == "zeros":
        return F.conv2d(x, w, b, padding=p)
    if p:
        x = _pad_circular(x, p)
    return F.conv2d(x, w, b)


def conv2d_stride2(x: Tensor, w: Tensor, b: Tensor | None = None, padding: str = "circular") -> Tensor:
    """3x3 stride-2 convolution halving H and W."""
    _conv_checks("conv2d_stride2", x, w, b)
    _check(padding in PADDINGS, "conv2d_stride2", f"padding must be one of {PADDINGS}, got {padding!r}")
    _check(w.shape[-1] == 3, "conv2d_stride2", "kernel must be 3x3")
    _check(x.shape[2] % 2 == 0 and x.shape[3] % 2 == 0, "conv2d_stride2", f"spatial dims must be even, got {tuple(x.shape[2:])}")
    if padding == "zeros":
        return F.conv2d(x, w, b, stride=2, padding=1)
    return F.conv2d(_pad_circular(x, 1), w, b, stride=2)


def upsample_nearest2x(x: Tensor) -> Tensor:
    _check(x.dim() == 4, "upsample_nearest2x", f"input must be (B, C, H, W), got {tuple(x.shape)}")
    return x.repeat_interleave(2, dim=2).repeat_interleave(2, dim=3)


def group_norm(x: Tensor, groups: int, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    _check(x.dim() >= 2, "group_norm", "input must have a channel axis")
    _check(x.shape[1] % groups == 0, "group_norm", f"{x.shape[1]} channels not divisible into {groups} groups")
    return F.group_norm(x, groups, weight, bias, eps)


def silu(x: Tensor) -> Tensor:
    return F.silu(x)


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    return torch.softmax(x, dim=dim)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    _check(w.dim() == 2, "linear", f"weight must be 2-d, got {tuple(w.shape)}")
    _check(x.shape[-1] == w.shape[1], "linear", f"input features {x.shape[-1]} != weight in-features {w.shape[1]}")
    return F.linear(x, w, b)


def reshape(x: Tensor, shape: Iterable[int]) -> Tensor:
    shape = tuple(shape)
    try:
        return x.reshape(shape)
    except RuntimeError:
        raise ShapeError(f"reshape: cannot view {tuple(x.shape)} as {shape}") from None


def concat_channels(*xs: Tensor) -> Tensor:
    _check(len(xs) > 0, "concat_channels", "nothing to concatenate")
    ref = xs[0].shape
    for x in xs[1:]:
        _check(x.dim() == len(ref) and x.shape[0] == ref[0] and x.shape[2:] == ref[2:],
               "concat_channels", f"shapes {tuple(ref)} and {tuple(x.shape)} differ outside the channel axis")
    return torch.cat(xs, dim=1)


def self_attention(x: Tensor, wq: Tensor, bq: Tensor, wk: Tensor, bk: Tensor, wv: Tensor, bv: Tensor) -> Tensor:
    """Single-head dot-product attention over the flattened spatial positions.

    No positional encoding is added, so the result is equivariant to any
    permutation of positions (in particular toroidal shifts).
    """
    _check(x.dim() == 4, "self_attention", f"input must be (B, C, H, W), got {tuple(x.shape)}")
    bsz, c, h, w = x.shape
    tokens = x.reshape(bsz, c, h * w).transpose(1, 2)  # B, HW, C
    q = linear(tokens, wq, bq) * (1.0 / math.sqrt(wq.shape[0]))
    k = linear(tokens, wk, bk)
    v = linear(tokens, wv, bv)
    att = softmax(q @ k.transpose(1, 2), dim=-1)
    out = att @ v
    return out.transpose(1, 2).reshape(bsz, v.shape[-1], h, w)


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, Tensor]:
    """Backpropagate a scalar loss; return gradients of the given leaves.

    Gradients accumulate into ``.grad`` across repeated calls, as with any
    tape-based engine; callers zero them between steps.
    """
    if loss.numel() != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {tuple(loss.shape)}")
    loss.backward()
    if params is None:
        return {}
    return {
        name: (p.grad if p.grad is not None else torch.zeros_like(p))
        for name, p in params.items()
    }


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)


@torch.no_grad()
def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, Tensor], state: AdamState) -> None:
    """In-place Adam update with bias correction."""
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape:
            raise ShapeError(f"adam_step: moment shape {tuple(m.shape)} != parameter {name} {tuple(p.shape)}")
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        denom = (v / c2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / c1)


# -- PFWT weights format -----------------------------------------------------
#
#   b"PFWT" | u16 version | u32 header length | header (UTF-8 JSON)
#   u32 tensor count, then per tensor:
#   u16 name length | name | u8 ndim | u32 * ndim dims | f32 LE data

PFWT_MAGIC = b"PFWT"
PFWT_VERSION = 1


def save_weights(path: str | os.PathLike, tensors: Mapping[str, Tensor | np.ndarray], header: dict | None = None) -> None:
    head = json.dumps(header or {}, sort_keys=True).encode()
    chunks = [PFWT_MAGIC, struct.pack("<HI", PFWT_VERSION, len(head)), head, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        arr = np.ascontiguousarray(arr, dtype="<f4")
        key = name.encode()
        chunks.append(struct.pack("<HB", len(key), arr.ndim) + key)
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != PFWT_MAGIC:
        raise DataError(f"{path}: not a PFWT weights file")
    version, hlen = struct.unpack_from("<HI", buf, 4)
    if version != PFWT_VERSION:
        raise DataError(f"{path}: unsupported PFWT version {version}")
    off = 10
    header = json.loads(buf[off:off + hlen].decode())
    off += hlen
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        klen, ndim = struct.unpack_from("<HB", buf, off)
        off += 3
        name = buf[off:off + klen].decode()
        off += klen
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = math.prod(shape)
        out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape).copy()
        off += 4 * size
    if off != len(buf):
        raise DataError(f"{path}: trailing bytes in PFWT file")
    return out, header
