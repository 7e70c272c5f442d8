"""Differentiable layer primitives built on :mod:`s2sdrought.tensor`.

Spatial ops accept ``[C, H, W]`` or batched ``[B, C, H, W]`` inputs.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor import Tensor, as_tensor, make_result, matmul, reshape, take, transpose


class PadMode(str, enum.Enum):
    MIRROR = "mirror"
    ZERO = "zero"


def reflect_index(n: int, before: int, after: int, strict: bool = True) -> np.ndarray:
    """Source indices for reflect padding (edge sample not repeated).

    With ``strict=False`` pads wider than the extent keep reflecting back and
    forth, which equals repeated single reflections.
    """
    if strict and (before >= n or after >= n):
        raise ValueError(f"mirror pad of ({before}, {after}) needs extent > pad, got {n}")
    idx = np.arange(-before, n + after)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def pad_axes(x: Tensor, pads, axes, strict: bool = True) -> Tensor:
    """Mirror-pad ``x`` along ``axes`` by ``pads = ((before, after), ...)``."""
    for (before, after), axis in zip(pads, axes):
        if before or after:
            x = take(x, reflect_index(x.shape[axis], before, after, strict), axis=axis)
    return x


def pad2d(x: Tensor, pads, mode=PadMode.MIRROR, strict: bool = True) -> Tensor:
    """Pad the last two axes by ``pads = (top, bottom, left, right)``."""
    top, bottom, left, right = pads
    if not any(pads):
        return x
    mode = PadMode(mode)
    if mode is PadMode.MIRROR:
        return pad_axes(x, ((top, bottom), (left, right)), (-2, -1), strict)
    widths = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    h, w = x.shape[-2:]
    core = (Ellipsis, slice(top, top + h), slice(left, left + w))
    return make_result(np.pad(x.data, widths), (x,), lambda g: (g[core],))


def mirror_pad(x: Tensor, p: int) -> Tensor:
    """Reflect-pad both spatial axes by ``p`` on every side."""
    h, w = x.shape[-2:]
    if p >= h or p >= w:
        raise ValueError(f"mirror pad {p} too large for extent {(h, w)}")
    return pad2d(x, (p, p, p, p), PadMode.MIRROR)


def crop2d(x: Tensor, top: int, left: int, h: int, w: int) -> Tensor:
    index = (Ellipsis, slice(top, top + h), slice(left, left + w))
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        gx[index] = g
        return (gx,)

    return make_result(x.data[index].copy(), (x,), backward)


def same_pads(h: int, w: int, k: int, stride: int):
    """Padding giving ``ceil(n / stride)`` outputs along each axis."""
    out = []
    for n in (h, w):
        total = max((math.ceil(n / stride) - 1) * stride + k - n, 0)
        out += [total // 2, total - total // 2]
    return tuple(out)


def _batched(x: Tensor):
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"expected [C,H,W] or [B,C,H,W], got {x.shape}")
    return x, False


def _conv_core(xp: Tensor, w: Tensor, stride: int) -> Tensor:
    xd, wd = xp.data, w.data
    hp, wp = xd.shape[-2:]
    k = wd.shape[-1]

    def backward(g):
        g = np.ascontiguousarray(g)
        gx = kernels.conv_backward_input(g, wd, stride, hp, wp) if xp.requires_grad else None
        gw = kernels.conv_backward_weight(xd, g, stride, k) if w.requires_grad else None
        return gx, gw

    return make_result(kernels.conv_forward(xd, wd, stride), (xp, w), backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad=PadMode.MIRROR) -> Tensor:
    """"Same"-coverage 2-D cross-correlation: output extent is ``ceil(n / stride)``."""
    weight = as_tensor(weight)
    co, ci, k, k2 = weight.shape
    if k != k2:
        raise ValueError("only square kernels are supported")
    if stride < 1 or k < 1:
        raise ValueError("kernel size and stride must be positive")
    xb, squeeze = _batched(as_tensor(x))
    if xb.shape[1] != ci:
        raise ValueError(f"channel mismatch: input has {xb.shape[1]}, weight expects {ci}")
    h, w = xb.shape[-2:]
    xp = pad2d(xb, same_pads(h, w, k, stride), pad)
    out = _conv_core(xp, weight, stride)
    if bias is not None:
        out = out + reshape(as_tensor(bias), (1, co, 1, 1))
    return reshape(out, out.shape[1:]) if squeeze else out


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2, padding: int = 0) -> Tensor:
    """Transposed convolution; ``weight`` is ``[C_in, C_out, k, k]``.

    Output extent is ``(n - 1) * stride - 2 * padding + k``.
    """
    weight = as_tensor(weight)
    xb, squeeze = _batched(as_tensor(x))
    ci, co, k, _ = weight.shape
    if xb.shape[1] != ci:
        raise ValueError(f"channel mismatch: input has {xb.shape[1]}, weight expects {ci}")
    h, w = xb.shape[-2:]
    hf, wf = (h - 1) * stride + k, (w - 1) * stride + k
    xd, wd = xb.data, weight.data

    def backward(g):
        g = np.ascontiguousarray(g)
        gx = kernels.conv_forward(g, wd, stride) if xb.requires_grad else None
        gw = kernels.conv_backward_weight(g, xd, stride, k) if weight.requires_grad else None
        return gx, gw

    full = make_result(kernels.conv_backward_input(np.ascontiguousarray(xd), wd, stride, hf, wf), (xb, weight), backward)
    out = crop2d(full, padding, padding, hf - 2 * padding, wf - 2 * padding)
    if bias is not None:
        out = out + reshape(as_tensor(bias), (1, co, 1, 1))
    return reshape(out, out.shape[1:]) if squeeze else out


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """``out[c, r*h + i, r*w + j] = in[c*r*r + i*r + j, h, w]``."""
    *lead, c, h, w = x.shape
    if c % (r * r):
        raise ValueError(f"channel count {c} not divisible by r^2 = {r * r}")
    n = len(lead)
    y = reshape(x, (*lead, c // (r * r), r, r, h, w))
    axes = tuple(range(n)) + tuple(n + a for a in (0, 3, 1, 4, 2))
    y = transpose(y, axes)
    return reshape(y, (*lead, c // (r * r), h * r, w * r))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Exact inverse of :func:`pixel_shuffle`."""
    *lead, c, hr, wr = x.shape
    if hr % r or wr % r:
        raise ValueError(f"spatial extents {(hr, wr)} not divisible by {r}")
    h, w = hr // r, wr // r
    n = len(lead)
    y = reshape(x, (*lead, c, h, r, w, r))
    axes = tuple(range(n)) + tuple(n + a for a in (0, 2, 4, 1, 3))
    y = transpose(y, axes)
    return reshape(y, (*lead, c * r * r, h, w))


def bilinear_matrix(n: int, r: int) -> np.ndarray:
    """``[r*n, n]`` half-pixel bilinear upsampling operator; rows sum to one."""
    a = np.zeros((r * n, n))
    for o in range(r * n):
        src = min(max((o + 0.5) / r - 0.5, 0.0), n - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n - 1)
        f = src - i0
        a[o, i0] += 1.0 - f
        a[o, i1] += f
    return a


def upsample_bilinear(x: Tensor, r: int) -> Tensor:
    h, w = x.shape[-2:]
    y = matmul(x, Tensor(bilinear_matrix(w, r).T))
    return matmul(Tensor(bilinear_matrix(h, r)), y)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps) if eps > 0 else np.where(var > 0, 1.0 / np.sqrt(np.where(var > 0, var, 1.0)), 0.0)
    xhat = xc * inv
    gd = gamma.data
    reduce_axes = tuple(range(xd.ndim - 1))

    def backward(g):
        gx = gh = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=reduce_axes), g.sum(axis=reduce_axes)

    return make_result(xhat * gd + beta.data, (x, gamma, beta), backward)


def softmax(x: Tensor) -> Tensor:
    """Max-shifted softmax over the last axis."""
    x = as_tensor(x)
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_result(out, (x,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    x = as_tensor(x)
    xd = x.data
    t = np.tanh(_GELU_C * (xd + 0.044715 * xd**3))

    def backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return make_result(0.5 * xd * (1.0 + t), (x,), backward)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,))


@dataclass
class PowerIterState:
    """Persistent left/right singular-vector estimates for one weight."""

    u: np.ndarray
    v: np.ndarray

    @classmethod
    def init(cls, weight_shape, rng: np.random.Generator, weight: np.ndarray | None = None, n_iter: int = 15):
        m = weight_shape[0]
        n = int(np.prod(weight_shape[1:]))
        u = rng.normal(size=m)
        u /= np.linalg.norm(u)
        v = rng.normal(size=n)
        v /= np.linalg.norm(v)
        state = cls(u, v)
        if weight is not None:
            state.step(weight.reshape(m, n), n_iter)
        return state

    def step(self, w2d: np.ndarray, n_iter: int = 1, eps: float = 1e-12):
        for _ in range(n_iter):
            v = w2d.T @ self.u
            self.v = v / max(np.linalg.norm(v), eps)
            u = w2d @ self.v
            self.u = u / max(np.linalg.norm(u), eps)

    def sigma(self, w2d: np.ndarray) -> float:
        return float(self.u @ w2d @ self.v)


def spectral_normalize(weight: Tensor, state: PowerIterState, update: bool = True, eps: float = 1e-12) -> Tensor:
    """Divide ``weight`` by its power-iteration spectral-norm estimate.

    With ``update`` one power-iteration step refreshes ``state`` first.  The
    singular vectors are treated as constants for differentiation.
    """
    weight = as_tensor(weight)
    wd = weight.data
    w2d = wd.reshape(wd.shape[0], -1)
    if update:
        state.step(w2d)
    u, v = state.u, state.v
    sigma = state.sigma(w2d)
    if sigma < eps:

        def backward_floor(g):
            return (g / eps,)

        return make_result(wd / eps, (weight,), backward_floor)

    def backward(g):
        gs = (g * wd).sum()
        return (g / sigma - (gs / sigma**2) * np.outer(u, v).reshape(wd.shape),)

    return make_result(wd / sigma, (weight,), backward)
