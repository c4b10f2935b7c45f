"""Differentiable operators.

The set is deliberately small: dense linear algebra, elementwise maths, the
masked softmax family, layer normalization, a mask-aware 1-D convolution over
the token axis, masked reductions and L2 normalization. Each operator returns
a new :class:`Tensor` whose backward closure produces exact gradients.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import DTYPE, MASK_VALUE, Tensor, as_tensor

_GELU_C = np.sqrt(2.0 / np.pi)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def mask_to_additive(mask: np.ndarray) -> np.ndarray:
    """0/1 validity mask -> additive logit mask (0 where valid, MASK_VALUE where not)."""
    return (1.0 - np.asarray(mask, dtype=DTYPE)) * MASK_VALUE


# --------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return Tensor.from_op(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return Tensor.from_op(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return Tensor.from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a, c: float) -> Tensor:
    a = as_tensor(a)
    return Tensor.from_op(a.data + float(c), (a,), lambda g: (g,), "add_scalar")


# --------------------------------------------------------------------------
# elementwise unary


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return Tensor.from_op(out, (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor.from_op(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor.from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return Tensor.from_op(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    th = x2 * 0.044715
    th += 1.0
    th *= x
    th *= _GELU_C
    np.tanh(th, out=th)
    out = th + 1.0
    out *= x
    out *= 0.5

    def bw(g):
        # d/dx = 0.5(1+th) + 0.5 x (1-th^2) C (1 + 3*0.044715 x^2)
        d = x2 * (3 * 0.044715)
        d += 1.0
        d *= _GELU_C
        d *= x
        sech2 = th * th
        np.subtract(1.0, sech2, out=sech2)
        d *= sech2
        d += th
        d += 1.0
        d *= 0.5
        d *= g
        return (d,)

    return Tensor.from_op(out, (a,), bw, "gelu")


# --------------------------------------------------------------------------
# shape


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor.from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(a) -> Tensor:
    nd = as_tensor(a).ndim
    axes = list(range(nd))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(items: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in items]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return parts

    return Tensor.from_op(np.concatenate([t.data for t in ts], axis=axis), ts, bw, "concat")


def take(a, index: np.ndarray, axis: int = 0) -> Tensor:
    """Gather along ``axis`` (duplicates allowed; gradients accumulate)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (out,)

    return Tensor.from_op(np.take(a.data, index, axis=axis), (a,), bw, "take")


# --------------------------------------------------------------------------
# reductions


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor.from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def masked_sum(x, mask: np.ndarray, axis: int = -2) -> Tensor:
    """Sum of ``x`` weighted by a constant 0/1 ``mask`` broadcast along trailing dims."""
    x = as_tensor(x)
    w = np.asarray(mask, dtype=DTYPE)[..., None]
    return sum(mul(x, w), axis=axis)


def masked_mean(x, mask: np.ndarray, eps: float = 1e-8) -> Tensor:
    """``sum_i m_i x_i / (sum_i m_i + eps)`` over the token axis of a (..., S, d) tensor."""
    x = as_tensor(x)
    m = np.asarray(mask, dtype=DTYPE)
    denom = m.sum(axis=-1, keepdims=True) + eps  # (..., 1)
    w = (m / denom)[..., None]  # (..., S, 1)
    out = np.einsum("...s,...sd->...d", w[..., 0], x.data)
    return Tensor.from_op(out, (x,), lambda g: (w * g[..., None, :],), "masked_mean")


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul shape mismatch {ad.shape} @ {bd.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return Tensor.from_op(ad @ bd, (a, b), bw, "matmul")


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` for x (..., k), w (k, p), b (p,) as a single node."""
    if b is None:
        return matmul(x, w)
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    xd, wd = x.data, w.data
    if wd.ndim != 2 or xd.shape[-1] != wd.shape[0] or b.shape != (wd.shape[1],):
        raise ValueError(f"linear shape mismatch x{xd.shape} w{wd.shape} b{b.shape}")
    out = xd @ wd
    out += b.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2 if w.requires_grad else None
        return gx, gw, g2.sum(axis=0)

    return Tensor.from_op(out, (x, w, b), bw, "linear")


# --------------------------------------------------------------------------
# normalisation / softmax family


def softmax(x, mask_add: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Softmax of ``x + mask_add`` along ``axis``; masked entries get exactly 0."""
    x = as_tensor(x)
    z = x.data if mask_add is None else x.data + mask_add
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (x,), bw, "softmax")


def log_softmax(x, mask_add: np.ndarray | None = None, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data if mask_add is None else x.data + mask_add
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(out, (x,), bw, "log_softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        gxhat = g * gd
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor.from_op(xhat * gd + beta.data, (x, gamma, beta), bw, "layer_norm")


def l2_normalize(x, eps: float = 1e-24) -> Tensor:
    """Unit-norm rows along the last axis."""
    x = as_tensor(x)
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=-1, keepdims=True) + eps)
    out = xd / n

    def bw(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / n,)

    return Tensor.from_op(out, (x,), bw, "l2_normalize")


# --------------------------------------------------------------------------
# token-axis convolution


def conv1d_tokens(x, weight, bias, mask: np.ndarray) -> Tensor:
    """Mask-aware 'same' convolution along the token axis.

    ``x`` is (B, S, C_in), ``weight`` is (k, C_in, C_out) with odd k. Invalid
    neighbours contribute zero and each output is rescaled by
    ``k / (#valid taps)`` so the kernel magnitude does not depend on how many
    neighbours were masked out.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    k = weight.shape[0]
    if k % 2 != 1:
        raise ValueError("conv kernel width must be odd")
    B, S, _ = x.shape
    c = k // 2
    m = np.asarray(mask, dtype=DTYPE)
    mpad = np.pad(m, ((0, 0), (c, c)))
    counts = np.zeros_like(m)
    for j in range(k):
        counts += mpad[:, j:j + S]
    sc = np.where(counts > 0, k / np.maximum(counts, 1.0), 0.0)[..., None]  # (B, S, 1)
    xm = x.data * m[..., None]
    xpad = np.pad(xm, ((0, 0), (c, c), (0, 0)))
    wd = weight.data
    acc = np.zeros((B, S, wd.shape[2]), dtype=DTYPE)
    for j in range(k):
        acc += xpad[:, j:j + S] @ wd[j]
    out = acc * sc + bias.data

    def bw(g):
        gs = g * sc
        gw = np.empty_like(wd)
        gxpad = np.zeros_like(xpad)
        flat_g = gs.reshape(-1, gs.shape[-1])
        for j in range(k):
            win = xpad[:, j:j + S]
            gw[j] = win.reshape(-1, win.shape[-1]).T @ flat_g
            gxpad[:, j:j + S] += gs @ wd[j].T
        gx = gxpad[:, c:c + S] * m[..., None]
        return gx, gw, g.sum(axis=(0, 1))

    return Tensor.from_op(out, (x, weight, bias), bw, "conv1d_tokens")
