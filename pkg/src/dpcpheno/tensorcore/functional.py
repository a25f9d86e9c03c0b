"""Differentiable operations.

Every function accepts tensors (or array-likes, treated as constants) and
returns a new :class:`Tensor`. Backward closures return one gradient per
parent, already reduced to the parent's shape.
"""
from __future__ import annotations

import math

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor, make_node

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# -- elementwise arithmetic ---------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.value + b.value, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.value - b.value, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.value, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.value, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.value * b.value, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.value / b.value

    def backward(g):
        ga = _unbroadcast(g / b.value, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.value, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return make_node(-a.value, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.value ** exponent

    def backward(g):
        return (g * exponent * a.value ** (exponent - 1),)

    return make_node(out, (a,), backward, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return make_node(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.value)
    return make_node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only where the input is inside."""
    inside = (a.value >= lo) & (a.value <= hi)
    out = np.clip(a.value, lo, hi)
    return make_node(out, (a,), lambda g: (g * inside,), "clip")


def sigmoid(a: Tensor) -> Tensor:
    # tanh form saturates to exactly 0/1 without overflow warnings
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU.

    ``gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x**3)))``.
    Gradients are exact for this formula (not for the erf form).
    """
    x = a.value
    dt = np.asarray(GELU_C, dtype=x.dtype)
    k = np.asarray(GELU_K, dtype=x.dtype)
    x2 = x * x
    t = x2 * k
    t += 1
    t *= x
    t *= dt
    np.tanh(t, out=t)
    half = t + 1
    half *= 0.5
    out = half * x
    # derivative 0.5(1+t) + 0.5 x (1-t^2) c (1+3k x^2), formed in place while the temporaries are live
    deriv = x2
    deriv *= 3 * k
    deriv += 1
    deriv *= dt
    deriv *= x
    deriv *= 0.5
    t *= t
    np.subtract(1, t, out=t)
    deriv *= t
    deriv += half

    def backward(g):
        return (g * deriv,)

    return make_node(out, (a,), backward, "gelu")


def smooth_l1(a: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise SmoothL1 of a difference tensor with transition ``beta``."""
    d = a.value
    ad = np.abs(d)
    small = ad < beta
    out = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta)

    def backward(g):
        return (g * np.where(small, d / beta, np.sign(d)),)

    return make_node(out, (a,), backward, "smooth_l1")


# -- reductions and shape ------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    out = a.value.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return make_node(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = a.value.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return make_node(out, (a,), backward, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.value.reshape(shape)
    return make_node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def flatten(a: Tensor, start_axis: int = 1) -> Tensor:
    return reshape(a, a.shape[:start_axis] + (-1,))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    out = a.value.transpose(axes)
    return make_node(out, (a,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None))) or i is Ellipsis for i in items)


def getitem(a: Tensor, index) -> Tensor:
    out = a.value[index]
    basic = _is_basic_index(index)

    def backward(g):
        ga = np.zeros_like(a.value)
        if basic:
            ga[index] = g
        else:
            np.add.at(ga, index, g)
        return (ga,)

    return make_node(out, (a,), backward, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    dtype = next((t.dtype for t in tensors if t.requires_grad), tensors[0].dtype)
    values = [t.value.astype(dtype, copy=False) for t in tensors]
    ref = values[0].shape
    ax = axis % len(ref)
    for v in values[1:]:
        if v.ndim != len(ref) or any(v.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat along axis {ax}: shapes {ref} and {v.shape} differ off-axis")
    out = np.concatenate(values, axis=ax)
    splits = np.cumsum([v.shape[ax] for v in values])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return make_node(out, tuple(tensors), backward, "concat")


# -- linear algebra ------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs ndim >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner axes differ: a axis -1 = {a.shape[-1]}, b axis -2 = {b.shape[-2]}"
        )
    out = a.value @ b.value

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ weight.T + bias``; weight is [dout, din]."""
    x = as_tensor(x)
    if weight.ndim != 2:
        raise DimensionError(f"linear weight must be 2-D, got {weight.shape}")
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"linear: input axis -1 = {x.shape[-1]} but weight axis 1 = {weight.shape[1]}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.value @ weight.value.T
    if bias is not None:
        out = out + bias.value
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ weight.value) if x.requires_grad else None
        gw = g2.T @ x.value.reshape(-1, x.shape[-1]) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_node(out, parents, backward, "linear")


def _im2col(xv: np.ndarray, kh: int, kw: int, stride: int, ph: int, pw: int):
    """NCHW input -> [B, C*kh*kw, Ho*Wo] patch stack, row order (C, kh, kw)."""
    B, C, H, W = xv.shape
    Ho = (H + 2 * ph - kh) // stride + 1
    Wo = (W + 2 * pw - kw) // stride + 1
    if ph or pw:
        xp = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=xv.dtype)
        xp[:, :, ph:ph + H, pw:pw + W] = xv
    else:
        xp = xv
    # one strided slice copy per kernel tap; floor semantics drop rows/cols that do not fit a full stride
    cols = np.empty((B, C, kh, kw, Ho, Wo), dtype=xv.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride]
    return cols.reshape(B, C * kh * kw, Ho * Wo), Ho, Wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input with weight [Cout, Cin, kh, kw].

    Output size per spatial axis is ``(H + 2*padding - k) // stride + 1``.
    """
    x = as_tensor(x)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    Co, Ci, kh, kw = weight.shape
    if C != Ci:
        raise DimensionError(f"conv2d: input axis 1 (channels) = {C} but weight axis 1 = {Ci}")
    if stride < 1 or kh < 1 or kw < 1 or padding < 0:
        raise DimensionError(f"conv2d: invalid stride={stride}, kernel=({kh},{kw}), padding={padding}")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise DimensionError(
            f"conv2d: axes 2,3 ({H},{W}) with padding {padding} are smaller than kernel ({kh},{kw})"
        )
    if bias is not None and bias.shape != (Co,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({Co},)")

    cols, Ho, Wo = _im2col(x.value, kh, kw, stride, padding, padding)
    wm = weight.value.reshape(Co, -1)
    out = np.matmul(wm, cols).reshape(B, Co, Ho, Wo)
    if bias is not None:
        out += bias.value.reshape(1, Co, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)
    # the transposed correlation reads kh*kw*Co rows, the scatter path kh*kw*C; take the narrower
    transposed = stride == 1 and padding <= min(kh, kw) - 1 and Co <= C

    def backward(g):
        gm = g.reshape(B, Co, Ho * Wo)
        gw = None
        if weight.requires_grad:
            gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(Co, C, kh, kw)
        gx = None
        if x.requires_grad:
            if transposed:
                # full correlation of the output gradient with the flipped kernel
                gcols, _, _ = _im2col(g, kh, kw, 1, kh - 1 - padding, kw - 1 - padding)
                wf = weight.value[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(C, -1)
                gx = np.matmul(wf, gcols).reshape(B, C, H, W)
            else:
                dcols = np.matmul(wm.T, gm).reshape(B, C, kh, kw, Ho, Wo)
                dxp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, :, i, j]
                gx = dxp[:, :, padding:padding + H, padding:padding + W]
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=(0, 2))

    return make_node(out, parents, backward, "conv2d")


# -- normalisation and stochastic ops ------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (a,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gain`` and add ``shift``."""
    x = as_tensor(x)
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise DimensionError(f"layer_norm: gain/shift {gain.shape}/{shift.shape} do not match axis -1 = {d}")
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.value + shift.value

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gs = g.sum(axis=lead) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gain.value
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gs

    return make_node(out, (x, gain, shift), backward, "layer_norm")


def batch_norm(
    x: Tensor,
    gain: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation of [B, C, ...] input.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, as is conventional). In eval mode
    the running statistics are used and the op is affine in ``x``.
    """
    x = as_tensor(x)
    C = x.shape[1]
    if gain.shape != (C,) or shift.shape != (C,):
        raise DimensionError(f"batch_norm: gain/shift shape must be ({C},), got {gain.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    n = x.value.size // C
    if training:
        mu = x.value.mean(axis=axes)
        xc = x.value - mu.reshape(bshape)
        var = (xc * xc).mean(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * n / max(n - 1, 1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)
        xc = x.value - mu.reshape(bshape)
    inv = (1.0 / np.sqrt(var + eps)).reshape(bshape)
    xhat = xc * inv
    out = xhat * gain.value.reshape(bshape) + shift.value.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes) if gain.requires_grad else None
        gs = g.sum(axis=axes) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gain.value.reshape(bshape)
            if training:
                gx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                            - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
            else:
                gx = dxhat * inv
        return gx, gg, gs

    return make_node(out, (x, gain, shift), backward, "batch_norm")


def dropout(x: Tensor, p: float, rng, training: bool) -> Tensor:
    """Inverted dropout: zero with probability ``p``, rescale survivors by 1/(1-p).

    Identity when not training or ``p == 0``.
    """
    if not training or p <= 0.0:
        return x
    if p >= 1.0:
        raise ValueError("dropout probability must be < 1")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return make_node(x.value * keep, (x,), lambda g: (g * keep,), "dropout")


# -- composites ------------------------------------------------------------

def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over every axis after the channel axis: [B, C, ...] -> [B, C]."""
    return mean(x, axis=tuple(range(2, x.ndim)))


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention per head on [B, h, T, dh] operands."""
    if q.shape != k.shape or k.shape[:-1] != v.shape[:-1]:
        raise DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} do not conform")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = matmul(q, swap_last(k)) * scale
    return matmul(softmax(scores, axis=-1), v)


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    scale = 1.0 / math.sqrt(q.shape[-1])
    return softmax(matmul(q, swap_last(k)) * scale, axis=-1)
