"""Differentiable primitives.

Every function takes Tensors (or array-likes for constant operands) and
returns a Tensor. When a tape is active and any input requires grad, the
application is recorded together with a closure computing input gradients
from the output gradient.
"""

from __future__ import annotations

import builtins
from typing import Sequence

import numpy as np
from scipy.special import expit

from .tensor import NonFiniteError, Tensor, active_tape, as_tensor

LAYERNORM_EPS = 1e-5


def primitive(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``out`` as a Tensor and record it on the active tape if needed.

    ``backward_fn(g_out)`` must return one gradient (or None) per input.
    Extension point for ops defined outside this module (scan, stft).
    """
    out = np.asarray(out, dtype=np.float64)
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced a non-finite value")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.requires_grad = False
    t.grad = None
    t._tape = None
    tape = active_tape()
    if tape is not None and builtins.any(x.requires_grad for x in inputs):
        t.requires_grad = True
        tape.record(op, inputs, t, backward_fn)
    return t


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return primitive("add", a.data + b.data, (a, b),
                     lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return primitive("sub", a.data - b.data, (a, b),
                     lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return primitive("mul", a.data * b.data, (a, b),
                     lambda g: (unbroadcast(g * b.data, a.shape),
                                unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return unbroadcast(ga, a.shape), unbroadcast(-ga * out, b.shape)

    return primitive("div", out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return primitive("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (both operands ndim >= 2)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else unbroadcast(ga, a.shape),
                None if gb is None else unbroadcast(gb, b.shape))

    return primitive("matmul", out, (a, b), bw)


# -------------------------------------------------------------- elementwise

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return primitive("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log of nonpositive value")
    return primitive("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def log1p(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= -1):
        raise ValueError("log1p argument must exceed -1")
    return primitive("log1p", np.log1p(a.data), (a,), lambda g: (g / (1.0 + a.data),))


def expm1(a) -> Tensor:
    a = as_tensor(a)
    out = np.expm1(a.data)
    return primitive("expm1", out, (a,), lambda g: (g * (out + 1.0),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return primitive("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return primitive("softplus", out, (a,), lambda g: (g * _sigmoid(a.data),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    out = a.data * s
    return primitive("silu", out, (a,), lambda g: (g * (s + out * (1.0 - s)),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return primitive("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    return primitive("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return primitive("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise ValueError("sqrt of negative value")
    out = np.sqrt(a.data)
    return primitive("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def power(a, p: float) -> Tensor:
    """``a ** p`` for a constant exponent.

    Non-integer exponents need a >= 0, and a > 0 when p < 1 (the derivative
    is unbounded at zero).
    """
    a = as_tensor(a)
    p = float(p)
    if not p.is_integer():
        if np.any(a.data < 0) or (p < 1 and np.any(a.data == 0)):
            raise ValueError(f"power {p} outside its differentiable domain")
    out = np.power(a.data, p)
    return primitive("power", out, (a,), lambda g: (g * p * np.power(a.data, p - 1.0),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return primitive("cos", np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return primitive("sin", np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def atan2(y, x) -> Tensor:
    """Elementwise angle of (x, y) in (-pi, pi]."""
    y, x = as_tensor(y), as_tensor(x)
    out = np.arctan2(y.data, x.data)
    out = np.where(out <= -np.pi, out + 2 * np.pi, out)

    def bw(g):
        r2 = x.data * x.data + y.data * y.data
        return unbroadcast(g * x.data / r2, y.shape), unbroadcast(-g * y.data / r2, x.shape)

    return primitive("atan2", out, (y, x), bw)


# --------------------------------------------------------------- reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return primitive("sum", out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return primitive("mean", out, (a,), bw)


# ------------------------------------------------------------ shape / layout

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return primitive("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = np.argsort(axes)
    return primitive("transpose", np.transpose(a.data, axes), (a,),
                     lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return primitive("concat", out, ts, bw)


def flip(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return primitive("flip", np.flip(a.data, axis=axis).copy(), (a,),
                     lambda g: (np.flip(g, axis=axis).copy(),))


def slice(a, index) -> Tensor:  # noqa: A001
    """Basic (non-fancy) indexing."""
    a = as_tensor(a)
    parts = index if isinstance(index, tuple) else (index,)
    if builtins.any(isinstance(p, (list, np.ndarray, Tensor)) for p in parts):
        raise ValueError("slice supports basic indexing only")
    out = np.asarray(a.data[index])

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return primitive("slice", out.copy(), (a,), bw)


def pad(a, pad_width) -> Tensor:
    """Zero padding; ``pad_width`` is one (before, after) pair per axis."""
    a = as_tensor(a)
    pw = [(int(lo), int(hi)) for lo, hi in pad_width]
    if len(pw) != a.ndim:
        raise ValueError("pad_width needs one pair per axis")
    out = np.pad(a.data, pw)
    index = tuple(builtins.slice(lo, lo + n) for (lo, _), n in zip(pw, a.shape))
    return primitive("pad", out, (a,), lambda g: (g[index].copy(),))


# ------------------------------------------------------------ normalization

def layernorm(a, weight=None, bias=None, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize over the last axis, then optional affine (weight, bias)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    inputs = [a]
    out = xhat
    if weight is not None:
        weight = as_tensor(weight)
        inputs.append(weight)
        out = out * weight.data
    if bias is not None:
        bias = as_tensor(bias)
        inputs.append(bias)
        out = out + bias.data

    def bw(g):
        grads = []
        gx = g * weight.data if weight is not None else g
        gxhat_mean = gx.mean(axis=-1, keepdims=True)
        gxhat_xhat_mean = (gx * xhat).mean(axis=-1, keepdims=True)
        grads.append(inv * (gx - gxhat_mean - xhat * gxhat_xhat_mean))
        if weight is not None:
            grads.append(unbroadcast(g * xhat, weight.shape))
        if bias is not None:
            grads.append(unbroadcast(g, bias.shape))
        return tuple(grads)

    return primitive("layernorm", out, inputs, bw)


# -------------------------------------------------------------- convolution

def conv1d_depthwise_causal(x, kernel, bias=None) -> Tensor:
    """Per-channel causal convolution along time.

    x: (..., T, C); kernel: (C, K); bias: (C,). The input is left-padded by
    K-1 zeros so output length equals input length and step t only sees
    inputs at steps <= t. kernel[:, K-1] multiplies the current step.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    C, K = kernel.shape
    if x.shape[-1] != C:
        raise ValueError(f"conv1d channel mismatch: input {x.shape[-1]}, kernel {C}")
    T = x.shape[-2]
    lead = [(0, 0)] * (x.ndim - 2)
    xp = np.pad(x.data, lead + [(K - 1, 0), (0, 0)])
    out = np.zeros_like(x.data)
    for k in range(K):
        out += xp[..., k:k + T, :] * kernel.data[:, k]
    inputs = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        inputs.append(bias)

    def bw(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(kernel.data)
        for k in range(K):
            gxp[..., k:k + T, :] += g * kernel.data[:, k]
            gk[:, k] = (g * xp[..., k:k + T, :]).reshape(-1, C).sum(axis=0)
        grads = [gxp[..., K - 1:, :], gk]
        if bias is not None:
            grads.append(g.reshape(-1, C).sum(axis=0))
        return tuple(grads)

    return primitive("conv1d_depthwise_causal", out, inputs, bw)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    return (int(v[0]), int(v[1]))


def _padding(p) -> tuple[tuple[int, int], tuple[int, int]]:
    if isinstance(p, int):
        return ((p, p), (p, p))
    ph, pw = p
    ph = (ph, ph) if isinstance(ph, int) else tuple(ph)
    pw = (pw, pw) if isinstance(pw, int) else tuple(pw)
    return (ph, pw)


def _out_size(n: int, k: int, s: int, d: int) -> int:
    return (n - d * (k - 1) - 1) // s + 1


def _im2col(xp, kh, kw, stride, dilation, oh, ow):
    B, C = xp.shape[:2]
    sh, sw = stride
    dh, dw = dilation
    cols = np.empty((B, C, kh, kw, oh, ow))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i * dh:i * dh + sh * (oh - 1) + 1:sh,
                                  j * dw:j * dw + sw * (ow - 1) + 1:sw]
    return cols.reshape(B, C * kh * kw, oh * ow)


def _col2im(cols, xshape, kh, kw, stride, dilation, oh, ow):
    B, C = xshape[:2]
    sh, sw = stride
    dh, dw = dilation
    cols = cols.reshape(B, C, kh, kw, oh, ow)
    gx = np.zeros(xshape)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i * dh:i * dh + sh * (oh - 1) + 1:sh,
               j * dw:j * dw + sw * (ow - 1) + 1:sw] += cols[:, :, i, j]
    return gx


def _conv_core(xp, w, stride, dilation):
    cout, cin, kh, kw = w.shape
    oh = _out_size(xp.shape[2], kh, stride[0], dilation[0])
    ow = _out_size(xp.shape[3], kw, stride[1], dilation[1])
    if oh <= 0 or ow <= 0:
        raise ValueError("conv2d input smaller than kernel footprint")
    cols = _im2col(xp, kh, kw, stride, dilation, oh, ow)
    out = np.matmul(w.reshape(cout, -1), cols).reshape(xp.shape[0], cout, oh, ow)
    return out, cols


def conv2d(x, weight, bias=None, stride=1, padding=0, dilation=1) -> Tensor:
    """2-D cross-correlation. x: (B, Cin, H, W); weight: (Cout, Cin, kh, kw).

    ``padding`` is an int, a pair, or ((top, bottom), (left, right)) so that
    asymmetric (e.g. causal) padding is expressible.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, weight {weight.shape}")
    stride, dilation = _pair(stride), _pair(dilation)
    (pt, pb), (pl, pr) = _padding(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    out, cols = _conv_core(xp, weight.data, stride, dilation)
    cout, cin, kh, kw = weight.shape
    oh, ow = out.shape[2:]
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[:, None, None]
        inputs.append(bias)

    def bw(g):
        g2 = g.reshape(g.shape[0], cout, oh * ow)
        grads = [None, None]
        if x.requires_grad:
            gcols = np.matmul(weight.data.reshape(cout, -1).T, g2)
            gxp = _col2im(gcols, xp.shape, kh, kw, stride, dilation, oh, ow)
            grads[0] = gxp[:, :, pt:pt + x.shape[2], pl:pl + x.shape[3]]
        if weight.requires_grad:
            grads[1] = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return primitive("conv2d", out, inputs, bw)


def transposed_conv2d(x, weight, bias=None, stride=1, padding=0, dilation=1) -> Tensor:
    """Adjoint of conv2d with respect to its input.

    x: (B, Cin, H, W); weight: (Cin, Cout, kh, kw). Output size per axis is
    (n-1)*stride + dilation*(k-1) + 1 - pad_lo - pad_hi.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"transposed_conv2d shape mismatch: input {x.shape}, weight {weight.shape}")
    stride, dilation = _pair(stride), _pair(dilation)
    (pt, pb), (pl, pr) = _padding(padding)
    cin, cout, kh, kw = weight.shape
    B, _, H, W = x.shape
    full_h = (H - 1) * stride[0] + dilation[0] * (kh - 1) + 1
    full_w = (W - 1) * stride[1] + dilation[1] * (kw - 1) + 1
    cols = np.matmul(weight.data.reshape(cin, -1).T, x.data.reshape(B, cin, H * W))
    full = _col2im(cols, (B, cout, full_h, full_w), kh, kw, stride, dilation, H, W)
    out = full[:, :, pt:full_h - pb, pl:full_w - pr]
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[:, None, None]
        inputs.append(bias)

    def bw(g):
        gfull = np.zeros((B, cout, full_h, full_w))
        gfull[:, :, pt:full_h - pb, pl:full_w - pr] = g
        gx_, gcols = _conv_core(gfull, weight.data, stride, dilation)
        grads = [gx_ if x.requires_grad else None, None]
        if weight.requires_grad:
            gw = np.tensordot(x.data.reshape(B, cin, H * W), gcols, axes=([0, 2], [0, 2]))
            grads[1] = gw.reshape(weight.shape)
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return primitive("transposed_conv2d", np.ascontiguousarray(out), inputs, bw)


# ------------------------------------------------------------------ helpers

def linear(x, weight, bias=None) -> Tensor:
    """x @ weight (+ bias); weight is (d_in, d_out)."""
    y = matmul(x, weight) if as_tensor(x).ndim >= 2 else matmul(reshape(x, (1, -1)), weight)
    return y if bias is None else add(y, bias)
