"""Selective state-space core.

Diagonal real SSM per channel with an S-dimensional state:

    h_n = exp(delta_n * A) * h_{n-1} + delta_n * B_n * x_n
    y_n = <C_n, h_n> + D * x_n

Shapes follow the (..., T, C) convention: leading batch axes, then time,
then channels. ``B`` and ``C`` are shared across channels, (..., T, S).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .autodiff import Tensor, ops, primitive
from .autodiff.tensor import active_tape, as_tensor

SCAN_BLOCK = 64

Params = dict[str, Tensor]


# ------------------------------------------------------------ discretization

def discretize(delta: np.ndarray, A: np.ndarray, B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order hold on diagonal A, Euler step for B.

    delta: (..., T, C) > 0; A: (C, S) < 0; B: (..., T, S).
    Returns (A_bar, B_bar), each (..., T, C, S), with A_bar in (0, 1).
    """
    delta, A, B = np.asarray(delta, float), np.asarray(A, float), np.asarray(B, float)
    if np.any(delta <= 0):
        raise ValueError("delta must be strictly positive")
    if np.any(A >= 0):
        raise ValueError("A must be strictly negative")
    A_bar = np.exp(delta[..., None] * A)
    B_bar = delta[..., None] * B[..., None, :]
    return A_bar, B_bar


# ---------------------------------------------------------- linear recurrence

def combine(p, q):
    """Associative operator for h -> a*h + b: apply p first, then q."""
    a1, b1 = p
    a2, b2 = q
    return a2 * a1, a2 * b1 + b2


def linear_scan_sequential(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """h_t = a_t * h_{t-1} + b_t along axis 0, h_{-1} = 0."""
    h = np.empty_like(b)
    prev = np.zeros_like(b[0])
    for t in range(b.shape[0]):
        prev = a[t] * prev + b[t]
        h[t] = prev
    return h


def linear_scan_parallel(a: np.ndarray, b: np.ndarray, block: int = SCAN_BLOCK) -> np.ndarray:
    """Same recurrence as :func:`linear_scan_sequential` via a blocked two-pass scan.

    Pass 1 scans every block locally (all blocks at once); the block totals
    are scanned recursively to give each block its carry-in; pass 2 folds the
    carry into the local prefixes. The combine order depends only on T and
    ``block``, so results are reproducible bit-for-bit.
    """
    T = b.shape[0]
    if T == 0:
        return b.copy()
    nb = -(-T // block)
    tail = b.shape[1:]
    acc_a = np.ones((nb * block,) + tail)
    acc_b = np.zeros((nb * block,) + tail)
    acc_a[:T] = a
    acc_b[:T] = b
    acc_a = acc_a.reshape((nb, block) + tail)
    acc_b = acc_b.reshape((nb, block) + tail)
    tmp = np.empty((nb,) + tail)
    for i in range(1, block):
        np.multiply(acc_a[:, i], acc_b[:, i - 1], out=tmp)
        acc_b[:, i] += tmp
        acc_a[:, i] *= acc_a[:, i - 1]
    if nb > 1:
        totals = linear_scan_parallel(acc_a[:, -1], acc_b[:, -1], block)
        # block k receives the running total of blocks < k
        acc_a[1:] *= totals[:-1, None]
        acc_b[1:] += acc_a[1:]
    return acc_b.reshape((nb * block,) + tail)[:T]


_SCANS = {"sequential": linear_scan_sequential, "parallel": linear_scan_parallel}


def _scan_time(a: np.ndarray, b: np.ndarray, method: str) -> np.ndarray:
    # a, b: (..., T, C, S); scan over the time axis (-3)
    try:
        kernel = _SCANS[method]
    except KeyError:
        raise ValueError(f"unknown scan method {method!r}") from None
    h = kernel(np.moveaxis(a, -3, 0), np.moveaxis(b, -3, 0))
    return np.moveaxis(h, 0, -3)


def _check_shapes(x, delta, A, B, C, D):
    if x.shape != delta.shape:
        raise ValueError(f"x {x.shape} and delta {delta.shape} differ")
    ch, S = A.shape
    if x.shape[-1] != ch or D.shape != (ch,):
        raise ValueError("channel count mismatch between x, A and D")
    if B.shape != x.shape[:-1] + (S,) or C.shape != B.shape:
        raise ValueError(f"B/C must be {x.shape[:-1] + (S,)}, got {B.shape} / {C.shape}")


def _selective_scan(x, delta, A, B, C, D, method):
    _check_shapes(x, delta, A, B, C, D)
    A_bar, B_bar = discretize(delta, A, B)
    h = _scan_time(A_bar, B_bar * x[..., None], method)
    y = np.einsum("...cs,...s->...c", h, C) + D * x
    return y, h, A_bar


# elements of one (chunk, T, C, S) working array in the gradient-free path
_CHUNK_ELEMS = 1 << 18


def _selective_scan_output(x, delta, A, B, C, D, method):
    """y only, evaluated over cache-sized chunks of the batch and time axes.

    Time chunks carry the final state of the previous chunk, so the working
    set stays constant and cost is linear in T without cache effects.
    """
    _check_shapes(x, delta, A, B, C, D)
    lead = x.shape[:-2]
    T, ch = x.shape[-2:]
    S = A.shape[1]
    flat = [v.reshape((-1,) + v.shape[-2:]) for v in (x, delta, B, C)]
    n = flat[0].shape[0]
    step = max(1, _CHUNK_ELEMS // max(1, T * ch * S))
    span = max(SCAN_BLOCK, _CHUNK_ELEMS // max(1, ch * S) // SCAN_BLOCK * SCAN_BLOCK)
    y = np.empty((n, T, ch))
    for i in range(0, n, step):
        h0 = None
        for t in range(0, T, span):
            xs, ds, Bs, Cs = (v[i:i + step, t:t + span] for v in flat)
            A_bar, B_bar = discretize(ds, A, Bs)
            bx = B_bar * xs[..., None]
            if h0 is not None:
                bx[:, 0] += A_bar[:, 0] * h0
            h = _scan_time(A_bar, bx, method)
            y[i:i + step, t:t + span] = np.einsum("...cs,...s->...c", h, Cs) + D * xs
            h0 = h[:, -1]
    return y.reshape(lead + (T, ch))


def _selective_scan_fused(x, delta, A, B, C, D):
    """y only, stepping through time with a single (N, S, C) state buffer."""
    _check_shapes(x, delta, A, B, C, D)
    lead = x.shape[:-2]
    T, ch = x.shape[-2:]
    xs, ds, Bs, Cs = (np.moveaxis(v.reshape((-1,) + v.shape[-2:]), 1, 0) for v in (x, delta, B, C))
    dx = ds * xs
    At = np.ascontiguousarray(A.T)
    h = np.zeros((xs.shape[1], A.shape[1], ch))
    tmp = np.empty_like(h)
    y = np.empty(xs.shape)
    for t in range(T):
        np.multiply(ds[t][:, None, :], At, out=tmp)
        np.exp(tmp, out=tmp)
        h *= tmp
        np.multiply(Bs[t][:, :, None], dx[t][:, None, :], out=tmp)
        h += tmp
        np.matmul(Cs[t][:, None, :], h, out=y[t][:, None, :])
    y += xs * D
    return np.moveaxis(y, 0, 1).reshape(lead + (T, ch))


def selective_scan_sequential(x, delta, A, B, C, D) -> np.ndarray:
    """Reference recurrence, one time step at a time."""
    return _selective_scan(*map(np.asarray, (x, delta, A, B, C, D)), "sequential")[0]


def selective_scan_parallel(x, delta, A, B, C, D) -> np.ndarray:
    """Blocked associative-scan evaluation of the same recurrence."""
    return _selective_scan_output(*map(np.asarray, (x, delta, A, B, C, D)), "parallel")


def selective_scan(x, delta, A, B, C, D, method: str = "auto") -> Tensor:
    """Differentiable selective scan over Tensors.

    ``method`` is "sequential", "parallel" or "auto". With "auto" the blocked
    parallel scan is used when gradients are recorded and a fused
    time-stepping loop (no stored states) otherwise.

    The backward pass is itself a linear scan running backwards in time:
    G_t = dL/dh_t (direct) + A_bar_{t+1} * G_{t+1}.
    """
    x, delta, A, B, C, D = (as_tensor(t) for t in (x, delta, A, B, C, D))
    args = (x, delta, A, B, C, D)
    if method not in ("auto", *_SCANS):
        raise ValueError(f"unknown scan method {method!r}")
    if active_tape() is None or not any(t.requires_grad for t in args):
        arrays = [t.data for t in args]
        if method == "parallel":
            y = _selective_scan_output(*arrays, method)
        else:
            y = _selective_scan_fused(*arrays)
        return primitive("selective_scan", y, (), None)
    if method == "auto":
        method = "parallel"
    y, h, A_bar = _selective_scan(x.data, delta.data, A.data, B.data, C.data, D.data, method)

    def bw(g):
        xd, dd, Ad, Bd, Cd = x.data, delta.data, A.data, B.data, C.data
        gD = (g * xd).reshape(-1, xd.shape[-1]).sum(axis=0)
        gC = np.einsum("...c,...cs->...s", g, h)
        gh = g[..., None] * Cd[..., None, :]
        a_next = np.concatenate([A_bar[..., 1:, :, :], np.zeros_like(A_bar[..., :1, :, :])], axis=-3)
        G = np.flip(_scan_time(np.flip(a_next, -3), np.flip(gh, -3), method), -3)
        h_prev = np.concatenate([np.zeros_like(h[..., :1, :, :]), h[..., :-1, :, :]], axis=-3)
        gA_bar = G * h_prev * A_bar  # d/d(delta*A)
        gdelta = np.einsum("...cs,cs->...c", gA_bar, Ad)
        gA = (gA_bar * dd[..., None]).reshape((-1,) + Ad.shape).sum(axis=0)
        GB = np.einsum("...cs,...s->...c", G, Bd)
        gdelta = gdelta + GB * xd
        gx = g * D.data + GB * dd
        gB = np.einsum("...cs,...c->...s", G, dd * xd)
        return gx, gdelta, gA, gB, gC, gD

    return primitive("selective_scan", y, (x, delta, A, B, C, D), bw)


# ------------------------------------------------------------------ blocks

@dataclass(frozen=True)
class MambaConfig:
    d_model: int
    d_state: int = 16
    expand: int = 2
    d_conv: int = 4

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model


def sub(params: Mapping[str, Tensor], prefix: str) -> Params:
    """View of the entries under ``prefix.`` with the prefix stripped."""
    head = prefix + "."
    return {k[len(head):]: v for k, v in params.items() if k.startswith(head)}


def prefixed(params: Mapping[str, Tensor], prefix: str) -> Params:
    return {f"{prefix}.{k}": v for k, v in params.items()}


def _inv_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


def init_mamba_params(cfg: MambaConfig, rng: np.random.Generator) -> Params:
    d, e, S, K = cfg.d_model, cfg.d_inner, cfg.d_state, cfg.d_conv

    def uniform(fan_in, *shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=e))
    p = {
        "norm.weight": np.ones(d),
        "norm.bias": np.zeros(d),
        "in_proj.weight": uniform(d, d, 2 * e),
        "in_proj.bias": np.zeros(2 * e),
        "conv.weight": uniform(K, e, K),
        "conv.bias": np.zeros(e),
        "dt_proj.weight": uniform(e, e, e) * 0.1,
        "dt_proj.bias": _inv_softplus(dt),
        "B_proj.weight": uniform(e, e, S),
        "C_proj.weight": uniform(e, e, S),
        "A_log": np.tile(np.log(np.arange(1, S + 1, dtype=float)), (e, 1)),
        "D": np.ones(e),
        "out_proj.weight": uniform(e, e, d),
        "out_proj.bias": np.zeros(d),
    }
    return {k: Tensor(v, requires_grad=True) for k, v in p.items()}


def init_bimamba_params(cfg: MambaConfig, rng: np.random.Generator) -> Params:
    d = cfg.d_model
    p = prefixed(init_mamba_params(cfg, rng), "fwd")
    p.update(prefixed(init_mamba_params(cfg, rng), "bwd"))
    bound = 1.0 / np.sqrt(2 * d)
    p["merge.weight"] = Tensor(rng.uniform(-bound, bound, size=(2 * d, d)), requires_grad=True)
    p["merge.bias"] = Tensor(np.zeros(d), requires_grad=True)
    return p


def selection_project(x, p: Mapping[str, Tensor]) -> tuple[Tensor, Tensor, Tensor]:
    """Input-dependent (delta, B, C) from x: (..., T, E)."""
    delta = ops.softplus(ops.linear(x, p["dt_proj.weight"], p["dt_proj.bias"]))
    B = ops.matmul(x, p["B_proj.weight"])
    C = ops.matmul(x, p["C_proj.weight"])
    return delta, B, C


def mamba_block_forward(x, p: Mapping[str, Tensor], method: str = "auto") -> Tensor:
    """Residual uni-directional Mamba block on x: (..., T, d_model).

    y = x + out_proj(SSM(silu(conv(u))) * silu(g)), (u, g) = in_proj(norm(x)).
    Causal: y_t depends only on x_{<=t}.
    """
    x = as_tensor(x)
    e = p["D"].shape[0]
    n = ops.layernorm(x, p["norm.weight"], p["norm.bias"])
    ug = ops.linear(n, p["in_proj.weight"], p["in_proj.bias"])
    u = ops.slice(ug, (Ellipsis, slice(0, e)))
    g = ops.slice(ug, (Ellipsis, slice(e, 2 * e)))
    u = ops.silu(ops.conv1d_depthwise_causal(u, p["conv.weight"], p["conv.bias"]))
    delta, B, C = selection_project(u, p)
    A = ops.neg(ops.exp(p["A_log"]))
    s = selective_scan(u, delta, A, B, C, p["D"], method=method)
    out = ops.linear(ops.mul(s, ops.silu(g)), p["out_proj.weight"], p["out_proj.bias"])
    return ops.add(x, out)


def bimamba_forward(x, p: Mapping[str, Tensor], method: str = "auto") -> Tensor:
    """Forward branch on x, backward branch on time-reversed x (re-reversed),
    channel concatenation, then a width-1 convolution back to d_model."""
    x = as_tensor(x)
    t_axis = x.ndim - 2
    fwd = mamba_block_forward(x, sub(p, "fwd"), method)
    bwd = ops.flip(mamba_block_forward(ops.flip(x, t_axis), sub(p, "bwd"), method), t_axis)
    both = ops.concat([fwd, bwd], axis=-1)
    return ops.linear(both, p["merge.weight"], p["merge.bias"])


def count_params(params: Mapping[str, Tensor]) -> int:
    return int(sum(t.size for t in params.values()))
