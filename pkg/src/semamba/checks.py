"""Gradient-check suites on tiny instances, grouped by module."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import losses, ssm
from .autodiff import GradCheckReport, Tensor, grad_check, ops
from .spectral import StftConfig, istft_op, stft_complex, stft_op

PRIMITIVE_TOL = 1e-6
COMPOSED_TOL = 1e-4

TINY_STFT = StftConfig(n_fft=16, hop=4, win_len=16)


def _t(rng, *shape, lo=-2.0, hi=2.0):
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def _weighted(rng, fn):
    """Reduce a tensor-valued function to a scalar with fixed random weights."""
    cache = {}

    def wrapped(*args):
        out = fn(*args)
        if out.shape not in cache:
            cache[out.shape] = rng.standard_normal(out.shape)
        return ops.sum(ops.mul(out, cache[out.shape]))
    return wrapped


def _params_fn(build: Callable, params: dict) -> tuple[Callable, list[Tensor]]:
    names = list(params)

    def fn(*vals):
        return build(dict(zip(names, vals)))
    return fn, [params[n] for n in names]


def _perturb(params: dict, rng, scale: float = 0.2) -> dict:
    # move away from symmetric initial values (zero biases, unit gains)
    for p in params.values():
        p.data = p.data + rng.normal(0.0, scale, p.shape)
    return params


def primitive_suite(seed: int = 0) -> list[tuple[str, GradCheckReport]]:
    rng = np.random.default_rng(seed)
    pos = dict(lo=0.2, hi=2.0)
    cases = {
        "add": (ops.add, [_t(rng, 3, 4), _t(rng, 4)]),
        "sub": (ops.sub, [_t(rng, 3, 4), _t(rng, 3, 4)]),
        "mul": (ops.mul, [_t(rng, 3, 4), _t(rng, 3, 1)]),
        "div": (ops.div, [_t(rng, 3, 4), _t(rng, 3, 4, **pos)]),
        "matmul": (ops.matmul, [_t(rng, 2, 3, 4), _t(rng, 4, 5)]),
        "exp": (ops.exp, [_t(rng, 5)]),
        "log": (ops.log, [_t(rng, 5, **pos)]),
        "log1p": (ops.log1p, [_t(rng, 5, **pos)]),
        "expm1": (ops.expm1, [_t(rng, 5)]),
        "softplus": (ops.softplus, [_t(rng, 5)]),
        "silu": (ops.silu, [_t(rng, 5)]),
        "sigmoid": (ops.sigmoid, [_t(rng, 5)]),
        "tanh": (ops.tanh, [_t(rng, 5)]),
        "abs": (ops.abs, [_t(rng, 5, lo=0.3)]),
        "square": (ops.square, [_t(rng, 5)]),
        "sqrt": (ops.sqrt, [_t(rng, 5, **pos)]),
        "power": (lambda a: ops.power(a, 0.3), [_t(rng, 5, **pos)]),
        "cos": (ops.cos, [_t(rng, 5)]),
        "sin": (ops.sin, [_t(rng, 5)]),
        "atan2": (ops.atan2, [_t(rng, 5, lo=0.3), _t(rng, 5, lo=0.3)]),
        "layernorm": (ops.layernorm, [_t(rng, 3, 6), _t(rng, 6), _t(rng, 6)]),
        "concat": (lambda a, b: ops.concat([a, b], axis=1), [_t(rng, 2, 3), _t(rng, 2, 2)]),
        "flip": (lambda a: ops.flip(a, 0), [_t(rng, 4, 3)]),
        "slice": (lambda a: ops.slice(a, (slice(1, 3), slice(None, None, 2))), [_t(rng, 4, 5)]),
        "pad": (lambda a: ops.pad(a, [(1, 2), (0, 1)]), [_t(rng, 3, 3)]),
        "reshape": (lambda a: ops.reshape(a, (6, 2)), [_t(rng, 3, 4)]),
        "transpose": (lambda a: ops.transpose(a, (1, 0, 2)), [_t(rng, 2, 3, 4)]),
        "sum": (lambda a: ops.sum(a, axis=1), [_t(rng, 3, 4)]),
        "mean": (lambda a: ops.mean(a, axis=0), [_t(rng, 3, 4)]),
        "conv1d_depthwise_causal": (ops.conv1d_depthwise_causal, [_t(rng, 2, 7, 3), _t(rng, 3, 4), _t(rng, 3)]),
        "conv2d": (lambda x, w, b: ops.conv2d(x, w, b, stride=(1, 2), padding=((2, 0), (1, 1)), dilation=(2, 1)),
                   [_t(rng, 1, 2, 5, 6), _t(rng, 3, 2, 2, 3), _t(rng, 3)]),
        "transposed_conv2d": (lambda x, w, b: ops.transposed_conv2d(x, w, b, stride=(1, 2)),
                              [_t(rng, 1, 2, 3, 4), _t(rng, 2, 3, 1, 3), _t(rng, 3)]),
        "linear": (ops.linear, [_t(rng, 4, 3), _t(rng, 3, 2), _t(rng, 2)]),
        "selective_scan": (lambda x, d, A, B, C, D: ssm.selective_scan(x, d, A, B, C, D),
                           [_t(rng, 6, 3), _t(rng, 6, 3, lo=0.05, hi=0.8), _t(rng, 3, 2, lo=-2.0, hi=-0.2),
                            _t(rng, 6, 2), _t(rng, 6, 2), _t(rng, 3)]),
        "stft": (lambda w: stft_op(w, TINY_STFT), [_t(rng, 40)]),
        "istft": (lambda s: istft_op(s, TINY_STFT, 40), [_t(rng, 11, 9, 2)]),
    }
    return [(name, grad_check(_weighted(rng, fn), args, tol=PRIMITIVE_TOL)) for name, (fn, args) in cases.items()]


def ssm_suite(seed: int = 0) -> list[tuple[str, GradCheckReport]]:
    rng = np.random.default_rng(seed)
    cfg = ssm.MambaConfig(d_model=3, d_state=2, expand=2, d_conv=3)
    x = rng.standard_normal((5, 3))
    out = []
    p = _perturb(ssm.init_mamba_params(cfg, rng), rng)
    fn, args = _params_fn(lambda q: ssm.mamba_block_forward(Tensor(x), q), p)
    out.append(("mamba_block", grad_check(_weighted(rng, fn), args, tol=COMPOSED_TOL)))
    p = _perturb(ssm.init_bimamba_params(cfg, rng), rng)
    fn, args = _params_fn(lambda q: ssm.bimamba_forward(Tensor(x), q), p)
    out.append(("bimamba", grad_check(_weighted(rng, fn), args, tol=COMPOSED_TOL)))
    xt = Tensor(x, requires_grad=True)
    fwd = ssm.sub(p, "fwd")
    fn = _weighted(rng, lambda a: ssm.mamba_block_forward(a, fwd))
    out.append(("mamba_block_input", grad_check(fn, [xt], tol=COMPOSED_TOL)))
    sel = _perturb(ssm.init_mamba_params(cfg, rng), rng)

    def selection_scan(u, q):
        delta, B, C = ssm.selection_project(u, q)
        return ssm.selective_scan(u, delta, ops.neg(ops.exp(q["A_log"])), B, C, q["D"])
    u = Tensor(rng.standard_normal((5, cfg.d_inner)), requires_grad=True)
    out.append(("selection_scan", grad_check(_weighted(rng, lambda a: selection_scan(a, sel)), [u],
                                             tol=COMPOSED_TOL)))
    return out


def models_suite(seed: int = 0) -> list[tuple[str, GradCheckReport]]:
    from .models import AdvancedModelConfig, BasicModelConfig, init_advanced, init_basic, tf_mamba_block
    from .pipeline import training_loss

    rng = np.random.default_rng(seed)
    out = []
    feats = rng.standard_normal((1, 2, 6, 5))
    cfg = ssm.MambaConfig(d_model=2, d_state=2, expand=1, d_conv=2)
    p = {}
    for axis in ("time", "freq"):
        p.update(ssm.prefixed(ssm.init_bimamba_params(cfg, rng), axis))
    p = _perturb(p, rng)
    fn, args = _params_fn(lambda q: tf_mamba_block(Tensor(feats), q), p)
    out.append(("tf_mamba_block", grad_check(_weighted(rng, fn), args, tol=COMPOSED_TOL)))

    L = 48
    clean = 0.5 * rng.standard_normal((1, L))
    noisy = clean + 0.3 * rng.standard_normal((1, L))
    bc = BasicModelConfig(enc_channels=(2, 2, 2, 2), d_model=4, n_mamba=1, d_state=2, d_conv=2, stft=TINY_STFT)
    bc_nc = BasicModelConfig(enc_channels=(2, 2), enc_freq_strides=(1, 2), d_model=3, n_mamba=1, d_state=2,
                             d_conv=2, causal=False, stft=TINY_STFT)
    for name, c in (("basic_causal_loss", bc), ("basic_noncausal_loss", bc_nc)):
        p = _perturb(init_basic(c, rng), rng, 0.05)
        fn, args = _params_fn(lambda q, c=c: training_loss("basic", q, c, noisy, clean)[0], p)
        out.append((name, grad_check(fn, args, tol=COMPOSED_TOL)))
    weights = losses.LossWeights(1.0, 1.0, 1.0, 1.0, 1.0)
    for bi in (False, True):
        ac = AdvancedModelConfig(channels=2, dense_dilations=(1, 2), n_tf_blocks=1, bidirectional=bi, d_state=2,
                                 expand=1, d_conv=2, stft=TINY_STFT)
        p = _perturb(init_advanced(ac, rng), rng)
        fn, args = _params_fn(lambda q, ac=ac: training_loss("advanced", q, ac, noisy, clean, weights)[0], p)
        out.append((f"advanced_{'bi' if bi else 'uni'}_loss", grad_check(fn, args, tol=COMPOSED_TOL)))
    return out


def losses_suite(seed: int = 0) -> list[tuple[str, GradCheckReport]]:
    rng = np.random.default_rng(seed)
    st = TINY_STFT
    L = 40
    n_frames = st.n_frames(L)
    target = rng.standard_normal(L)
    out = []
    a, b = _t(rng, 4, 5), Tensor(rng.uniform(-2, 2, (4, 5)))
    out.append(("mag_mae", grad_check(lambda p: losses.mag_mae(p, b), [a], tol=COMPOSED_TOL)))
    pa = Tensor(rng.uniform(-3, 3, (4, 5)), requires_grad=True)
    pb = Tensor(rng.uniform(-3, 3, (4, 5)))
    out.append(("phase_distance", grad_check(lambda p: losses.phase_distance(p, pb), [pa], tol=COMPOSED_TOL)))
    spec = Tensor(rng.standard_normal((n_frames, st.n_bins, 2)), requires_grad=True)
    out.append(("consistency", grad_check(lambda s: losses.consistency_loss(s, st, L), [spec],
                                          tol=COMPOSED_TOL)))
    wave = Tensor(target + 0.3 * rng.standard_normal(L), requires_grad=True)
    spec = Tensor(stft_complex(wave.data, st).view(float).reshape(n_frames, st.n_bins, 2)
                  + 0.1 * rng.standard_normal((n_frames, st.n_bins, 2)), requires_grad=True)
    weights = losses.LossWeights(1.0, 1.0, 1.0, 1.0, 1.0)
    out.append(("composite", grad_check(lambda w, s: losses.composite_loss(w, s, Tensor(target), weights, st)[0],
                                        [wave, spec], tol=COMPOSED_TOL)))
    return out


SUITES = {
    "autodiff": primitive_suite,
    "ssm": ssm_suite,
    "models": models_suite,
    "losses": losses_suite,
}


def run_suite(module: str, seed: int = 0) -> list[tuple[str, GradCheckReport]]:
    try:
        return SUITES[module](seed)
    except KeyError:
        raise ValueError(f"unknown module {module!r}; choose from {sorted(SUITES)}") from None
