"""Evaluation metrics and analytic complexity accounting.

FLOPs are reported as 2 x multiply-accumulates. Bias additions,
activations and (by default) the STFT/iSTFT are not counted.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from math import gcd
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.signal import resample_poly

SI_SDR_CLIP_DB = 140.0


# ------------------------------------------------------------------- SI-SDR

def si_sdr(est: np.ndarray, ref: np.ndarray) -> float:
    """Scale-invariant SDR in dB (no mean removal), clipped to +-140 dB."""
    est = np.asarray(est, dtype=float).ravel()
    ref = np.asarray(ref, dtype=float).ravel()
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.size} vs {ref.size}")
    ref_energy = float(ref @ ref)
    if ref_energy == 0.0:
        raise ValueError("reference signal is all zeros")
    alpha = float(est @ ref) / ref_energy
    target = alpha * ref
    residual = est - target
    t_energy = float(target @ target)
    r_energy = float(residual @ residual)
    lim = 10.0 ** (SI_SDR_CLIP_DB / 10.0)
    if r_energy * lim <= t_energy:
        return SI_SDR_CLIP_DB
    if t_energy * lim <= r_energy:
        return -SI_SDR_CLIP_DB
    return 10.0 * np.log10(t_energy / r_energy)


# --------------------------------------------------------------------- STOI

STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30
STOI_BETA_DB = -15.0
STOI_DYN_RANGE = 40.0
_EPS = np.finfo(float).eps


def third_octave_matrix(fs: int = STOI_FS, n_fft: int = STOI_NFFT, n_bands: int = STOI_BANDS,
                        min_freq: float = STOI_MIN_FREQ) -> tuple[np.ndarray, np.ndarray]:
    """(n_bands, n_fft//2 + 1) 0/1 band matrix and the band centre frequencies."""
    f = np.linspace(0, fs, n_fft + 1)[: n_fft // 2 + 1]
    k = np.arange(n_bands)
    cf = min_freq * 2.0 ** (k / 3)
    fl = min_freq * np.sqrt(2.0 ** (k / 3) * 2.0 ** ((k - 1) / 3))
    fr = min_freq * np.sqrt(2.0 ** (k / 3) * 2.0 ** ((k + 1) / 3))
    H = np.zeros((n_bands, f.size))
    for i in range(n_bands):
        lo = int(np.argmin((f - fl[i]) ** 2))
        hi = int(np.argmin((f - fr[i]) ** 2))
        H[i, lo:hi] = 1.0
    return H, cf


def _resample_filter(up: int, down: int, rejection_db: float = 60.0) -> np.ndarray:
    """Kaiser-windowed sinc low-pass as used by Octave's ``resample``, unit DC gain."""
    cutoff = 1.0 / (2 * max(up, down))
    half = int(np.ceil((rejection_db - 8) / (28.714 * cutoff / 10)))
    t = np.arange(-half, half + 1)
    beta = 0.1102 * (rejection_db - 8.7) if rejection_db > 50 else \
        0.5842 * (rejection_db - 21) ** 0.4 + 0.07886 * (rejection_db - 21)
    h = np.kaiser(2 * half + 1, beta) * np.sinc(2 * cutoff * t)
    return h / h.sum()


def _resample(x: np.ndarray, fs_in: int, fs_out: int) -> np.ndarray:
    g = gcd(fs_out, fs_in)
    up, down = fs_out // g, fs_in // g
    return resample_poly(x, up, down, window=_resample_filter(up, down))


def _hann_stoi(n: int) -> np.ndarray:
    # symmetric Hann without the zero end points
    return np.hanning(n + 2)[1:-1]


def _frames(x: np.ndarray, n: int, hop: int) -> np.ndarray:
    starts = np.arange(0, x.size - n, hop)
    return x[starts[:, None] + np.arange(n)]


def _remove_silent_frames(x, y, dyn_range, n, hop):
    w = _hann_stoi(n)
    xf = _frames(x, n, hop) * w
    yf = _frames(y, n, hop) * w
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    keep = energy > energy.max() - dyn_range
    xf, yf = xf[keep], yf[keep]
    total = (len(xf) - 1) * hop + n if len(xf) else 0
    xs, ys = np.zeros(total), np.zeros(total)
    for j in range(len(xf)):
        xs[j * hop:j * hop + n] += xf[j]
        ys[j * hop:j * hop + n] += yf[j]
    return xs, ys


def _band_envelopes(x: np.ndarray, H: np.ndarray) -> np.ndarray:
    frames = _frames(x, STOI_FRAME, STOI_FRAME // 2) * _hann_stoi(STOI_FRAME)
    spec = np.fft.rfft(frames, n=STOI_NFFT, axis=1)
    return np.sqrt(np.abs(spec) ** 2 @ H.T).T  # (bands, frames)


def stoi(est: np.ndarray, ref: np.ndarray, sample_rate: int) -> float:
    """Short-time objective intelligibility of ``est`` against the clean ``ref``."""
    x = np.asarray(ref, dtype=float).ravel()
    y = np.asarray(est, dtype=float).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {y.size} vs {x.size}")
    if sample_rate != STOI_FS:
        x = _resample(x, int(sample_rate), STOI_FS)
        y = _resample(y, int(sample_rate), STOI_FS)
    if x.size < STOI_FRAME * 2:
        raise ValueError("signal too short for STOI")
    x, y = _remove_silent_frames(x, y, STOI_DYN_RANGE, STOI_FRAME, STOI_FRAME // 2)
    H, _ = third_octave_matrix()
    if x.size <= STOI_FRAME:
        raise ValueError("signal too short for STOI after silent-frame removal")
    X = _band_envelopes(x, H)
    Y = _band_envelopes(y, H)
    n_frames = X.shape[1]
    if n_frames < STOI_SEGMENT:
        raise ValueError(f"need at least {STOI_SEGMENT} non-silent frames (~384 ms), got {n_frames}")
    clip = 10 ** (-STOI_BETA_DB / 20)
    idx = np.arange(STOI_SEGMENT - 1, n_frames)[:, None] + np.arange(-STOI_SEGMENT + 1, 1)
    Xs = X[:, idx].transpose(1, 0, 2)  # (segments, bands, N)
    Ys = Y[:, idx].transpose(1, 0, 2)
    alpha = np.sqrt(np.sum(Xs ** 2, axis=2, keepdims=True) / (np.sum(Ys ** 2, axis=2, keepdims=True) + _EPS))
    Yp = np.minimum(alpha * Ys, Xs * (1 + clip))
    xn = Xs - Xs.mean(axis=2, keepdims=True)
    yn = Yp - Yp.mean(axis=2, keepdims=True)
    xn /= np.linalg.norm(xn, axis=2, keepdims=True) + _EPS
    yn /= np.linalg.norm(yn, axis=2, keepdims=True) + _EPS
    return float(np.mean(np.sum(xn * yn, axis=2)))


# -------------------------------------------------------- FLOPs accounting

class UnknownLayerError(ValueError):
    pass


LAYER_KINDS = ("linear", "conv2d", "tconv2d", "dwconv1d", "norm", "scan", "selection", "param",
               "attention", "stft")


@dataclass
class LayerCount:
    name: str
    kind: str
    flops: int
    params: int

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise UnknownLayerError(f"unknown layer type {self.kind!r}")


@dataclass
class FlopsReport:
    T: int
    layers: list[LayerCount] = field(default_factory=list)
    scaling_exponent: float | None = None

    @property
    def total_flops(self) -> int:
        return sum(layer.flops for layer in self.layers)

    @property
    def total_params(self) -> int:
        return sum(layer.params for layer in self.layers)

    def flops_of(self, kind: str) -> int:
        return sum(layer.flops for layer in self.layers if layer.kind == kind)

    def add(self, name: str, kind: str, flops: int = 0, params: int = 0) -> None:
        self.layers.append(LayerCount(name, kind, int(flops), int(params)))

    def extend(self, other: "FlopsReport", prefix: str = "") -> None:
        for layer in other.layers:
            self.add(prefix + layer.name, layer.kind, layer.flops, layer.params)

    def to_dict(self) -> dict:
        return {"T": self.T, "total_flops": self.total_flops, "total_params": self.total_params,
                "scaling_exponent": self.scaling_exponent, "layers": [asdict(layer) for layer in self.layers]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        width = max([len(layer.name) for layer in self.layers] + [5])
        lines = [f"{'layer':<{width}}  {'kind':<9}  {'flops':>15}  {'params':>10}"]
        for layer in self.layers:
            lines.append(f"{layer.name:<{width}}  {layer.kind:<9}  {layer.flops:>15,}  {layer.params:>10,}")
        lines.append(f"{'total':<{width}}  {'':<9}  {self.total_flops:>15,}  {self.total_params:>10,}")
        lines.append(f"T = {self.T}" + ("" if self.scaling_exponent is None
                                        else f", scaling exponent = {self.scaling_exponent:.4f}"))
        return "\n".join(lines)


def linear_count(name: str, d_in: int, d_out: int, positions: int, bias: bool = True) -> LayerCount:
    return LayerCount(name, "linear", 2 * d_in * d_out * positions, d_in * d_out + (d_out if bias else 0))


def conv2d_count(name: str, c_in: int, c_out: int, kh: int, kw: int, out_positions: int) -> LayerCount:
    return LayerCount(name, "conv2d", 2 * kh * kw * c_in * c_out * out_positions, kh * kw * c_in * c_out + c_out)


def tconv2d_count(name: str, c_in: int, c_out: int, kh: int, kw: int, in_positions: int) -> LayerCount:
    return LayerCount(name, "tconv2d", 2 * kh * kw * c_in * c_out * in_positions, kh * kw * c_in * c_out + c_out)


def scan_flops(T: int, channels: int, d_state: int) -> int:
    # per state element: delta*A, delta*B*x, A_bar*h + B_bar*x, C*h; plus the D skip per channel
    return 2 * (4 * T * channels * d_state + T * channels)


def mamba_block_count(T: int, n_seq: int, d_model: int, d_state: int = 16, expand: int = 2,
                      d_conv: int = 4, prefix: str = "") -> FlopsReport:
    """One uni-directional block applied to ``n_seq`` sequences of length ``T``."""
    e = expand * d_model
    pos = T * n_seq
    r = FlopsReport(T)
    r.add(prefix + "norm", "norm", 2 * pos * d_model, 2 * d_model)
    r.layers.append(linear_count(prefix + "in_proj", d_model, 2 * e, pos))
    r.add(prefix + "conv", "dwconv1d", 2 * d_conv * e * pos, e * d_conv + e)
    r.layers.append(linear_count(prefix + "dt_proj", e, e, pos))
    r.layers.append(linear_count(prefix + "B_proj", e, d_state, pos, bias=False))
    r.layers.append(linear_count(prefix + "C_proj", e, d_state, pos, bias=False))
    r.add(prefix + "scan", "scan", scan_flops(T, e, d_state) * n_seq, e * d_state + e)  # A_log, D
    r.add(prefix + "gate", "selection", 2 * pos * e, 0)
    r.layers.append(linear_count(prefix + "out_proj", e, d_model, pos))
    return r


def bimamba_count(T: int, n_seq: int, d_model: int, d_state: int = 16, expand: int = 2,
                  d_conv: int = 4, prefix: str = "") -> FlopsReport:
    r = FlopsReport(T)
    for branch in ("fwd.", "bwd."):
        r.extend(mamba_block_count(T, n_seq, d_model, d_state, expand, d_conv), prefix + branch)
    r.layers.append(linear_count(prefix + "merge", 2 * d_model, d_model, T * n_seq))
    return r


def count_mamba_stack(d_model: int, n_layers: int, T: int, d_state: int = 16, expand: int = 2,
                      d_conv: int = 4) -> FlopsReport:
    r = FlopsReport(T)
    for i in range(n_layers):
        r.extend(mamba_block_count(T, 1, d_model, d_state, expand, d_conv), f"layer{i}.")
    return r


def count_attention_baseline(d_model: int, n_layers: int, T: int, ffn_mult: int = 4) -> FlopsReport:
    """Pre-norm Transformer encoder layers (multi-head self-attention + FFN)."""
    if min(d_model, n_layers, T) <= 0:
        raise ValueError("dimensions must be positive")
    d = d_model
    r = FlopsReport(T)
    for i in range(n_layers):
        p = f"layer{i}."
        r.add(p + "norm1", "norm", 2 * T * d, 2 * d)
        r.layers.append(linear_count(p + "qkv", d, 3 * d, T))
        r.add(p + "scores", "attention", 2 * T * T * d, 0)
        r.add(p + "context", "attention", 2 * T * T * d, 0)
        r.layers.append(linear_count(p + "out", d, d, T))
        r.add(p + "norm2", "norm", 2 * T * d, 2 * d)
        r.layers.append(linear_count(p + "ffn1", d, ffn_mult * d, T))
        r.layers.append(linear_count(p + "ffn2", ffn_mult * d, d, T))
    return r


def _stft_flops(cfg, frames: int) -> int:
    # windowing plus an n log2 n real-FFT estimate, per transform
    n = cfg.n_fft
    return int(frames * (n + 2.5 * n * np.log2(n)))


def _count_basic(cfg, T: int) -> FlopsReport:
    r = FlopsReport(T)
    k = cfg.enc_kernel
    sizes = cfg.freq_sizes()
    c_in = 1
    for i, c_out in enumerate(cfg.enc_channels):
        r.layers.append(conv2d_count(f"enc.{i}", c_in, c_out, k, k, T * sizes[i + 1]))
        c_in = c_out
    r.layers.append(linear_count("proj", cfg.flat_features, cfg.d_model, T))
    block = mamba_block_count if cfg.causal else bimamba_count
    for i in range(cfg.n_mamba):
        r.extend(block(T, 1, cfg.d_model, cfg.d_state, cfg.expand, cfg.d_conv), f"mamba.{i}.")
    r.layers.append(linear_count("dec", cfg.d_model, cfg.stft.n_bins, T))
    return r


def _count_dense(r: FlopsReport, prefix: str, C: int, depth: int, positions: int) -> None:
    for i in range(depth):
        r.layers.append(conv2d_count(f"{prefix}.{i}", C * (i + 1), C, 3, 3, positions))


def _count_advanced(cfg, T: int) -> FlopsReport:
    r = FlopsReport(T)
    C = cfg.channels
    F = cfg.stft.n_bins
    Fr = cfg.reduced_bins
    depth = len(cfg.dense_dilations)
    r.layers.append(conv2d_count("enc.in", 2, C, 1, 1, T * F))
    _count_dense(r, "enc.dense", C, depth, T * F)
    r.layers.append(conv2d_count("enc.down", C, C, 1, 3, T * Fr))
    block = bimamba_count if cfg.bidirectional else mamba_block_count
    for i in range(cfg.n_tf_blocks):
        r.extend(block(T, Fr, C, cfg.d_state, cfg.expand, cfg.d_conv), f"tf.{i}.time.")
        r.extend(block(Fr, T, C, cfg.d_state, cfg.expand, cfg.d_conv), f"tf.{i}.freq.")
    for dec in ("mag", "pha"):
        _count_dense(r, f"{dec}.dense", C, depth, T * Fr)
        r.layers.append(tconv2d_count(f"{dec}.up", C, C, 1, 3, T * Fr))
    r.layers.append(conv2d_count("mag.out", C, 1, 1, 1, T * F))
    r.add("mag.slope", "param", 2 * T * F, F)
    r.layers.append(conv2d_count("pha.out_r", C, 1, 1, 1, T * F))
    r.layers.append(conv2d_count("pha.out_i", C, 1, 1, 1, T * F))
    return r


def count_model(config, T: int, include_stft: bool = False) -> FlopsReport:
    """Analytic per-layer FLOPs and parameter counts for ``T`` frames."""
    from .models import AdvancedModelConfig, BasicModelConfig

    if T <= 0:
        raise ValueError("T must be positive")
    if isinstance(config, BasicModelConfig):
        r = _count_basic(config, T)
    elif isinstance(config, AdvancedModelConfig):
        r = _count_advanced(config, T)
    else:
        raise UnknownLayerError(f"no counting rules for {type(config).__name__}")
    if include_stft:
        r.add("stft", "stft", _stft_flops(config.stft, T), 0)
        r.add("istft", "stft", _stft_flops(config.stft, T), 0)
    return r


# ---------------------------------------------------------------- T sweeps

def fit_scaling_exponent(Ts: Sequence[int], flops: Sequence[float]) -> float:
    """Slope of log(flops) against log(T)."""
    return float(np.polyfit(np.log(np.asarray(Ts, float)), np.log(np.asarray(flops, float)), 1)[0])


def fit_quadratic(Ts: Sequence[int], values: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares (a2, a1, a0) for values ~ a2 T^2 + a1 T + a0.

    T is rescaled to [0, 1] before solving so the fit stays well conditioned.
    """
    T = np.asarray(Ts, dtype=float)
    v = np.asarray(values, dtype=float)
    s = T.max()
    V = np.stack([(T / s) ** 2, T / s, np.ones_like(T)], axis=1)
    (c2, c1, c0), *_ = np.linalg.lstsq(V, v, rcond=None)
    return c2 / s ** 2, c1 / s, c0


def sweep(counter: Callable[[int], FlopsReport], Ts: Iterable[int]) -> list[FlopsReport]:
    Ts = list(Ts)
    reports = [counter(T) for T in Ts]
    exponent = fit_scaling_exponent(Ts, [r.total_flops for r in reports]) if len(Ts) > 1 else None
    for r in reports:
        r.scaling_exponent = exponent
    return reports


def powers_of_two(lo: int, hi: int) -> list[int]:
    if lo <= 0 or hi < lo:
        raise ValueError("need 0 < lo <= hi")
    out = []
    t = lo
    while t <= hi:
        out.append(t)
        t *= 2
    return out


def crossover(d_model: int, n_layers: int, Ts: Sequence[int], **mamba_kw) -> int | None:
    """Smallest swept T at which the attention stack costs more than the Mamba stack."""
    for T in Ts:
        if count_attention_baseline(d_model, n_layers, T).total_flops > \
                count_mamba_stack(d_model, n_layers, T, **mamba_kw).total_flops:
            return T
    return None


def time_scan(T: int, channels: int = 16, d_state: int = 16, repeats: int = 5, seed: int = 0) -> float:
    """Median wall-clock seconds of one blocked parallel selective scan of length T."""
    from .ssm import selective_scan_parallel

    rng = np.random.default_rng(seed)
    x = rng.standard_normal((T, channels))
    delta = rng.uniform(1e-3, 1e-1, (T, channels))
    A = -np.exp(rng.standard_normal((channels, d_state)))
    B = rng.standard_normal((T, d_state))
    C = rng.standard_normal((T, d_state))
    D = np.ones(channels)
    selective_scan_parallel(x, delta, A, B, C, D)  # warm-up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        selective_scan_parallel(x, delta, A, B, C, D)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def scan_time_ratio(T: int, rounds: int = 9, repeats: int = 3, **kw) -> float:
    """Median over interleaved rounds of time_scan(2T) / time_scan(T).

    Interleaving keeps slow drift in machine load from biasing the ratio.
    """
    ratios = [time_scan(2 * T, repeats=repeats, **kw) / time_scan(T, repeats=repeats, **kw) for _ in range(rounds)]
    return float(np.median(ratios))


def write_sweep_csv(path: str | Path, rows: Sequence[dict]) -> None:
    if not rows:
        raise ValueError("nothing to write")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def bench_rows(Ts: Sequence[int], d_model: int = 64, n_layers: int = 4, time_it: bool = True) -> list[dict]:
    rows = []
    for T in Ts:
        row = {"T": T,
               "flops_mamba": count_mamba_stack(d_model, n_layers, T).total_flops,
               "flops_attention": count_attention_baseline(d_model, n_layers, T).total_flops}
        if time_it:
            row["scan_seconds"] = time_scan(T, repeats=3)
        rows.append(row)
    return rows
