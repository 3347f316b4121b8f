"""STFT analysis/synthesis, magnitude compression and perceptual contrast stretching.

Conventions: frames are centered (reflect padding by n_fft // 2 on both
ends), the window is a periodic Hann of ``win_len`` zero-padded to
``n_fft``, and synthesis is the least-squares overlap-add
``sum_t w * frame_t / sum_t w**2``, so ``istft(stft(x)) == x``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .autodiff import Tensor, primitive
from .autodiff.tensor import as_tensor


class ColaError(ValueError):
    """Window/hop combination leaves samples that overlap-add cannot recover."""


def periodic_hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 400
    hop: int = 100
    win_len: int = 400
    sample_rate: int = 16000

    def __post_init__(self):
        if self.win_len > self.n_fft:
            raise ValueError("win_len must not exceed n_fft")
        if self.hop <= 0 or self.win_len <= 0:
            raise ValueError("hop and win_len must be positive")
        # every residue class mod hop needs nonzero summed squared window
        w2 = self.window ** 2
        env = np.zeros(self.hop)
        for start in range(0, self.n_fft, self.hop):
            seg = w2[start:start + self.hop]
            env[:len(seg)] += seg
        if env.min() <= 1e-10 * env.max():
            raise ColaError(f"hop {self.hop} leaves gaps for window {self.win_len}/{self.n_fft}")

    @property
    def window(self) -> np.ndarray:
        w = np.zeros(self.n_fft)
        off = (self.n_fft - self.win_len) // 2
        w[off:off + self.win_len] = periodic_hann(self.win_len)
        return w

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def n_frames(self, length: int) -> int:
        return 1 + length // self.hop

    def bin_frequencies(self) -> np.ndarray:
        return np.arange(self.n_bins) * self.sample_rate / self.n_fft


@dataclass
class Spectrogram:
    mag: np.ndarray
    phase: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    origin_len: int = 0

    def __post_init__(self):
        if self.mag.shape != self.phase.shape:
            raise ValueError("mag and phase shapes differ")
        if self.mag.shape[-1] != self.config.n_bins:
            raise ValueError(f"expected {self.config.n_bins} bins, got {self.mag.shape[-1]}")
        if np.any(self.mag < 0):
            raise ValueError("magnitude must be nonnegative")

    @classmethod
    def from_complex(cls, X: np.ndarray, config: StftConfig, origin_len: int) -> "Spectrogram":
        return cls(np.abs(X), wrap_phase(np.angle(X)), config, origin_len)

    def to_complex(self) -> np.ndarray:
        return self.mag * np.exp(1j * self.phase)


def wrap_phase(p: np.ndarray) -> np.ndarray:
    """Map angles into (-pi, pi]."""
    p = np.mod(p + np.pi, 2 * np.pi) - np.pi
    return np.where(p <= -np.pi, p + 2 * np.pi, p)


# ------------------------------------------------------ linear building blocks

def _reflect_pad(x: np.ndarray, pad: int) -> np.ndarray:
    if x.shape[-1] <= pad:
        raise ValueError(f"signal of {x.shape[-1]} samples too short to reflect-pad by {pad}")
    return np.pad(x, [(0, 0)] * (x.ndim - 1) + [(pad, pad)], mode="reflect")


def _reflect_pad_adjoint(g: np.ndarray, pad: int) -> np.ndarray:
    L = g.shape[-1] - 2 * pad
    gx = g[..., pad:pad + L].copy()
    gx[..., 1:pad + 1] += g[..., :pad][..., ::-1]
    gx[..., L - 1 - pad:L - 1] += g[..., pad + L:][..., ::-1]
    return gx


def _frame(xp: np.ndarray, n_fft: int, hop: int, n_frames: int) -> np.ndarray:
    view = np.lib.stride_tricks.sliding_window_view(xp, n_fft, axis=-1)
    return view[..., :(n_frames - 1) * hop + 1:hop, :]


def _overlap_add(frames: np.ndarray, hop: int, total: int) -> np.ndarray:
    """Adjoint of :func:`_frame`: sum frames back into a (..., total) signal."""
    *lead, T, N = frames.shape
    R = -(-N // hop)
    span = R * hop
    fr = np.zeros(tuple(lead) + (T, span))
    fr[..., :N] = frames
    out = np.zeros(tuple(lead) + (max(total, (T + R) * hop),))
    for r in range(R):
        group = fr[..., r::R, :]
        m = group.shape[-2]
        flat = group.reshape(tuple(lead) + (m * span,))
        out[..., r * hop:r * hop + m * span] += flat
    return out[..., :total]


def _onesided_weights(n_fft: int) -> np.ndarray:
    c = np.full(n_fft // 2 + 1, 2.0)
    c[0] = 1.0
    if n_fft % 2 == 0:
        c[-1] = 1.0
    return c


def _envelope(cfg: StftConfig, n_frames: int, total: int) -> np.ndarray:
    w2 = np.broadcast_to(cfg.window ** 2, (n_frames, cfg.n_fft))
    return _overlap_add(w2, cfg.hop, total)


def stft_complex(wave: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Centered STFT of (..., L) real signals -> (..., frames, bins) complex."""
    wave = np.asarray(wave, dtype=float)
    if wave.shape[-1] == 0:
        raise ValueError("empty input")
    pad = cfg.n_fft // 2
    xp = _reflect_pad(wave, pad)
    frames = _frame(xp, cfg.n_fft, cfg.hop, cfg.n_frames(wave.shape[-1]))
    return np.fft.rfft(frames * cfg.window, axis=-1)


def istft_complex(X: np.ndarray, cfg: StftConfig, length: int) -> np.ndarray:
    """Least-squares overlap-add inverse of :func:`stft_complex`, trimmed to ``length``."""
    n_frames = X.shape[-2]
    pad = cfg.n_fft // 2
    total = (n_frames - 1) * cfg.hop + cfg.n_fft
    if total < length + pad:
        raise ValueError(f"{n_frames} frames cannot cover {length} samples")
    frames = np.fft.irfft(X, n=cfg.n_fft, axis=-1) * cfg.window
    y = _overlap_add(frames, cfg.hop, total)
    env = _envelope(cfg, n_frames, total)
    seg = slice(pad, pad + length)
    if env[seg].min() <= 1e-10:
        raise ColaError("overlap-add envelope vanishes inside the signal")
    return y[..., seg] / env[seg]


def stft(wave: np.ndarray, cfg: StftConfig | None = None) -> Spectrogram:
    cfg = cfg or StftConfig()
    wave = np.asarray(wave, dtype=float)
    if wave.shape[-1] < cfg.win_len:
        raise ValueError(f"need at least {cfg.win_len} samples, got {wave.shape[-1]}")
    if not np.all(np.isfinite(wave)):
        raise ValueError("non-finite samples")
    return Spectrogram.from_complex(stft_complex(wave, cfg), cfg, wave.shape[-1])


def istft(spec: Spectrogram) -> np.ndarray:
    return istft_complex(spec.to_complex(), spec.config, spec.origin_len)


# ------------------------------------------------- differentiable counterparts

def stft_op(wave, cfg: StftConfig) -> Tensor:
    """Differentiable STFT; output (..., frames, bins, 2) holding (real, imag)."""
    wave = as_tensor(wave)
    L = wave.shape[-1]
    X = stft_complex(wave.data, cfg)
    out = np.stack([X.real, X.imag], axis=-1)
    pad = cfg.n_fft // 2
    c = _onesided_weights(cfg.n_fft)

    def bw(g):
        G = g[..., 0] + 1j * g[..., 1]
        frames = cfg.n_fft * np.fft.irfft(G / c, n=cfg.n_fft, axis=-1) * cfg.window
        gp = _overlap_add(frames, cfg.hop, L + 2 * pad)
        return (_reflect_pad_adjoint(gp, pad),)

    return primitive("stft", out, (wave,), bw)


def istft_op(spec, cfg: StftConfig, length: int) -> Tensor:
    """Differentiable inverse of :func:`stft_op`; input (..., frames, bins, 2)."""
    spec = as_tensor(spec)
    n_frames = spec.shape[-3]
    X = spec.data[..., 0] + 1j * spec.data[..., 1]
    y = istft_complex(X, cfg, length)
    pad = cfg.n_fft // 2
    total = (n_frames - 1) * cfg.hop + cfg.n_fft
    env = _envelope(cfg, n_frames, total)
    c = _onesided_weights(cfg.n_fft)

    def bw(g):
        full = np.zeros(g.shape[:-1] + (total,))
        full[..., pad:pad + length] = g / env[pad:pad + length]
        frames = _frame(full, cfg.n_fft, cfg.hop, n_frames) * cfg.window
        G = np.fft.rfft(frames, axis=-1) * (c / cfg.n_fft)
        return (np.stack([G.real, G.imag], axis=-1),)

    return primitive("istft", y, (spec,), bw)


# ---------------------------------------------------------------- compression

def compress_log1p(mag: np.ndarray) -> np.ndarray:
    mag = np.asarray(mag, dtype=float)
    if np.any(mag < 0):
        raise ValueError("negative magnitude")
    return np.log1p(mag)


def decompress_expm1(cmag: np.ndarray) -> np.ndarray:
    return np.expm1(np.asarray(cmag, dtype=float))


def compress_power(mag: np.ndarray, c: float = 0.3) -> np.ndarray:
    if not 0 < c <= 1:
        raise ValueError("compression exponent must lie in (0, 1]")
    mag = np.asarray(mag, dtype=float)
    if np.any(mag < 0):
        raise ValueError("negative magnitude")
    return np.power(mag, c)


def decompress_power(cmag: np.ndarray, c: float = 0.3) -> np.ndarray:
    if not 0 < c <= 1:
        raise ValueError("compression exponent must lie in (0, 1]")
    return np.power(np.asarray(cmag, dtype=float), 1.0 / c)


# ------------------------------------------------------------------------ PCS

@dataclass(frozen=True)
class PcsTable:
    """Per-band gains applied to log1p-compressed magnitudes.

    ``bands`` is a tuple of (low_hz, high_hz, gain) covering [0, nyquist]
    without gaps; a bin at frequency f belongs to the band with
    low <= f < high (the last band also takes f == high).
    """

    bands: tuple[tuple[float, float, float], ...]
    nyquist: float = 8000.0

    def __post_init__(self):
        if not self.bands:
            raise ValueError("PCS table needs at least one band")
        prev = 0.0
        for low, high, gain in self.bands:
            if low != prev or high <= low:
                raise ValueError(f"bands must tile [0, {self.nyquist}] in order; bad band {low}-{high}")
            if not gain > 0:
                raise ValueError("PCS gains must be positive")
            prev = high
        if prev != self.nyquist:
            raise ValueError(f"bands end at {prev}, expected {self.nyquist}")

    @classmethod
    def identity(cls, sample_rate: int = 16000) -> "PcsTable":
        return cls(((0.0, sample_rate / 2, 1.0),), sample_rate / 2)

    @property
    def is_identity(self) -> bool:
        return all(g == 1.0 for _, _, g in self.bands)

    def bin_gains(self, cfg: StftConfig) -> np.ndarray:
        freqs = cfg.bin_frequencies()
        gains = np.empty_like(freqs)
        for i, f in enumerate(freqs):
            for low, high, gain in self.bands:
                if low <= f < high or (f == high == self.nyquist):
                    gains[i] = gain
                    break
            else:
                raise ValueError(f"no band covers {f} Hz")
        return gains


def parse_pcs_table(text: str, sample_rate: int = 16000) -> PcsTable:
    bands = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"line {lineno}: expected 'low_hz high_hz gain'")
        bands.append(tuple(float(p) for p in parts))
    return PcsTable(tuple(bands), sample_rate / 2)


def load_pcs_table(path: str | Path, sample_rate: int = 16000) -> PcsTable:
    return parse_pcs_table(Path(path).read_text(), sample_rate)


def default_pcs_table() -> PcsTable:
    """Illustrative 8-band table shipped with the package (not published coefficients)."""
    text = resources.files("semamba").joinpath("data/pcs_default.txt").read_text()
    return parse_pcs_table(text)


def pcs_apply(spec: Spectrogram, table: PcsTable) -> Spectrogram:
    """mag' = expm1(gain_b * log1p(mag)) per bin; phase untouched.

    Bins whose gain is exactly 1 are copied, so the identity table is a
    bit-exact no-op.
    """
    if table.nyquist != spec.config.sample_rate / 2:
        raise ValueError("PCS table and spectrogram disagree on sample rate")
    gains = table.bin_gains(spec.config)
    mag = spec.mag.copy()
    active = gains != 1.0
    if np.any(active):
        mag[..., active] = np.expm1(gains[active] * np.log1p(spec.mag[..., active]))
    return Spectrogram(mag, spec.phase.copy(), spec.config, spec.origin_len)
