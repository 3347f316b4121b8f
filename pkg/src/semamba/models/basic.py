"""Basic magnitude-only enhancer: log1p magnitude -> conv encoder -> Mamba stack -> FC decoder.

The decoder predicts a correction that is added to the noisy compressed
magnitude; the enhanced magnitude is recombined with the unmodified noisy
phase.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..autodiff import Tensor, ops
from ..autodiff.tensor import as_tensor
from ..spectral import Spectrogram, StftConfig, compress_log1p, decompress_expm1, istft, stft
from ..ssm import MambaConfig, Params, bimamba_forward, init_bimamba_params, init_mamba_params, \
    mamba_block_forward, prefixed, sub
from .common import conv, init_conv, init_linear, linear, param


@dataclass(frozen=True)
class BasicModelConfig:
    enc_channels: tuple[int, ...] = (16, 32, 48, 64)
    enc_freq_strides: tuple[int, ...] = (1, 2, 1, 2)
    enc_kernel: int = 3
    d_model: int = 64
    n_mamba: int = 2
    d_state: int = 16
    expand: int = 2
    d_conv: int = 4
    causal: bool = True
    stft: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        if self.n_mamba < 1:
            raise ValueError("n_mamba must be >= 1")
        if len(self.enc_channels) != len(self.enc_freq_strides):
            raise ValueError("one frequency stride per encoder layer")
        if self.enc_kernel % 2 != 1:
            raise ValueError("encoder kernel must be odd")

    @property
    def mamba(self) -> MambaConfig:
        return MambaConfig(self.d_model, self.d_state, self.expand, self.d_conv)

    def freq_sizes(self) -> list[int]:
        """Frequency extent entering each encoder layer, plus the final one."""
        k = self.enc_kernel
        sizes = [self.stft.n_bins]
        for s in self.enc_freq_strides:
            sizes.append((sizes[-1] + 2 * (k // 2) - k) // s + 1)
        return sizes

    @property
    def flat_features(self) -> int:
        return self.enc_channels[-1] * self.freq_sizes()[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BasicModelConfig":
        d = dict(d)
        if "stft" in d:
            d["stft"] = StftConfig(**d["stft"])
        for key in ("enc_channels", "enc_freq_strides"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def init_basic(cfg: BasicModelConfig, rng: np.random.Generator) -> Params:
    p: Params = {}
    c_in = 1
    k = cfg.enc_kernel
    for i, c_out in enumerate(cfg.enc_channels):
        p[f"enc.{i}.weight"], p[f"enc.{i}.bias"] = init_conv(rng, c_out, c_in, k, k)
        c_in = c_out
    p["proj.weight"], p["proj.bias"] = init_linear(rng, cfg.flat_features, cfg.d_model)
    for i in range(cfg.n_mamba):
        init = init_mamba_params if cfg.causal else init_bimamba_params
        p.update(prefixed(init(cfg.mamba, rng), f"mamba.{i}"))
    w, b = init_linear(rng, cfg.d_model, cfg.stft.n_bins)
    # start as a passthrough of the noisy magnitude
    p["dec.weight"], p["dec.bias"] = param(w.data * 0.1), b
    return p


def basic_core(cmag, params: Params, cfg: BasicModelConfig) -> Tensor:
    """(B, T, F) compressed noisy magnitude -> (B, T, F) enhanced compressed magnitude.

    With ``cfg.causal`` every stage only looks back in time, so output frame
    t depends on input frames <= t.
    """
    cmag = as_tensor(cmag)
    B, T, F = cmag.shape
    k = cfg.enc_kernel
    t_pad = (k - 1, 0) if cfg.causal else (k // 2, k // 2)
    h = ops.reshape(cmag, (B, 1, T, F))
    for i, s in enumerate(cfg.enc_freq_strides):
        h = ops.silu(conv(h, params, f"enc.{i}", stride=(1, s), padding=(t_pad, (k // 2, k // 2))))
    C, Fp = h.shape[1], h.shape[3]
    h = ops.reshape(ops.transpose(h, (0, 2, 1, 3)), (B, T, C * Fp))
    h = linear(h, params, "proj")
    block = mamba_block_forward if cfg.causal else bimamba_forward
    for i in range(cfg.n_mamba):
        h = block(h, sub(params, f"mamba.{i}"))
    return ops.add(cmag, linear(h, params, "dec"))


def basic_enhance_spec(noisy_wave: np.ndarray, params: Params, cfg: BasicModelConfig) -> Spectrogram:
    """Enhanced magnitude paired with the noisy phase, for (L,) or (B, L) input."""
    wave = np.asarray(noisy_wave, dtype=float)
    if wave.ndim not in (1, 2):
        raise ValueError("wave must be (L,) or (batch, L)")
    noisy = stft(wave, cfg.stft)
    cmag = compress_log1p(noisy.mag)
    est = basic_core(Tensor(cmag[None] if wave.ndim == 1 else cmag), params, cfg).data
    mag = decompress_expm1(np.maximum(est, 0.0)).reshape(noisy.mag.shape)
    return Spectrogram(mag, noisy.phase, cfg.stft, wave.shape[-1])


def basic_forward(noisy_wave: np.ndarray, params: Params, cfg: BasicModelConfig) -> np.ndarray:
    """Enhance (L,) or (B, L) waveforms; output has the input's shape."""
    return istft(basic_enhance_spec(noisy_wave, params, cfg))
