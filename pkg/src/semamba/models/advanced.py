"""Magnitude-and-phase enhancer with time-frequency Mamba blocks (non-causal).

Pipeline: power-law compressed magnitude and phase stacked as two channels
-> encoder (1x1 conv, dilated dense block, frequency-halving conv) ->
N time-frequency blocks -> magnitude decoder (mask in [0, mask_beta]) and
phase decoder ((real, imag) maps -> atan2).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..autodiff import Tensor, ops
from ..autodiff.tensor import as_tensor
from ..spectral import Spectrogram, StftConfig, compress_power, decompress_power, istft, stft
from ..ssm import MambaConfig, Params, bimamba_forward, init_bimamba_params, init_mamba_params, \
    mamba_block_forward, prefixed, sub
from .common import conv, init_conv, param


@dataclass(frozen=True)
class AdvancedModelConfig:
    channels: int = 24
    dense_dilations: tuple[int, ...] = (1, 2, 4, 8)
    n_tf_blocks: int = 4
    bidirectional: bool = True
    d_state: int = 16
    expand: int = 2
    d_conv: int = 4
    compress: float = 0.3
    mask_beta: float = 2.0
    stft: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        if self.n_tf_blocks < 1:
            raise ValueError("n_tf_blocks must be >= 1")
        if not 0 < self.compress <= 1:
            raise ValueError("compression exponent must lie in (0, 1]")
        if self.stft.n_bins % 2 == 0:
            raise ValueError("frequency halving needs an odd bin count (even n_fft)")

    @property
    def mamba(self) -> MambaConfig:
        return MambaConfig(self.channels, self.d_state, self.expand, self.d_conv)

    @property
    def reduced_bins(self) -> int:
        return (self.stft.n_bins - 3) // 2 + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AdvancedModelConfig":
        d = dict(d)
        if "stft" in d:
            d["stft"] = StftConfig(**d["stft"])
        if "dense_dilations" in d:
            d["dense_dilations"] = tuple(d["dense_dilations"])
        return cls(**d)


def _init_dense(rng, C: int, depth: int, prefix: str) -> Params:
    p: Params = {}
    for i in range(depth):
        p[f"{prefix}.{i}.weight"], p[f"{prefix}.{i}.bias"] = init_conv(rng, C, C * (i + 1), 3, 3)
    return p


def init_advanced(cfg: AdvancedModelConfig, rng: np.random.Generator) -> Params:
    C = cfg.channels
    depth = len(cfg.dense_dilations)
    p: Params = {}
    p["enc.in.weight"], p["enc.in.bias"] = init_conv(rng, C, 2, 1, 1)
    p.update(_init_dense(rng, C, depth, "enc.dense"))
    p["enc.down.weight"], p["enc.down.bias"] = init_conv(rng, C, C, 1, 3)
    init = init_bimamba_params if cfg.bidirectional else init_mamba_params
    for i in range(cfg.n_tf_blocks):
        p.update(prefixed(init(cfg.mamba, rng), f"tf.{i}.time"))
        p.update(prefixed(init(cfg.mamba, rng), f"tf.{i}.freq"))
    for dec in ("mag", "pha"):
        p.update(_init_dense(rng, C, depth, f"{dec}.dense"))
        w, b = init_conv(rng, C, C, 1, 3)  # (C_in, C_out, kh, kw) for the transposed conv
        p[f"{dec}.up.weight"], p[f"{dec}.up.bias"] = w, b
    p["mag.out.weight"], p["mag.out.bias"] = init_conv(rng, 1, C, 1, 1)
    p["mag.slope"] = param(np.ones(cfg.stft.n_bins))
    for part in ("r", "i"):
        w, b = init_conv(rng, 1, C, 1, 1)
        p[f"pha.out_{part}.weight"], p[f"pha.out_{part}.bias"] = param(w.data * 0.1), b
    return p


def dense_block(x, params: Params, prefix: str, dilations) -> Tensor:
    """Dilated (along time) dense block; each layer sees all earlier outputs."""
    feats = [x]
    out = x
    for i, d in enumerate(dilations):
        inp = feats[0] if i == 0 else ops.concat(feats, axis=1)
        out = ops.silu(conv(inp, params, f"{prefix}.{i}", padding=((d, d), (1, 1)), dilation=(d, 1)))
        feats.append(out)
    return out


def _seq_block(bidirectional: bool):
    return bimamba_forward if bidirectional else mamba_block_forward


def tf_mamba_block(features, params: Params, bidirectional: bool = True) -> Tensor:
    """(B, C, T, F) -> (B, C, T, F): a residual pass along time for every
    frequency bin, then a residual pass along frequency for every frame."""
    x = as_tensor(features)
    B, C, T, F = x.shape
    block = _seq_block(bidirectional)
    seq = ops.reshape(ops.transpose(x, (0, 3, 2, 1)), (B * F, T, C))
    y = block(seq, sub(params, "time"))
    x = ops.add(x, ops.transpose(ops.reshape(y, (B, F, T, C)), (0, 3, 2, 1)))
    seq = ops.reshape(ops.transpose(x, (0, 2, 3, 1)), (B * T, F, C))
    y = block(seq, sub(params, "freq"))
    return ops.add(x, ops.transpose(ops.reshape(y, (B, T, F, C)), (0, 3, 1, 2)))


def advanced_core(cmag, phase, params: Params, cfg: AdvancedModelConfig) -> tuple[Tensor, Tensor]:
    """(B, T, F) compressed magnitude and phase -> enhanced (compressed magnitude, phase)."""
    cmag, phase = as_tensor(cmag), as_tensor(phase)
    B, T, F = cmag.shape
    x = ops.concat([ops.reshape(cmag, (B, 1, T, F)), ops.reshape(phase, (B, 1, T, F))], axis=1)
    x = ops.silu(conv(x, params, "enc.in"))
    x = dense_block(x, params, "enc.dense", cfg.dense_dilations)
    x = ops.silu(conv(x, params, "enc.down", stride=(1, 2)))
    for i in range(cfg.n_tf_blocks):
        x = tf_mamba_block(x, sub(params, f"tf.{i}"), cfg.bidirectional)

    def decode(prefix):
        h = dense_block(x, params, f"{prefix}.dense", cfg.dense_dilations)
        return ops.silu(ops.transposed_conv2d(h, params[f"{prefix}.up.weight"], params[f"{prefix}.up.bias"],
                                              stride=(1, 2)))

    m = ops.reshape(conv(decode("mag"), params, "mag.out"), (B, T, F))
    mask = ops.mul(ops.sigmoid(ops.mul(m, params["mag.slope"])), cfg.mask_beta)
    hp = decode("pha")
    r = ops.add(ops.reshape(conv(hp, params, "pha.out_r"), (B, T, F)), ops.cos(phase))
    i = ops.add(ops.reshape(conv(hp, params, "pha.out_i"), (B, T, F)), ops.sin(phase))
    return ops.mul(mask, cmag), ops.atan2(i, r)


def enhanced_spec(cmag_hat: Tensor, phase_hat: Tensor, c: float) -> Tensor:
    """Decompress and recombine into (..., T, F, 2) real/imag pairs."""
    mag = ops.power(cmag_hat, 1.0 / c)
    shape = mag.shape + (1,)
    return ops.concat([ops.reshape(ops.mul(mag, ops.cos(phase_hat)), shape),
                       ops.reshape(ops.mul(mag, ops.sin(phase_hat)), shape)], axis=-1)


def advanced_enhance_spec(noisy_wave: np.ndarray, params: Params, cfg: AdvancedModelConfig) -> Spectrogram:
    wave = np.asarray(noisy_wave, dtype=float)
    if wave.ndim not in (1, 2):
        raise ValueError("wave must be (L,) or (batch, L)")
    noisy = stft(wave, cfg.stft)
    batch = (lambda a: a[None]) if wave.ndim == 1 else (lambda a: a)
    cm_hat, ph_hat = advanced_core(Tensor(batch(compress_power(noisy.mag, cfg.compress))),
                                   Tensor(batch(noisy.phase)), params, cfg)
    mag = decompress_power(cm_hat.data, cfg.compress).reshape(noisy.mag.shape)
    return Spectrogram(mag, ph_hat.data.reshape(noisy.mag.shape), cfg.stft, wave.shape[-1])


def advanced_forward(noisy_wave: np.ndarray, params: Params, cfg: AdvancedModelConfig) -> np.ndarray:
    """Enhance (L,) or (B, L) waveforms; output has the input's shape."""
    return istft(advanced_enhance_spec(noisy_wave, params, cfg))
