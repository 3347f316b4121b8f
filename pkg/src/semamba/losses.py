"""Training objectives.

Spectra are Tensors shaped (..., frames, bins, 2) holding (real, imag),
as produced by :func:`semamba.spectral.stft_op`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

from .autodiff import Tensor, ops
from .autodiff.tensor import as_tensor
from .spectral import StftConfig, istft_op, stft_op

MAG_EPS = 1e-9
TERMS = ("time", "mag", "complex", "phase", "consistency")


@dataclass(frozen=True)
class LossWeights:
    w_time: float = 0.2
    w_mag: float = 0.9
    w_complex: float = 0.1
    w_phase: float = 0.3
    w_consistency: float = 0.1
    # discriminator term of the metric-GAN objective; not implemented
    w_gan: float = 0.0

    def __post_init__(self):
        if self.w_gan != 0:
            raise NotImplementedError("the PESQ-based GAN discriminator loss is not implemented")
        values = [getattr(self, f"w_{t}") for t in TERMS]
        if any(v < 0 for v in values):
            raise ValueError("loss weights must be nonnegative")
        if not any(v > 0 for v in values):
            raise ValueError("at least one loss weight must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        known = set(asdict(cls()))
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown loss weights: {sorted(unknown)}")
        return cls(**d)


def _check_same(a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")


def mag_mae(pred_cmag, target_cmag) -> Tensor:
    pred_cmag, target_cmag = as_tensor(pred_cmag), as_tensor(target_cmag)
    _check_same(pred_cmag, target_cmag)
    return ops.mean(ops.abs(ops.sub(pred_cmag, target_cmag)))


def _power_spec(spec: Tensor) -> Tensor:
    return ops.add(ops.sum(ops.square(spec), axis=-1), MAG_EPS)


def compressed_mag(spec, c: float = 0.3) -> Tensor:
    return ops.power(_power_spec(as_tensor(spec)), c / 2)


def compressed_complex(spec, c: float = 0.3) -> Tensor:
    """mag**c * exp(i*phase), as (real, imag) pairs."""
    spec = as_tensor(spec)
    scale = ops.power(_power_spec(spec), (c - 1) / 2)
    return ops.mul(spec, ops.reshape(scale, scale.shape + (1,)))


def spec_phase(spec) -> Tensor:
    spec = as_tensor(spec)
    return ops.atan2(spec[..., 1], spec[..., 0])


def phase_distance(pred_phase, target_phase) -> Tensor:
    """Mean anti-wrapped distance |wrap(a - b)|, wrap into (-pi, pi]."""
    pred_phase, target_phase = as_tensor(pred_phase), as_tensor(target_phase)
    _check_same(pred_phase, target_phase)
    d = ops.sub(pred_phase, target_phase)
    return ops.mean(ops.abs(ops.atan2(ops.sin(d), ops.cos(d))))


def consistency_loss(pred_spec, cfg: StftConfig, length: int) -> Tensor:
    """Squared distance between a spectrum and stft(istft(spectrum)), per bin."""
    pred_spec = as_tensor(pred_spec)
    projected = stft_op(istft_op(pred_spec, cfg, length), cfg)
    if projected.shape != pred_spec.shape:
        raise ValueError("spectrum frame count does not match the signal length")
    n_bins = pred_spec.size // 2
    return ops.div(ops.sum(ops.square(ops.sub(pred_spec, projected))), float(n_bins))


def composite_loss(pred_wave, pred_spec, target_wave, weights: LossWeights,
                   cfg: StftConfig, c: float = 0.3) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of time, magnitude, complex, phase and consistency terms.

    Returns the total and a per-term breakdown of the unweighted terms in the
    fixed order of ``TERMS``.
    """
    pred_wave, pred_spec, target_wave = map(as_tensor, (pred_wave, pred_spec, target_wave))
    _check_same(pred_wave, target_wave)
    target_spec = stft_op(target_wave.detach(), cfg)
    _check_same(pred_spec, target_spec)
    length = target_wave.shape[-1]

    terms = {
        "time": ops.mean(ops.abs(ops.sub(pred_wave, target_wave))),
        "mag": ops.mean(ops.square(ops.sub(compressed_mag(pred_spec, c), compressed_mag(target_spec, c)))),
        "complex": ops.mean(ops.square(ops.sub(compressed_complex(pred_spec, c),
                                               compressed_complex(target_spec, c)))),
        "phase": phase_distance(spec_phase(pred_spec), spec_phase(target_spec)),
        "consistency": consistency_loss(pred_spec, cfg, length),
    }
    total = None
    for name in TERMS:
        contrib = ops.mul(terms[name], getattr(weights, f"w_{name}"))
        total = contrib if total is None else ops.add(total, contrib)
    return total, {name: float(terms[name].data) for name in TERMS}
