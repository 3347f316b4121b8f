"""Synthetic mixtures, training loop and inference orchestration."""

from __future__ import annotations

import json
import logging
import sys
import warnings
import wave
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import lfilter

from . import losses
from .autodiff import NonFiniteError, Tape, Tensor
from .models import Checkpoint, get_kind, load_checkpoint, make_checkpoint, restore, save_checkpoint
from .models.advanced import AdvancedModelConfig, advanced_core, enhanced_spec
from .models.basic import BasicModelConfig, basic_core
from .spectral import PcsTable, istft, istft_op, pcs_apply, stft_complex

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
TRAIN_SNRS = (0.0, 5.0, 10.0, 15.0)
TEST_SNRS = (2.5, 7.5, 12.5, 17.5)
NOISE_TYPES = ("white", "pink", "babble")
PEAK = 0.95
MAX_DRAWS = 3


class SynthesisError(RuntimeError):
    pass


class TrainingDivergedError(FloatingPointError):
    pass


class WavFormatError(ValueError):
    pass


class ClippingWarning(UserWarning):
    pass


# ------------------------------------------------------------ synthesis

@dataclass(frozen=True)
class MixtureSpec:
    """One synthetic clean/noisy pair.

    The clean source alternates harmonic stacks (pitch and amplitude
    modulated) with AR(8)-filtered noise bursts, separated by short pauses.
    """
    snr_db: float
    noise: str = "white"
    seed: int = 0
    f0_low: float = 90.0
    f0_high: float = 250.0
    n_harmonics: int = 12
    voiced_prob: float = 0.75

    def __post_init__(self):
        if self.noise not in NOISE_TYPES:
            raise ValueError(f"noise must be one of {NOISE_TYPES}, got {self.noise!r}")
        if not 0 < self.f0_low <= self.f0_high:
            raise ValueError("need 0 < f0_low <= f0_high")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureSpec":
        return cls(**d)


def _stable_ar(rng: np.random.Generator, order: int = 8) -> np.ndarray:
    radii = rng.uniform(0.5, 0.95, order // 2)
    angles = rng.uniform(0.05, np.pi - 0.05, order // 2)
    roots = radii * np.exp(1j * angles)
    return np.real(np.poly(np.concatenate([roots, roots.conj()])))


def _harmonic_segment(rng, n: int, spec: MixtureSpec, sr: int) -> np.ndarray:
    t = np.arange(n) / sr
    f0 = rng.uniform(spec.f0_low, spec.f0_high)
    vib = 1 + rng.uniform(0.02, 0.08) * np.sin(2 * np.pi * rng.uniform(2, 6) * t + rng.uniform(0, 2 * np.pi))
    glide = np.linspace(1.0, rng.uniform(0.85, 1.15), n)
    phase = 2 * np.pi * np.cumsum(f0 * vib * glide) / sr
    tilt = rng.uniform(0.6, 1.2)
    formant = rng.uniform(400, 2500)
    out = np.zeros(n)
    for k in range(1, spec.n_harmonics + 1):
        if k * f0 * 1.2 >= sr / 2:
            break
        amp = k ** -tilt * (1 + 2 * np.exp(-((k * f0 - formant) / 300.0) ** 2))
        out += amp * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    am = 1 + 0.3 * np.sin(2 * np.pi * rng.uniform(3, 6) * t)
    return out * am * np.hanning(n)


def _burst_segment(rng, n: int) -> np.ndarray:
    return lfilter([1.0], _stable_ar(rng), rng.standard_normal(n)) * np.hanning(n)


def speech_like(rng: np.random.Generator, n: int, spec: MixtureSpec, sr: int = SAMPLE_RATE) -> np.ndarray:
    out = np.zeros(n)
    pos = int(rng.integers(0, int(0.05 * sr)))
    while pos < n:
        seg = int(rng.integers(int(0.08 * sr), int(0.3 * sr)))
        seg = min(seg, n - pos)
        if seg >= 32:
            if rng.random() < spec.voiced_prob:
                piece = _harmonic_segment(rng, seg, spec, sr)
            else:
                piece = _burst_segment(rng, seg)
            piece /= np.sqrt(np.mean(piece ** 2)) + 1e-12
            out[pos:pos + seg] = piece * rng.uniform(0.3, 1.0)
        pos += seg + int(rng.integers(int(0.02 * sr), int(0.12 * sr)))
    return out


def make_noise(rng: np.random.Generator, kind: str, n: int, spec: MixtureSpec, sr: int = SAMPLE_RATE) -> np.ndarray:
    if kind == "white":
        return rng.standard_normal(n)
    if kind == "pink":
        spectrum = np.fft.rfft(rng.standard_normal(n))
        f = np.arange(spectrum.size, dtype=float)
        f[0] = np.inf
        return np.fft.irfft(spectrum / np.sqrt(f), n)
    if kind == "babble":
        talkers = [speech_like(rng, n, spec, sr) for _ in range(6)]
        return np.sum(talkers, axis=0)
    raise ValueError(f"unknown noise type {kind!r}")


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def _draw_clean(spec: MixtureSpec, n: int, sr: int, generator=speech_like):
    for attempt in range(MAX_DRAWS):
        rng = np.random.default_rng(spec.seed if attempt == 0 else [spec.seed, attempt])
        clean = generator(rng, n, spec, sr)
        if np.all(np.isfinite(clean)) and power(clean) > 0:
            return rng, clean
    raise SynthesisError(f"clean draw for seed {spec.seed} was degenerate after {MAX_DRAWS} attempts")


def synth_pair(spec: MixtureSpec, duration_s: float, sample_rate: int = SAMPLE_RATE,
               generator=speech_like) -> tuple[np.ndarray, np.ndarray]:
    """(clean, noisy) at exactly ``spec.snr_db``; both share one peak gain <= 0.95."""
    if duration_s < 0.5:
        raise ValueError("duration must be at least 0.5 s")
    n = int(round(duration_s * sample_rate))
    rng, clean = _draw_clean(spec, n, sample_rate, generator)
    noise = make_noise(rng, spec.noise, n, spec, sample_rate)
    noise *= np.sqrt(power(clean) / (power(noise) * 10 ** (spec.snr_db / 10)))
    noisy = clean + noise
    gain = PEAK / max(np.max(np.abs(clean)), np.max(np.abs(noisy)))
    return clean * gain, noisy * gain


def measured_snr(clean: np.ndarray, noisy: np.ndarray) -> float:
    return 10 * np.log10(power(clean) / power(noisy - clean))


def make_specs(n: int, snrs: Sequence[float], seed: int, noises: Sequence[str] = NOISE_TYPES) -> list[MixtureSpec]:
    """``n`` specs cycling through ``snrs`` (and ``noises``) with per-item seeds."""
    seeds = np.random.default_rng(seed).integers(0, 2 ** 63, size=n)
    return [MixtureSpec(float(snrs[i % len(snrs)]), noises[(i // len(snrs)) % len(noises)], int(seeds[i]))
            for i in range(n)]


def train_specs(n: int, seed: int, noises: Sequence[str] = NOISE_TYPES) -> list[MixtureSpec]:
    return make_specs(n, TRAIN_SNRS, seed, noises)


def heldout_specs(n: int, seed: int, noises: Sequence[str] = NOISE_TYPES) -> list[MixtureSpec]:
    return make_specs(n, TEST_SNRS, seed, noises)


# ---------------------------------------------------------------- WAV I/O

def read_wav(path: str | Path, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getnchannels() != 1:
                raise WavFormatError(f"{path}: expected mono, got {fh.getnchannels()} channels")
            if fh.getsampwidth() != 2:
                raise WavFormatError(f"{path}: expected 16-bit PCM")
            if fh.getframerate() != sample_rate:
                raise WavFormatError(f"{path}: sample rate {fh.getframerate()} Hz, expected {sample_rate} Hz "
                                     "(resampling is not performed)")
            raw = fh.readframes(fh.getnframes())
    except wave.Error as e:
        raise WavFormatError(f"{path}: {e}") from None
    return np.frombuffer(raw, dtype="<i2").astype(float) / 32768.0


def quantize(x: np.ndarray) -> tuple[np.ndarray, float]:
    """int16 samples and the fraction of samples that had to be clipped."""
    scaled = np.round(np.asarray(x, dtype=float) * 32768.0)
    clipped = float(np.mean((scaled > 32767) | (scaled < -32768))) if scaled.size else 0.0
    return np.clip(scaled, -32768, 32767).astype("<i2"), clipped


def write_wav(path: str | Path, x: np.ndarray, sample_rate: int = SAMPLE_RATE) -> float:
    """Write 16-bit mono PCM; returns the clipped fraction."""
    pcm, clipped = quantize(x)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())
    return clipped


def synth_to_dir(specs: Sequence[MixtureSpec], duration_s: float, out: str | Path) -> Path:
    out = Path(out)
    (out / "clean").mkdir(parents=True, exist_ok=True)
    (out / "noisy").mkdir(parents=True, exist_ok=True)
    items = []
    for i, spec in enumerate(specs):
        clean, noisy = synth_pair(spec, duration_s)
        name = f"{i:05d}.wav"
        write_wav(out / "clean" / name, clean)
        write_wav(out / "noisy" / name, noisy)
        items.append({"file": name, **spec.to_dict()})
    manifest = {"duration_s": duration_s, "sample_rate": SAMPLE_RATE, "items": items}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


def load_dir(path: str | Path) -> list[tuple[np.ndarray, np.ndarray]]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    return [(read_wav(path / "clean" / it["file"]), read_wav(path / "noisy" / it["file"]))
            for it in manifest["items"]]


def load_synth_config(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        cfg = tomllib.load(fh).get("synth", {})
    allowed = {"n", "split", "duration_s", "noises", "seed"}
    unknown = set(cfg) - allowed
    if unknown:
        raise ValueError(f"unknown [synth] keys: {sorted(unknown)}")
    return cfg


def specs_from_synth_config(cfg: dict, seed: int | None = None) -> list[MixtureSpec]:
    split = cfg.get("split", "train")
    if split not in ("train", "test"):
        raise ValueError("split must be 'train' or 'test'")
    snrs = TRAIN_SNRS if split == "train" else TEST_SNRS
    return make_specs(int(cfg.get("n", 200)), snrs, cfg.get("seed", 0) if seed is None else seed,
                      tuple(cfg.get("noises", NOISE_TYPES)))


# --------------------------------------------------------------- training

MODEL_CONFIGS = {"basic": BasicModelConfig, "advanced": AdvancedModelConfig}


@dataclass(frozen=True)
class TrainConfig:
    model: str = "basic"
    model_config: dict = field(default_factory=dict)
    loss_weights: dict = field(default_factory=dict)
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    lr_halve_every: float = 0.3
    batch_size: int = 4
    segment_len: int = 16000
    steps: int = 1000
    seed: int = 0
    checkpoint_every: int = 0
    clip_seconds: float = 2.0

    def __post_init__(self):
        if self.model not in MODEL_CONFIGS:
            raise ValueError(f"unknown model {self.model!r}")
        if self.steps <= 0:
            raise ValueError("steps must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.lr < 0:
            raise ValueError("learning rate must be nonnegative")
        if not 0 < self.lr_halve_every <= 1:
            raise ValueError("lr_halve_every is a fraction of the run in (0, 1]")
        if self.segment_len < self.build_model_config().stft.win_len:
            raise ValueError("segment shorter than one STFT window")
        self.weights()  # validates the loss weights

    def build_model_config(self):
        return MODEL_CONFIGS[self.model].from_dict(self.model_config)

    def weights(self) -> losses.LossWeights:
        return losses.LossWeights.from_dict(self.loss_weights)

    def lr_at(self, step: int) -> float:
        period = max(1, int(round(self.lr_halve_every * self.steps)))
        return self.lr * 0.5 ** (step // period)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_toml(cls, path: str | Path) -> "TrainConfig":
        """Sections: [train] scalars, [model] config overrides (with optional
        [model.stft]), [loss] weights."""
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
        unknown = set(doc) - {"train", "model", "loss"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        d = dict(doc.get("train", {}))
        d["model_config"] = doc.get("model", {})
        d["loss_weights"] = doc.get("loss", {})
        return cls.from_dict(d)


def training_loss(kind: str, params, model_cfg, noisy: np.ndarray, clean: np.ndarray,
                  weights: losses.LossWeights | None = None) -> tuple[Tensor, dict[str, float]]:
    """Loss for a (B, L) batch. The basic model uses the compressed-magnitude MAE;
    the advanced model the weighted composite loss."""
    st = model_cfg.stft
    Xn = stft_complex(noisy, st)
    if kind == "basic":
        target = np.log1p(np.abs(stft_complex(clean, st)))
        loss = losses.mag_mae(basic_core(np.log1p(np.abs(Xn)), params, model_cfg), target)
        return loss, {"mag_mae": float(loss.data)}
    if kind == "advanced":
        c = model_cfg.compress
        cm, ph = advanced_core(np.abs(Xn) ** c, np.angle(Xn), params, model_cfg)
        spec = enhanced_spec(cm, ph, c)
        wav = istft_op(spec, st, noisy.shape[-1])
        return losses.composite_loss(wav, spec, Tensor(clean), weights or losses.LossWeights(), st, c)
    raise ValueError(f"unknown model kind {kind!r}")


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    def snap(self) -> None:
        """Round every buffer to float32 so checkpoints capture the state exactly."""
        for d in (self.params, self.m, self.v):
            for k in d:
                d[k] = d[k].astype(np.float32).astype(np.float64)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]


def _materialize(dataset, clip_seconds: float) -> list[tuple[np.ndarray, np.ndarray]]:
    pairs = []
    for item in dataset:
        if isinstance(item, MixtureSpec):
            pairs.append(synth_pair(item, clip_seconds))
        else:
            clean, noisy = item
            pairs.append((np.asarray(clean, float), np.asarray(noisy, float)))
    if not pairs:
        raise ValueError("empty dataset")
    return pairs


def sample_batch(pairs, step: int, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray, list]:
    """Deterministic batch for ``step``: drawn from default_rng([seed, step])."""
    rng = np.random.default_rng([cfg.seed, step])
    clean_b, noisy_b, picks = [], [], []
    for _ in range(cfg.batch_size):
        i = int(rng.integers(len(pairs)))
        clean, noisy = pairs[i]
        if clean.size < cfg.segment_len:
            padding = cfg.segment_len - clean.size
            clean, noisy = np.pad(clean, (0, padding)), np.pad(noisy, (0, padding))
        off = int(rng.integers(0, clean.size - cfg.segment_len + 1))
        clean_b.append(clean[off:off + cfg.segment_len])
        noisy_b.append(noisy[off:off + cfg.segment_len])
        picks.append((i, off))
    return np.stack(clean_b), np.stack(noisy_b), picks


def _state_checkpoint(cfg: TrainConfig, model_cfg, state: TrainState) -> Checkpoint:
    extras = {f"adam.m.{k}": v for k, v in state.m.items()}
    extras.update({f"adam.v.{k}": v for k, v in state.v.items()})
    meta = {"step": state.step, "seed": cfg.seed, "train_config": cfg.to_dict()}
    return Checkpoint(cfg.model, model_cfg.to_dict(), dict(state.params), meta, extras)


def _state_from_checkpoint(ckpt: Checkpoint, cfg: TrainConfig) -> TrainState:
    if ckpt.kind != cfg.model:
        raise ValueError(f"checkpoint holds a {ckpt.kind!r} model, config trains {cfg.model!r}")
    _, _, params = restore(ckpt)
    names = list(params)
    try:
        m = {k: ckpt.extras[f"adam.m.{k}"] for k in names}
        v = {k: ckpt.extras[f"adam.v.{k}"] for k in names}
    except KeyError as e:
        raise ValueError(f"checkpoint lacks optimizer state {e}") from None
    return TrainState({k: p.data for k, p in params.items()}, m, v, int(ckpt.metadata["step"]))


def train(cfg: TrainConfig, dataset, resume: Checkpoint | None = None,
          checkpoint_path: str | Path | None = None, log_path: str | Path | None = None,
          dump_dir: str | Path | None = None, stop_at: int | None = None) -> TrainResult:
    """Adam training. ``dataset`` holds MixtureSpecs or (clean, noisy) arrays.

    ``stop_at`` ends the run early (as if interrupted) without changing the
    learning-rate schedule, which is always laid out over ``cfg.steps``.

    Every ``checkpoint_every`` steps (and at the end) the state is rounded to
    float32 and optionally written to ``checkpoint_path``, so a run resumed from
    a checkpoint on that cadence continues bit-for-bit like the uninterrupted
    run.
    """
    model_cfg = cfg.build_model_config()
    kind = get_kind(cfg.model)
    weights = cfg.weights()
    pairs = _materialize(dataset, cfg.clip_seconds)
    if resume is not None:
        state = _state_from_checkpoint(resume, cfg)
    else:
        init = kind.init(model_cfg, np.random.default_rng(cfg.seed))
        state = TrainState({k: p.data for k, p in init.items()},
                           {k: np.zeros_like(p.data) for k, p in init.items()},
                           {k: np.zeros_like(p.data) for k, p in init.items()})
        state.snap()
    history: list[dict] = []
    log_fh = open(log_path, "a") if log_path else None
    try:
        end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
        while state.step < end:
            step = state.step
            clean, noisy, picks = sample_batch(pairs, step, cfg)
            params = {k: Tensor(v, requires_grad=True) for k, v in state.params.items()}
            try:
                with Tape() as tape:
                    loss, terms = training_loss(cfg.model, params, model_cfg, noisy, clean, weights)
                    tape.backward(loss)
            except NonFiniteError as e:
                _dump_batch(dump_dir, cfg, step, picks, clean, noisy)
                raise TrainingDivergedError(
                    f"non-finite value at step {step} ({e}); batch seed [{cfg.seed}, {step}], items {picks}"
                ) from None
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
            gnorm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
            if not np.isfinite(gnorm):
                _dump_batch(dump_dir, cfg, step, picks, clean, noisy)
                raise TrainingDivergedError(f"non-finite gradient at step {step}; batch seed [{cfg.seed}, {step}]")
            lr = cfg.lr_at(step)
            t = step + 1
            bc1 = 1 - cfg.beta1 ** t
            bc2 = 1 - cfg.beta2 ** t
            for k, g in grads.items():
                state.m[k] = cfg.beta1 * state.m[k] + (1 - cfg.beta1) * g
                state.v[k] = cfg.beta2 * state.v[k] + (1 - cfg.beta2) * g * g
                update = lr * (state.m[k] / bc1) / (np.sqrt(state.v[k] / bc2) + cfg.adam_eps)
                state.params[k] = state.params[k] - update
            state.step = t
            entry = {"step": t, "loss": float(loss.data), **terms, "grad_norm": gnorm, "lr": lr}
            history.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
            log.debug("step %d loss %.6f grad_norm %.4f", t, entry["loss"], gnorm)
            if (cfg.checkpoint_every and t % cfg.checkpoint_every == 0) or t == end:
                state.snap()
                if checkpoint_path is not None:
                    save_checkpoint(_state_checkpoint(cfg, model_cfg, state), checkpoint_path)
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(_state_checkpoint(cfg, model_cfg, state), history)


def _dump_batch(dump_dir, cfg: TrainConfig, step: int, picks, clean, noisy) -> None:
    if dump_dir is None:
        return
    d = Path(dump_dir)
    d.mkdir(parents=True, exist_ok=True)
    np.savez(d / f"diverged_step{step}.npz", clean=clean, noisy=noisy)
    (d / f"diverged_step{step}.json").write_text(json.dumps(
        {"step": step, "batch_seed": [cfg.seed, step], "items": picks}, indent=2))


# -------------------------------------------------------------- inference

def enhance_array(noisy: np.ndarray, ckpt: Checkpoint, pcs: PcsTable | None = None) -> np.ndarray:
    kind, model_cfg, params = restore(ckpt)
    spec = get_kind(kind).enhance_spec(noisy, params, model_cfg)
    if pcs is not None:
        spec = pcs_apply(spec, pcs)
    return istft(spec)


def enhance(wav_in: str | Path, ckpt_path: str | Path, wav_out: str | Path,
            pcs: PcsTable | None = None, kind: str | None = None) -> Path:
    """Enhance a 16 kHz mono 16-bit WAV file; output has the same length."""
    ckpt = load_checkpoint(ckpt_path, kind=kind)
    sr = ckpt.config.get("stft", {}).get("sample_rate", SAMPLE_RATE)
    noisy = read_wav(wav_in, sr)
    out = enhance_array(noisy, ckpt, pcs)
    clipped = write_wav(wav_out, out, sr)
    if clipped > 1e-3:
        warnings.warn(f"{clipped:.2%} of output samples were clipped", ClippingWarning, stacklevel=2)
    return Path(wav_out)


def evaluate(ref: str | Path, est: str | Path) -> dict:
    from .metrics import si_sdr, stoi

    r = read_wav(ref)
    e = read_wav(est)
    if r.size != e.size:
        raise ValueError(f"length mismatch: {r.size} vs {e.size}")
    return {"si_sdr": si_sdr(e, r), "stoi": stoi(e, r, SAMPLE_RATE)}


def passthrough_checkpoint(kind: str = "basic", model_cfg=None, seed: int = 0) -> Checkpoint:
    """Checkpoint whose model reproduces istft(stft(input)) (test fixture)."""
    spec = get_kind(kind)
    model_cfg = model_cfg or spec.config_cls()
    params = spec.init(model_cfg, np.random.default_rng(seed))
    if kind == "basic":
        zero = ["dec.weight", "dec.bias"]
    else:
        zero = ["mag.out.weight", "mag.out.bias", "pha.out_r.weight", "pha.out_r.bias",
                "pha.out_i.weight", "pha.out_i.bias"]
    for name in zero:
        params[name].data[...] = 0.0
    if kind == "advanced":
        # sigmoid(0) * beta == 1 requires beta == 2
        model_cfg = replace(model_cfg, mask_beta=2.0)
    return make_checkpoint(kind, model_cfg, params, {"step": 0, "seed": seed, "fixture": "passthrough"})
