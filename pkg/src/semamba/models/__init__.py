"""Enhancement models and their persistence."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..spectral import Spectrogram
from ..ssm import Params
from .advanced import AdvancedModelConfig, advanced_core, advanced_enhance_spec, advanced_forward, init_advanced, \
    tf_mamba_block
from .basic import BasicModelConfig, basic_core, basic_enhance_spec, basic_forward, init_basic
from .checkpoint import Checkpoint, CheckpointCorruptError, CheckpointError, CheckpointKindError, \
    CheckpointVersionError, ParameterMismatchError, check_inventory, load_checkpoint, save_checkpoint


@dataclass(frozen=True)
class ModelKind:
    name: str
    config_cls: type
    init: Callable[..., Params]
    forward: Callable[..., np.ndarray]
    enhance_spec: Callable[..., Spectrogram]


KINDS = {
    "basic": ModelKind("basic", BasicModelConfig, init_basic, basic_forward, basic_enhance_spec),
    "advanced": ModelKind("advanced", AdvancedModelConfig, init_advanced, advanced_forward,
                          advanced_enhance_spec),
}

# the four configurations mirrored from the comparison tables
SHIPPED_CONFIGS = {
    "basic-causal": ("basic", BasicModelConfig(causal=True)),
    "basic-noncausal": ("basic", BasicModelConfig(causal=False)),
    "advanced-uni": ("advanced", AdvancedModelConfig(bidirectional=False)),
    "advanced-bi": ("advanced", AdvancedModelConfig(bidirectional=True)),
}


def get_kind(name: str) -> ModelKind:
    try:
        return KINDS[name]
    except KeyError:
        raise ValueError(f"unknown model kind {name!r}; choose from {sorted(KINDS)}") from None


def inventory(kind: str, config) -> dict[str, tuple[int, ...]]:
    params = get_kind(kind).init(config, np.random.default_rng(0))
    return {k: v.shape for k, v in params.items()}


def make_checkpoint(kind: str, config, params: Params, metadata: dict | None = None,
                    extras: dict | None = None) -> Checkpoint:
    return Checkpoint(kind, config.to_dict(), {k: v.data for k, v in params.items()},
                      dict(metadata or {}), dict(extras or {}))


def restore(ckpt: Checkpoint, kind: str | None = None):
    """Validate a checkpoint against its config inventory -> (kind, config, params)."""
    if kind is not None and ckpt.kind != kind:
        raise CheckpointKindError(f"checkpoint holds a {ckpt.kind!r} model, expected {kind!r}")
    spec = get_kind(ckpt.kind)
    config = spec.config_cls.from_dict(ckpt.config)
    check_inventory(ckpt.params, inventory(ckpt.kind, config))
    return ckpt.kind, config, ckpt.tensors()


def enhance_wave(kind: str, config, params: Params, wave: np.ndarray) -> np.ndarray:
    return get_kind(kind).forward(wave, params, config)


__all__ = [
    "AdvancedModelConfig", "BasicModelConfig", "Checkpoint", "CheckpointCorruptError", "CheckpointError",
    "CheckpointKindError", "CheckpointVersionError", "KINDS", "ParameterMismatchError", "SHIPPED_CONFIGS",
    "advanced_core", "advanced_enhance_spec", "advanced_forward", "basic_core", "basic_enhance_spec", "basic_forward", "check_inventory", "enhance_wave",
    "get_kind", "init_advanced", "init_basic", "inventory", "load_checkpoint", "make_checkpoint", "restore",
    "save_checkpoint", "tf_mamba_block",
]
