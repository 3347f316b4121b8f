from __future__ import annotations

from typing import Mapping

import numpy as np

from ..autodiff import Tensor, ops
from ..ssm import Params


def param(value) -> Tensor:
    return Tensor(value, requires_grad=True)


def init_conv(rng: np.random.Generator, c_out: int, c_in: int, kh: int, kw: int) -> tuple[Tensor, Tensor]:
    bound = 1.0 / np.sqrt(c_in * kh * kw)
    return param(rng.uniform(-bound, bound, (c_out, c_in, kh, kw))), param(np.zeros(c_out))


def init_linear(rng: np.random.Generator, d_in: int, d_out: int) -> tuple[Tensor, Tensor]:
    bound = 1.0 / np.sqrt(d_in)
    return param(rng.uniform(-bound, bound, (d_in, d_out))), param(np.zeros(d_out))


def conv(x, p: Mapping[str, Tensor], name: str, **kw) -> Tensor:
    return ops.conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], **kw)


def linear(x, p: Mapping[str, Tensor], name: str) -> Tensor:
    return ops.linear(x, p[f"{name}.weight"], p[f"{name}.bias"])


def zero_params(params: Params, names) -> None:
    """Test-fixture helper: zero the named tensors in place."""
    for n in names:
        params[n].data[...] = 0.0
