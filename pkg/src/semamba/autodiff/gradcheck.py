"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


class NonDeterministicError(RuntimeError):
    """Two forward evaluations at the same point disagreed."""


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    n_checked: int
    per_input: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_error={self.max_rel_error:.3e} tol={self.tol:.0e} "
                f"coords={self.n_checked}")


def _scalar(out: Tensor) -> float:
    if out.size != 1:
        raise ValueError("grad_check function must return a scalar tensor")
    return float(out.data.reshape(-1)[0])


def grad_check(
    fn: Callable[..., Tensor],
    point: Tensor | Sequence[Tensor],
    tol: float = 1e-6,
    step: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of a scalar ``fn`` with central differences.

    ``point`` is one tensor or a sequence of tensors passed positionally and
    treated as a single flattened vector. The error is normwise:
    ``max|analytic - numeric| / max(max|numeric|, max|analytic|)`` over all
    checked coordinates. ``per_input`` holds the same ratio per input,
    normalized by the global scale. With ``max_coords`` only a random subset
    of coordinates per input is perturbed.
    """
    points = [point] if isinstance(point, Tensor) else list(point)
    leaves = [Tensor(p.data.copy(), requires_grad=True) for p in points]

    with Tape() as tape:
        out = fn(*leaves)
    _scalar(out)
    tape.backward(out)
    # compare two gradient-free passes: they take the same code path as the
    # finite differences below (taped passes may use a different scan schedule)
    first = _scalar(fn(*[Tensor(p.data) for p in leaves]))
    again = _scalar(fn(*[Tensor(p.data) for p in leaves]))
    if again != first:
        raise NonDeterministicError(f"fn not deterministic: {first!r} vs {again!r}")

    rng = np.random.default_rng(seed)
    base = [p.data for p in leaves]
    analytic_parts, numeric_parts = [], []
    for k, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat_idx = np.arange(leaf.size)
        if max_coords is not None and leaf.size > max_coords:
            flat_idx = np.sort(rng.choice(leaf.size, size=max_coords, replace=False))
        numeric = np.zeros(len(flat_idx))
        for j, fi in enumerate(flat_idx):
            idx = np.unravel_index(fi, leaf.shape)
            plus = base[k].copy()
            minus = base[k].copy()
            plus[idx] += step
            minus[idx] -= step
            f_p = _scalar(fn(*[Tensor(plus if i == k else b) for i, b in enumerate(base)]))
            f_m = _scalar(fn(*[Tensor(minus if i == k else b) for i, b in enumerate(base)]))
            numeric[j] = (f_p - f_m) / (2 * step)
        analytic_parts.append(analytic.reshape(-1)[flat_idx])
        numeric_parts.append(numeric)

    a_all = np.concatenate(analytic_parts)
    n_all = np.concatenate(numeric_parts)
    scale = max(np.max(np.abs(a_all), initial=0.0), np.max(np.abs(n_all), initial=0.0))
    if scale == 0:
        return GradCheckReport(0.0, tol, len(a_all), [0.0] * len(leaves))
    per_input = [float(np.max(np.abs(a - n), initial=0.0) / scale)
                 for a, n in zip(analytic_parts, numeric_parts)]
    return GradCheckReport(max(per_input), tol, len(a_all), per_input)
