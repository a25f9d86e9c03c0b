"""Finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import NumericalError, Tensor


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_param: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def _rel_error(analytic: np.ndarray, numeric: np.ndarray, atol: float) -> float:
    # atol keeps blocks whose true gradient is zero (bias before batch norm,
    # key bias under softmax) from scoring pure difference noise as error
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), atol))


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | list[Tensor],
    eps: float = 1e-6,
    max_coords: int = 32,
    seed: int = 0,
    tol: float = 1e-4,
    analytic: Mapping[str, np.ndarray] | None = None,
    atol: float | None = None,
) -> GradCheckResult:
    """Compare reverse-mode gradients of scalar ``f`` against central differences.

    ``f`` is re-evaluated after each in-place perturbation of a parameter
    value, so it must read parameters at call time. Blocks larger than
    ``max_coords`` are probed at that many random coordinates. The error per
    block is ``||g_rev - g_fd|| / ||g_fd||`` over the probed coordinates and
    the maximum over blocks is returned.

    The denominator is floored at ``atol`` (default ``1e-6 * max(1, |f|)``),
    below which finite differences cannot resolve a gradient.

    ``analytic`` overrides the reverse-mode gradients (used to verify that a
    wrong gradient is caught).
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    if not isinstance(params, Mapping):
        params = {f"p{i}": p for i, p in enumerate(params)}
    rng = np.random.default_rng(seed)

    for p in params.values():
        p.grad = None
    out = f()
    if out.value.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    if not np.isfinite(out.value).all():
        raise NumericalError("non-finite function value at the probe point")
    out.backward()
    if atol is None:
        atol = 1e-6 * max(1.0, abs(float(out.value)))

    result = GradCheckResult(max_rel_error=0.0, tol=tol)
    for name, p in params.items():
        if analytic is not None and name in analytic:
            g_rev = np.asarray(analytic[name], dtype=np.float64)
        elif p.grad is None:
            g_rev = np.zeros(p.shape)
        else:
            g_rev = np.asarray(p.grad, dtype=np.float64)
        flat = p.value.reshape(-1)
        if flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(len(coords))
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + eps
            fp = float(f().value)
            flat[c] = orig - eps
            fm = float(f().value)
            flat[c] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericalError(f"non-finite value while probing {name}[{c}]")
            # actual step after rounding to the parameter dtype
            step = float(np.asarray(orig + eps, dtype=flat.dtype)) - float(np.asarray(orig - eps, dtype=flat.dtype))
            numeric[j] = (fp - fm) / step
        err = _rel_error(g_rev.reshape(-1)[coords], numeric, atol)
        result.per_param[name] = err
        result.max_rel_error = max(result.max_rel_error, err)
    return result
