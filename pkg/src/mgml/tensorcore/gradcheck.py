"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``.

    Both-zero gradients count as an exact match.
    """
    diff = float(np.linalg.norm(analytic - numeric))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    if scale < 1e-12:
        return diff
    return diff / scale


def numerical_gradient(loss_fn: Callable[[], Tensor], param: Tensor, h: float = 1e-6) -> np.ndarray:
    base = param.numpy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        param.assign(base)
        plus = loss_fn().item()
        flat[i] = orig - h
        param.assign(base)
        minus = loss_fn().item()
        flat[i] = orig
        grad.reshape(-1)[i] = (plus - minus) / (2.0 * h)
    param.assign(base)
    return grad


def gradcheck(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-6,
) -> dict[str, float]:
    """Compare tape gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must rebuild the graph from the current parameter values on
    every call. Returns the relative error per parameter name.
    """
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros(p.shape))
        for name, p in params.items()
    }
    errors = {}
    for name, p in params.items():
        numeric = numerical_gradient(loss_fn, p, h)
        errors[name] = relative_error(analytic[name], numeric)
    for p in params.values():
        p.zero_grad()
    return errors
