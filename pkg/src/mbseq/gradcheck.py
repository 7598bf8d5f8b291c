"""Central finite differences for checking autodiff gradients."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], target: Tensor, h: float = 1e-5) -> np.ndarray:
    """d fn() / d target by central differences, perturbing ``target.data`` in place."""
    grad = np.zeros_like(target.data)
    flat = target.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        plus = float(fn().data.sum())
        flat[i] = saved - h
        minus = float(fn().data.sum())
        flat[i] = saved
        out[i] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """||a - n|| / max(||a||, ||n||, floor) over the whole tensor."""
    diff = float(np.linalg.norm(analytic - numeric))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), floor)
    return diff / scale


def check_gradients(
    fn: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5, floor: float = 1e-8
) -> dict[str, float]:
    """Relative error between autodiff and finite differences for each tensor in ``params``."""
    params = list(params)
    for p in params:
        p.grad = None
    fn().sum().backward()
    errors = {}
    for i, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numerical_grad(fn, p, h)
        errors[p.name or f"param{i}"] = relative_error(analytic, numeric, floor)
    return errors
