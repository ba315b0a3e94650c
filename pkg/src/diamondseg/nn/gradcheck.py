"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .layers import Module


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    @property
    def worst(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def numeric_gradient(f: Callable[[], float], array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(array, dtype=np.float64)
    flat, gflat = array.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def grad_check(f: Callable[[], float], tensors: dict[str, np.ndarray], analytic: dict[str, np.ndarray],
               tolerance: float = 1e-4, h: float = 1e-5) -> GradCheckReport:
    """Compare ``analytic[name]`` with central differences of ``f`` w.r.t. ``tensors[name]``.

    ``f`` must read the arrays in ``tensors`` (which are perturbed in place).
    """
    errors = {}
    for name, array in tensors.items():
        if array.dtype != np.float64:
            raise TypeError(f"{name}: gradient checks run in float64")
        errors[name] = relative_error(analytic[name], numeric_gradient(f, array, h))
    return GradCheckReport(errors, tolerance)


def check_module(module: Module, x: np.ndarray, train: bool = True, seed: int = 0,
                 tolerance: float = 1e-4) -> GradCheckReport:
    """Gradient-check a module under the scalar objective ``sum(R * module(x))``."""
    module.astype(np.float64)
    x = x.astype(np.float64)
    buffers = {k: v.copy() for k, v in module.named_buffers()}

    def restore():
        for (k, v), m in zip(buffers.items(), [dict(module.named_buffers())[k] for k in buffers]):
            m[...] = v

    y = module.forward(x, train)
    weights = np.random.default_rng(seed).standard_normal(y.shape)
    module.zero_grad()
    dx = module.backward(weights)
    analytic = {"input": dx}
    tensors = {"input": x}
    for name, p in module.named_parameters():
        analytic[name] = p.grad.copy()
        tensors[name] = p.value

    def objective():
        restore()
        return float(np.sum(weights * module.forward(x, train)))

    report = grad_check(objective, tensors, analytic, tolerance)
    restore()
    return report


def check_loss(loss_fn: Callable, logits: np.ndarray, mask: np.ndarray, tolerance: float = 1e-4, **kwargs) -> GradCheckReport:
    logits = logits.astype(np.float64)
    _, dlogits = loss_fn(logits, mask, **kwargs)
    return grad_check(lambda: loss_fn(logits, mask, **kwargs)[0], {"logits": logits}, {"logits": dlogits}, tolerance)
