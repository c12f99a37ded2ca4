"""Central finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

REL_FLOOR = 1e-8


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(fn: Callable[[dict[str, Tensor]], Tensor],
                     inputs: Mapping[str, np.ndarray], name: str, h: float) -> np.ndarray:
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    target = base[name]
    grad = np.zeros_like(target)
    flat, gflat = target.reshape(-1), grad.reshape(-1)
    with ad.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = fn({k: Tensor(v) for k, v in base.items()}).item()
            flat[i] = orig - h
            minus = fn({k: Tensor(v) for k, v in base.items()}).item()
            flat[i] = orig
            gflat[i] = (plus - minus) / (2.0 * h)
    return grad


def finite_diff_check(fn: Callable[[dict[str, Tensor]], Tensor],
                      inputs: Mapping[str, np.ndarray], h: float = 1e-5,
                      wrt: list[str] | None = None) -> float:
    """Max relative error between ``backward`` and central differences.

    ``fn`` maps a dict of named tensors to a scalar tensor and must be
    deterministic. Gradients are checked for every name in ``wrt`` (all
    inputs by default); the denominator is ``max(|analytic|, |numeric|, 1e-8)``.
    """
    wrt = list(inputs) if wrt is None else wrt
    leaves = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=k in wrt)
              for k, v in inputs.items()}
    grads = ad.backward(fn(leaves))
    worst = 0.0
    for name in wrt:
        analytic = grads.get(leaves[name], np.zeros_like(leaves[name].data))
        numeric = numeric_gradient(fn, inputs, name, h)
        worst = max(worst, float(relative_error(analytic, numeric).max(initial=0.0)))
    return worst
