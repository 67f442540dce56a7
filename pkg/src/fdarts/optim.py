"""In-place optimizer steps and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .autograd import NumericFault, Tensor


def _arrays(params):
    return [p.data if isinstance(p, Tensor) else p for p in params]


def _check_finite(params, grads):
    for k, (p, g) in enumerate(zip(params, grads)):
        if not np.all(np.isfinite(g)):
            name = getattr(p, "name", None) or f"param[{k}]"
            raise NumericFault(f"non-finite gradient for {name}")


def sgd_momentum_step(
    params: Sequence,
    grads: Sequence[np.ndarray],
    state: dict | None,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 3e-4,
) -> dict:
    """``v <- momentum*v + (g + wd*p)``; ``p <- p - lr*v``. Updates params in place."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    _check_finite(params, grads)
    arrays = _arrays(params)
    if state is None or "velocity" not in state:
        state = {"velocity": [np.zeros_like(a) for a in arrays]}
    for a, g, v in zip(arrays, grads, state["velocity"]):
        d = g + weight_decay * a if weight_decay else g
        v *= momentum
        v += d
        a -= lr * v
    return state


def adam_step(
    params: Sequence,
    grads: Sequence[np.ndarray],
    state: dict | None,
    lr: float = 3e-4,
    beta1: float = 0.5,
    beta2: float = 0.999,
    weight_decay: float = 1e-3,
    eps_adam: float = 1e-8,
    masks: Sequence[np.ndarray] | None = None,
) -> dict:
    """Bias-corrected Adam with L2 weight decay folded into the gradient.

    ``masks`` (boolean, one per param) restricts the update: entries outside
    the mask are left bitwise untouched and their moments stay at zero.
    """
    if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
        raise ValueError("betas must lie in [0, 1)")
    _check_finite(params, grads)
    arrays = _arrays(params)
    if state is None or "m" not in state:
        state = {
            "step": 0,
            "m": [np.zeros_like(a) for a in arrays],
            "v": [np.zeros_like(a) for a in arrays],
        }
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k, (a, g, m, v) in enumerate(zip(arrays, grads, state["m"], state["v"])):
        sel = masks[k] if masks is not None else None
        if sel is None:
            d = g + weight_decay * a if weight_decay else g
            m *= beta1
            m += (1 - beta1) * d
            v *= beta2
            v += (1 - beta2) * d * d
            a -= lr * (m / c1) / (np.sqrt(v / c2) + eps_adam)
        else:
            d = g[sel] + weight_decay * a[sel] if weight_decay else g[sel]
            m[sel] = beta1 * m[sel] + (1 - beta1) * d
            v[sel] = beta2 * v[sel] + (1 - beta2) * d * d
            a[sel] = a[sel] - lr * (m[sel] / c1) / (np.sqrt(v[sel] / c2) + eps_adam)
    return state


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Single-cycle cosine annealing from ``lr_max`` down to ``lr_min``."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))
