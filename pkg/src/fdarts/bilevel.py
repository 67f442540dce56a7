"""Alternating architecture/weight optimisation with the one-step unrolled architecture gradient.

The model handed to these functions needs ``weights()``, ``arch_parameters()``
(Tensors holding the architecture matrices), ``archs()`` (the matching
:class:`ArchMatrix` objects) and ``loss(x, y)``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .autograd import GradientTape
from .optim import adam_step, cosine_lr, sgd_momentum_step
from .search_space import ArchMatrix

log = logging.getLogger(__name__)

FD_RADIUS = 0.01


class ContractViolation(RuntimeError):
    """An update would touch architecture entries outside the learnable block."""


@dataclass
class BilevelState:
    model: object
    xi: float = 0.025
    gamma: float = 3e-4
    order: str = "second"
    lr_max: float = 0.025
    lr_min: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 3e-4
    arch_beta1: float = 0.5
    arch_beta2: float = 0.999
    arch_weight_decay: float = 1e-3
    total_epochs: int = 1
    epoch: int = 0
    grad_clip: float | None = None
    arch_optimizer_state: list = field(default_factory=list)
    w_optimizer_state: dict | None = None
    diagnostics: list = field(default_factory=list)

    def __post_init__(self):
        if self.order not in ("first", "second"):
            raise ValueError(f"order must be 'first' or 'second', got {self.order!r}")
        if self.xi < 0:
            raise ValueError("xi must be non-negative")
        if not self.arch_optimizer_state:
            self.arch_optimizer_state = [None] * len(self.model.archs())

    @property
    def lr(self) -> float:
        return cosine_lr(min(self.epoch, self.total_epochs), self.total_epochs, self.lr_max, self.lr_min)


def _grads(model, x, y, sources):
    with GradientTape() as tape:
        loss = model.loss(x, y)
    return loss.item(), tape.gradient(loss, sources)


def _clip(grads, max_norm):
    if max_norm is None:
        return grads
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        return [g * scale for g in grads]
    return grads


def weight_step(state: BilevelState, train_batch, lr: float | None = None) -> float:
    """One momentum-SGD update of the network weights on ``train_batch``; returns the loss."""
    x, y = train_batch
    if len(y) == 0:
        raise ValueError("empty training batch")
    weights = state.model.weights()
    loss, g = _grads(state.model, x, y, weights)
    g = _clip(g, state.grad_clip)
    state.w_optimizer_state = sgd_momentum_step(
        weights, g, state.w_optimizer_state, state.lr if lr is None else lr, state.momentum, state.weight_decay
    )
    return loss


def virtual_step(model, train_batch, xi: float) -> list[np.ndarray]:
    """Move weights to ``w - xi * grad L_train`` in place; returns the original weights."""
    weights = model.weights()
    backup = [w.data.copy() for w in weights]
    _, g = _grads(model, *train_batch, weights)
    for w, gw in zip(weights, g):
        w.data -= xi * gw
    return backup


def _restore(weights, backup):
    for w, b in zip(weights, backup):
        w.data[...] = b


def _mask(grads, archs: list[ArchMatrix]):
    return [np.where(a.learnable_mask, g, 0.0) for g, a in zip(grads, archs)]


def arch_gradient(state: BilevelState, train_batch, val_batch) -> list[np.ndarray]:
    """Gradient of the validation loss w.r.t. every architecture matrix, zero outside the learnable block.

    First order differentiates ``L_val(w, a)`` directly. Second order
    differentiates through one plain gradient step ``w' = w - xi * dL_train/dw``
    and approximates the mixed second derivative by central differences of
    ``dL_train/da`` at ``w +/- eps * dL_val/dw'`` with ``eps = 0.01 / |dL_val/dw'|``.
    """
    model = state.model
    archs = model.archs()
    alphas = model.arch_parameters()
    if state.order == "first" or state.xi == 0.0:
        _, g = _grads(model, *val_batch, alphas)
        return _mask(g, archs)

    weights = model.weights()
    backup = virtual_step(model, train_batch, state.xi)
    _, g = _grads(model, *val_batch, weights + alphas)
    d_w, d_alpha = g[: len(weights)], g[len(weights):]
    _restore(weights, backup)

    norm = math.sqrt(sum(float((v * v).sum()) for v in d_w))
    if norm == 0.0:
        msg = "zero validation gradient w.r.t. weights; second-order correction skipped"
        log.warning(msg)
        state.diagnostics.append(msg)
        return _mask(d_alpha, archs)
    eps = FD_RADIUS / norm
    for w, v in zip(weights, d_w):
        w.data += eps * v
    _, g_pos = _grads(model, *train_batch, alphas)
    for w, v in zip(weights, d_w):
        w.data -= 2.0 * eps * v
    _, g_neg = _grads(model, *train_batch, alphas)
    _restore(weights, backup)

    hvp = [(p - n) / (2.0 * eps) for p, n in zip(g_pos, g_neg)]
    return _mask([da - state.xi * h for da, h in zip(d_alpha, hvp)], archs)


def masked_arch_update(arch: ArchMatrix, grad: np.ndarray, gamma: float, opt_state: dict | None = None,
                       mode: str = "adam", beta1: float = 0.5, beta2: float = 0.999,
                       weight_decay: float = 1e-3, eps_adam: float = 1e-8):
    """Step only the learnable block; everything else keeps its exact bits.

    ``mode="adam"`` uses Adam with learning rate ``gamma`` (optimizer moments
    cover the learnable entries only); ``mode="sgd"`` is plain descent.
    Returns ``(arch, opt_state)``.
    """
    grad = np.asarray(grad)
    if grad.shape != arch.shape:
        raise ValueError(f"gradient shape {grad.shape} != architecture shape {arch.shape}")
    if np.any(grad[~arch.learnable_mask] != 0):
        raise ContractViolation("non-zero gradient outside the learnable block")
    if gamma == 0.0:
        return arch, opt_state
    mask = arch.learnable_mask
    vals = arch.values.data
    if mode == "sgd":
        vals[mask] = vals[mask] - gamma * grad[mask]
        return arch, opt_state
    if mode != "adam":
        raise ValueError(f"unknown update mode {mode!r}")
    block = vals[mask]
    opt_state = adam_step([block], [grad[mask]], opt_state, lr=gamma, beta1=beta1, beta2=beta2,
                          weight_decay=weight_decay, eps_adam=eps_adam)
    vals[mask] = block
    return arch, opt_state


def arch_step(state: BilevelState, train_batch, val_batch) -> None:
    grads = arch_gradient(state, train_batch, val_batch)
    for k, (arch, g) in enumerate(zip(state.model.archs(), grads)):
        _, state.arch_optimizer_state[k] = masked_arch_update(
            arch, g, state.gamma, state.arch_optimizer_state[k], "adam",
            state.arch_beta1, state.arch_beta2, state.arch_weight_decay,
        )


def evaluate(model, batches: Iterable) -> tuple[float, float]:
    """(mean loss, accuracy) in evaluation mode, no tape."""
    was_training = getattr(model, "training", True)
    model.eval()
    from .nn import cross_entropy  # local: keeps this module free of network imports

    total, correct, loss_sum = 0, 0, 0.0
    for x, y in batches:
        logits = model(x)
        loss_sum += cross_entropy(logits, y).item() * len(y)
        correct += int((logits.data.argmax(axis=1) == np.asarray(y)).sum())
        total += len(y)
    model.train(was_training)
    if total == 0:
        return float("nan"), float("nan")
    return loss_sum / total, correct / total


def mean_row_entropy(archs: list[ArchMatrix]) -> float:
    return float(np.mean(np.concatenate([a.row_entropy() for a in archs])))


def search_epoch(state: BilevelState, train_stream: Iterable, val_stream: Iterable) -> dict:
    """Per batch pair: architecture update on the validation batch, then a weight update."""
    train_it, val_it = iter(train_stream), iter(val_stream)
    lr = state.lr
    train_losses, seen_val = [], []
    short = False
    while True:
        tb = next(train_it, None)
        vb = next(val_it, None)
        if tb is None or vb is None:
            short = (tb is None) != (vb is None)
            break
        arch_step(state, tb, vb)
        train_losses.append(weight_step(state, tb, lr))
        seen_val.append(vb)
    if not train_losses:
        return {}
    state.epoch += 1
    val_loss, val_acc = evaluate(state.model, seen_val)
    entropy = [a.row_entropy() for a in state.model.archs()]
    return {
        "epoch": state.epoch,
        "train_loss": float(np.mean(train_losses)),
        "val_loss": val_loss,
        "val_acc": val_acc,
        "mean_row_entropy": float(np.mean(np.concatenate(entropy))),
        "row_entropy": [e.tolist() for e in entropy],
        "lr": lr,
        "short_epoch": short,
    }


METRIC_FIELDS = ("epoch", "train_loss", "val_loss", "val_acc", "mean_row_entropy")


def append_metrics_csv(path, metrics: dict, fields=METRIC_FIELDS) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(fields)
        w.writerow([metrics[f] for f in fields])
