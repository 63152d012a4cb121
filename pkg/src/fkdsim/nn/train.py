"""Single optimization steps and the finite-difference gradient check."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DomainError, NumericError
from .losses import LossSpec, loss_terms
from .model import ModelState, run_backward, run_forward


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.01
    momentum: float = 0.0
    batch_size: int = 32

    def __post_init__(self):
        if self.learning_rate < 0:
            raise DomainError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise DomainError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise DomainError("batch_size must be at least 1")


def loss_and_grads(model: ModelState, batch, labels, soft_targets, loss: LossSpec,
                   num_classes=None, update_stats=False):
    """Train-mode loss, parameter gradients and ``(ce, kl)`` parts for one batch."""
    logits, tape = run_forward(model, batch, training=True, update_stats=update_stats)
    value, dlogits, parts = loss_terms(logits, labels, soft_targets, loss, num_classes)
    return value, run_backward(tape, dlogits), parts


def sgd_update(model: ModelState, grads: dict, opt: OptimizerConfig) -> None:
    for name, g in grads.items():
        step = g
        if opt.momentum:
            v = model.velocity.get(name)
            v = g.copy() if v is None else opt.momentum * v + g
            model.velocity[name] = v
            step = v
        model.params[name] = model.params[name] - opt.learning_rate * step


def train_step(model: ModelState, batch, labels, soft_targets, loss: LossSpec,
               optimizer: OptimizerConfig, num_classes=None):
    """One SGD step in place. Returns ``(model, pre-step loss)``.

    BN moving statistics are folded in during the forward pass; they are
    statistics, not optimizer-driven, so they move even at learning rate 0.
    """
    model.train()
    value, grads, _ = loss_and_grads(model, batch, labels, soft_targets, loss, num_classes, update_stats=True)
    sgd_update(model, grads, optimizer)
    return model, value


def _scalar_loss(model, batch, labels, soft_targets, loss, num_classes):
    logits, _ = run_forward(model, batch, training=True)
    return loss_terms(logits, labels, soft_targets, loss, num_classes)[0]


def gradient_check(model: ModelState, batch, labels, soft_targets, loss: LossSpec,
                   epsilon: float = 1e-5, num_classes=None, max_per_tensor=None,
                   seed: int = 0, floor: float = 1e-6) -> float:
    """Max relative error between backprop and central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    The floor keeps gradients that are identically zero (e.g. a conv bias
    feeding batchnorm) from turning difference round-off into huge ratios.
    ``max_per_tensor`` samples that many coordinates per tensor (seeded)
    instead of sweeping every one; useful on large models.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise DomainError("epsilon must lie in [1e-7, 1e-3]")
    _, grads, _ = loss_and_grads(model, batch, labels, soft_targets, loss, num_classes)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, param in model.params.items():
        flat = param.reshape(-1)
        coords = np.arange(flat.size)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            coords = np.sort(rng.choice(flat.size, size=max_per_tensor, replace=False))
        analytic = grads[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            up = _scalar_loss(model, batch, labels, soft_targets, loss, num_classes)
            flat[i] = orig - epsilon
            down = _scalar_loss(model, batch, labels, soft_targets, loss, num_classes)
            flat[i] = orig
            numeric = (up - down) / (2 * epsilon)
            if not np.isfinite(numeric):
                raise NumericError(f"non-finite finite difference at {name}[{i}]")
            a = analytic[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst
