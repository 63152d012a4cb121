"""Tempered softmax, cross-entropy, KL divergence and the combined distillation loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DomainError

PROB_CLAMP = 1e-12
ROW_SUM_TOL = 1e-9
LOSS_KINDS = ("cross_entropy", "kl_divergence", "combined")


@dataclass(frozen=True)
class LossSpec:
    """Loss selection for a training step.

    ``alpha`` weights the hard-label term of the combined loss, so the
    distillation term gets ``1 - alpha``. ``t_squared`` rescales the
    distillation term by ``temperature**2``; ``double_softmax`` re-applies
    the tempered softmax to the (already probabilistic) targets.
    """

    kind: str = "cross_entropy"
    alpha: float = 0.1
    temperature: float = 1.0
    t_squared: bool = False
    double_softmax: bool = False

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise DomainError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise DomainError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.temperature > 0:
            raise DomainError(f"temperature must be positive, got {self.temperature}")


def softmax_with_temperature(logits, temperature: float = 1.0) -> np.ndarray:
    """Row-wise ``exp(z / T) / sum(exp(z / T))`` with max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    if not temperature > 0 or not np.isfinite(temperature):
        raise DomainError(f"temperature must be a positive finite number, got {temperature}")
    if not np.all(np.isfinite(z)):
        raise DomainError("logits must be finite")
    scaled = z / temperature
    scaled = scaled - scaled.max(axis=-1, keepdims=True)
    e = np.exp(scaled)
    return e / e.sum(axis=-1, keepdims=True)


def _as_rows(probs, what):
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 1:
        p = p[None, :]
    if p.ndim != 2 or p.shape[0] == 0:
        raise DomainError(f"{what} must be a non-empty matrix of probability rows")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > ROW_SUM_TOL):
        raise DomainError(f"{what} rows must be non-negative and sum to 1")
    return p


def _label_indices(labels, n_rows, n_classes):
    y = np.asarray(labels)
    if y.ndim == 2:
        y = y.argmax(axis=1)
    y = y.reshape(-1)
    if y.shape[0] != n_rows:
        raise DomainError(f"{y.shape[0]} labels for {n_rows} rows")
    if np.any(y < 0) or np.any(y >= n_classes) or np.any(y != np.round(y)):
        raise DomainError(f"labels must be class indices in [0, {n_classes})")
    return y.astype(np.int64)


def cross_entropy(probs, labels) -> float:
    """Mean of ``-log p[true class]`` with ``p`` clamped at 1e-12."""
    p = _as_rows(probs, "probs")
    y = _label_indices(labels, p.shape[0], p.shape[1])
    picked = np.maximum(p[np.arange(len(y)), y], PROB_CLAMP)
    return float(-np.log(picked).mean())


def kl_divergence(p, q) -> float:
    """Mean over rows of ``sum_k p_k ln(p_k / q_k)``; ``0 ln 0`` is 0."""
    p = _as_rows(p, "p")
    q = _as_rows(q, "q")
    if p.shape != q.shape:
        raise DomainError(f"shape mismatch: {p.shape} vs {q.shape}")
    return float(_kl_rows(p, q).mean())


def _kl_rows(p, q):
    q = np.maximum(q, PROB_CLAMP)
    safe_p = np.where(p > 0, p, 1.0)
    return np.where(p > 0, p * np.log(safe_p / q), 0.0).sum(axis=1)


def loss_terms(logits, labels, soft_targets, loss: LossSpec, num_classes=None):
    """Loss value, gradient w.r.t. logits and the ``(ce, kl)`` parts.

    Only the first ``num_classes`` logit columns take part; surplus head
    units receive zero gradient.
    """
    logits = np.asarray(logits, dtype=np.float64)
    n, width = logits.shape
    k = width if num_classes is None else int(num_classes)
    if not 1 <= k <= width:
        raise DomainError(f"num_classes {k} incompatible with {width} logits")
    z = logits[:, :k]
    grad = np.zeros_like(logits)
    ce = kl = 0.0
    w_ce = {"cross_entropy": 1.0, "kl_divergence": 0.0, "combined": loss.alpha}[loss.kind]
    w_kl = {"cross_entropy": 0.0, "kl_divergence": 1.0, "combined": 1.0 - loss.alpha}[loss.kind]

    if loss.kind != "kl_divergence":
        y = _label_indices(labels, n, k)
        probs = softmax_with_temperature(z, 1.0)
        ce = float(-np.log(np.maximum(probs[np.arange(n), y], PROB_CLAMP)).mean())
        g = probs.copy()
        g[np.arange(n), y] -= 1.0
        grad[:, :k] += w_ce * (g / n)

    if loss.kind != "cross_entropy":
        if soft_targets is None:
            raise DomainError(f"{loss.kind} loss needs soft targets")
        T = loss.temperature
        target = _as_rows(soft_targets, "soft targets")
        if target.shape != (n, k):
            raise DomainError(f"soft targets shape {target.shape} != {(n, k)}")
        if loss.double_softmax:
            target = softmax_with_temperature(target, T)
        q = softmax_with_temperature(z, T)
        scale = T * T if loss.t_squared else 1.0
        kl = scale * float(_kl_rows(target, q).mean())
        grad[:, :k] += w_kl * scale * (q - target) / (T * n)

    return w_ce * ce + w_kl * kl, grad, (ce, kl)


def combine(student_loss: float, distill_loss: float, alpha: float) -> float:
    return alpha * student_loss + (1.0 - alpha) * distill_loss
