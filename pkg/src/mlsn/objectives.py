"""Losses and ramp-up schedules for the MLSN objective.

Every loss accepts either tape nodes (and then returns a scalar node on the
same graph) or plain arrays (and then returns a float).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import LOG_FLOOR, Graph, Node, ShapeError
from .networks import ModelState, similarity_node

PRED_CLAMP = 1e-12


def _lift(x) -> tuple[Graph, Node, bool]:
    if isinstance(x, Node):
        return x.graph, x, False
    g = Graph()
    return g, g.input(np.asarray(x, dtype=np.float64)), True


def _result(node: Node, eager: bool):
    return node.item() if eager else node


def cross_entropy(probs, labels: Sequence[int]):
    """Mean of ``-log p[i, y_i]`` over rows (probabilities clamped at 1e-12)."""
    g, p, eager = _lift(probs)
    n, k = p.shape
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {labels.size} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"cross_entropy: label out of range [0, {k})")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    picked = g.reduce_sum(g.product(g.input(onehot), g.log(p)))
    return _result(g.scalar_scale(picked, -1.0 / n), eager)


def soft_cross_entropy(probs, targets):
    """Mean over rows of ``-sum_k t_k log p_k``; targets are constants."""
    g, p, eager = _lift(probs)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != p.shape:
        raise ShapeError(f"soft_cross_entropy: targets {t.shape} vs probs {p.shape}")
    if np.any(t < 0) or np.any(np.abs(t.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("soft_cross_entropy: target rows must be probability vectors")
    total = g.reduce_sum(g.product(g.input(t), g.log(p)))
    return _result(g.scalar_scale(total, -1.0 / p.shape[0]), eager)


def consistency_loss(student_probs, teacher_probs):
    """Mean squared difference over all entries; the teacher side is a constant."""
    g, s, eager = _lift(student_probs)
    t = teacher_probs.value if isinstance(teacher_probs, Node) else np.asarray(teacher_probs, dtype=np.float64)
    if t.shape != s.shape:
        raise ShapeError(f"consistency_loss: shapes {s.shape} vs {t.shape}")
    diff = g.sub(s, g.input(t))
    return _result(g.reduce_mean(g.power(diff, 2)), eager)


def focal_loss_batch(preds, targets, gamma: float = 2.0, alpha_pos: float = 0.25):
    """Mean of ``-a_t (1 - p_t)^gamma log p_t`` over a batch of binary predictions."""
    if gamma < 0:
        raise ValueError(f"focal loss gamma must be non-negative, got {gamma}")
    g, p, eager = _lift(preds)
    t = np.asarray(targets, dtype=np.float64).reshape(p.shape)
    p = g.clamp(p, PRED_CLAMP, 1.0 - PRED_CLAMP)
    # p_t = t*p + (1-t)*(1-p)
    p_t = g.add(g.product(p, g.input(2.0 * t - 1.0)), g.input(1.0 - t))
    alpha_t = np.where(t == 1, alpha_pos, 1.0 - alpha_pos)
    modulator = g.power(g.scalar_add(g.scalar_scale(p_t, -1.0), 1.0), gamma)
    per = g.product(g.product(modulator, g.log(p_t, LOG_FLOOR, 1.0)), g.input(-alpha_t))
    return _result(g.reduce_mean(per), eager)


def focal_loss(pred, target: int, gamma: float = 2.0, alpha_pos: float = 0.25):
    if isinstance(pred, Node):
        return focal_loss_batch(pred, [target], gamma, alpha_pos)
    return focal_loss_batch(np.array([float(pred)]), [target], gamma, alpha_pos)


def similarity_loss(state: ModelState, pairs, features, gamma: float = 2.0,
                    alpha_pos: float = 0.25):
    """Mean focal loss of S over ``pairs`` indexing rows of ``features``."""
    g, f, eager = _lift(features)
    if len(pairs) == 0:
        return _result(g.input(np.zeros(1)), eager)
    i = np.fromiter((p.i for p in pairs), dtype=np.intp, count=len(pairs))
    j = np.fromiter((p.j for p in pairs), dtype=np.intp, count=len(pairs))
    n = f.shape[0]
    if min(i.min(), j.min()) < 0 or max(i.max(), j.max()) >= n:
        raise IndexError(f"similarity_loss: pair index outside batch of {n}")
    targets = np.fromiter((p.target for p in pairs), dtype=np.float64, count=len(pairs))
    s = similarity_node(g, state, g.gather_rows(f, i), g.gather_rows(f, j))
    return _result(focal_loss_batch(s, targets, gamma, alpha_pos), eager)


@dataclass(frozen=True)
class ScheduleSpec:
    w_max: float
    ramp_epochs: int

    def __post_init__(self):
        if self.w_max < 0:
            raise ValueError("w_max must be non-negative")
        if self.ramp_epochs < 1:
            raise ValueError("ramp_epochs must be positive")


def ramp_weight(spec: ScheduleSpec, epoch: int) -> float:
    """Sigmoid-shaped ramp ``w_max * exp(-5 (1 - t/T)^2)``, flat after ``T``."""
    frac = min(epoch, spec.ramp_epochs) / spec.ramp_epochs
    return spec.w_max * math.exp(-5.0 * (1.0 - frac) ** 2)


@dataclass(frozen=True)
class LossBreakdown:
    l_c: float
    l_t: float
    l_s: float
    l_sc: float
    total: float
    lambda1: float
    lambda2: float
    lambda3: float


def total_loss(l_c: float, l_t: float, l_s: float, l_sc: float,
               lambda1: float, lambda2: float, lambda3: float) -> LossBreakdown:
    total = l_c + lambda1 * l_t + lambda2 * l_s + lambda3 * l_sc
    return LossBreakdown(l_c, l_t, l_s, l_sc, total, lambda1, lambda2, lambda3)
