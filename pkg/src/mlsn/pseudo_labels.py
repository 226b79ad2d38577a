"""Label conversions between the classification and similarity branches.

Batch-local indexing convention: rows ``0..n_labeled-1`` are the labeled
batch, rows ``n_labeled..n_labeled+n_unlabeled-1`` the unlabeled batch.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Literal

import numpy as np

from .data import unrank_pairs
from .networks import ModelState, similarity

TRUE_LABEL = "true-label"
PSEUDO_LABEL = "pseudo-label"


@dataclass(frozen=True)
class PairSample:
    i: int
    j: int
    target: int
    source: Literal["true-label", "pseudo-label"] = TRUE_LABEL

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("a pair needs two distinct endpoints")
        if self.target not in (0, 1):
            raise ValueError("pair target must be 0 or 1")


class PairList(list):
    """List of :class:`PairSample`; ``truncated`` is set when fewer than ``m`` were eligible."""

    truncated: bool = False


@dataclass
class CenterMap:
    entries: dict[int, int]
    num_classes: int

    @property
    def covered_classes(self) -> set[int]:
        return set(self.entries)

    @property
    def complete(self) -> bool:
        return len(self.entries) == self.num_classes

    def indices(self) -> np.ndarray:
        """Center batch indices ordered by class."""
        return np.array([self.entries[k] for k in sorted(self.entries)], dtype=np.intp)


@dataclass
class SoftLabel:
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-9:
            raise ValueError("soft label must be a probability vector")


def true_similarity_target(y_i: int, y_j: int) -> int:
    return int(y_i == y_j)


def pseudo_similarity_target(yhat_i: int, yhat_j: int) -> int:
    return int(yhat_i == yhat_j)


def predicted_classes(probs) -> np.ndarray:
    """Row argmax; ties go to the lowest class index."""
    return np.argmax(np.asarray(probs), axis=1)


def sample_pairs(n_labeled: int, n_unlabeled: int, m: int, confidence, tau: float,
                 rng: np.random.Generator, labels=None, predictions=None) -> PairList:
    """Draw ``m`` distinct unordered pairs uniformly from the eligible ones.

    An unlabeled endpoint is eligible when its ``confidence`` reaches ``tau``.
    ``labels`` are the labeled batch's classes and ``predictions`` the
    classifier's argmax for the unlabeled batch; they set the targets.
    """
    if tau < 0:
        raise ValueError(f"tau must be non-negative, got {tau}")
    if m < 0:
        raise ValueError("m must be non-negative")
    confidence = np.asarray(confidence if confidence is not None else np.zeros(0), dtype=np.float64)
    if confidence.shape != (n_unlabeled,):
        raise ValueError(f"need one confidence per unlabeled row ({n_unlabeled})")
    labels = np.zeros(n_labeled, dtype=np.int64) if labels is None else np.asarray(labels)
    predictions = np.zeros(n_unlabeled, dtype=np.int64) if predictions is None else np.asarray(predictions)
    eligible = np.concatenate([np.arange(n_labeled),
                               n_labeled + np.flatnonzero(confidence >= tau)])
    classes = np.concatenate([labels, predictions])
    v = eligible.size
    total = v * (v - 1) // 2
    out = PairList()
    if m == 0:
        return out
    take = min(m, total)
    out.truncated = take < m
    ranks = rng.choice(total, size=take, replace=False) if take else np.zeros(0, dtype=np.int64)
    a, b = unrank_pairs(ranks, v)
    for i, j in zip(eligible[a].tolist(), eligible[b].tolist()):
        both_labeled = i < n_labeled and j < n_labeled
        out.append(PairSample(
            i, j, int(classes[i] == classes[j]),
            TRUE_LABEL if both_labeled else PSEUDO_LABEL,
        ))
    return out


def select_class_centers(batch_labels: Iterable[tuple[int, int]], rng: np.random.Generator,
                         num_classes: int) -> CenterMap:
    """Pick one labeled batch index per class present, uniformly at random."""
    groups: dict[int, list[int]] = {}
    for index, cls in batch_labels:
        groups.setdefault(int(cls), []).append(int(index))
    entries = {}
    for cls in sorted(groups):
        members = groups[cls]
        entries[cls] = members[int(rng.integers(len(members)))]
    return CenterMap(entries, num_classes)


def normalize_similarities(raw) -> np.ndarray:
    """Rows of raw similarities divided by their sum (uniform if the sum vanishes)."""
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    sums = raw.sum(axis=1, keepdims=True)
    k = raw.shape[1]
    safe = np.where(sums < 1e-9, 1.0, sums)
    return np.where(sums < 1e-9, 1.0 / k, raw / safe)


def soft_labels(state: ModelState, feats, centers: CenterMap, center_feats) -> np.ndarray | None:
    """Soft targets for each row of ``feats`` against the K class centers.

    ``center_feats`` is ``(K, p)`` ordered by class.  Returns ``None`` when the
    centers do not cover every class.
    """
    if not centers.complete:
        return None
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    cf = np.asarray(center_feats, dtype=np.float64)
    n, k = feats.shape[0], cf.shape[0]
    if n == 0:
        return np.zeros((0, k))
    left = np.repeat(feats, k, axis=0)
    right = np.tile(cf, (n, 1))
    raw = np.asarray(similarity(state, left, right)).reshape(n, k)
    return normalize_similarities(raw)


def soft_label(state: ModelState, x_feat, centers: CenterMap, center_feats) -> SoftLabel | None:
    out = soft_labels(state, np.asarray(x_feat).reshape(1, -1), centers, center_feats)
    return None if out is None else SoftLabel(out[0])
