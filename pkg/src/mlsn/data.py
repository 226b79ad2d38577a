"""Datasets, semi-supervised splits and weak pair sets.

Dataset CSV: header ``f1,...,fd,label``; label ``-1`` marks an unlabeled row.
Weak-pair CSV: header ``i,j,same`` with 0-based data-row indices.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

UNLABELED = -1


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("dataset needs a 2-D feature matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("one label per row required")
        bad = (self.labels != UNLABELED) & ((self.labels < 0) | (self.labels >= self.num_classes))
        if bad.any():
            raise ValueError(f"labels must lie in [0, {self.num_classes}) or be -1")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.labels != UNLABELED

    def subset(self, rows, erase_labels: bool = False) -> "Dataset":
        rows = np.asarray(rows, dtype=np.intp)
        labels = np.full(rows.size, UNLABELED) if erase_labels else self.labels[rows]
        return Dataset(self.features[rows].reshape(rows.size, self.dim), labels,
                       self.num_classes, self.name)


@dataclass
class SSLSplit:
    labeled: Dataset
    unlabeled: Dataset
    test: Dataset
    labeled_rows: np.ndarray
    unlabeled_rows: np.ndarray
    test_rows: np.ndarray
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None

    @property
    def num_classes(self) -> int:
        return self.labeled.num_classes

    @property
    def train_rows(self) -> np.ndarray:
        """Source-row indices of labeled rows followed by unlabeled rows."""
        return np.concatenate([self.labeled_rows, self.unlabeled_rows])


@dataclass
class WeakPairSet:
    pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 3)
        if np.any(self.pairs[:, 0] == self.pairs[:, 1]):
            raise ValueError("weak pairs may not pair a row with itself")

    def __len__(self) -> int:
        return self.pairs.shape[0]


def unrank_pairs(k, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Map linear indices into the lexicographic list of pairs ``i < j < n``."""
    k = np.asarray(k, dtype=np.int64)
    total = n * (n - 1) // 2
    # row i starts at offset i*n - i*(i+1)/2; solve for i then fix rounding
    i = np.floor((2 * n - 1 - np.sqrt((2.0 * n - 1) ** 2 - 8.0 * k)) / 2).astype(np.int64)
    i = np.clip(i, 0, max(n - 2, 0))
    start = i * n - i * (i + 1) // 2
    over = k < start
    i = np.where(over, i - 1, i)
    start = i * n - i * (i + 1) // 2
    under = k >= start + (n - 1 - i)
    i = np.where(under, i + 1, i)
    start = i * n - i * (i + 1) // 2
    j = k - start + i + 1
    if k.size and (k.min() < 0 or k.max() >= total):
        raise ValueError("pair rank out of range")
    return i, j


def gen_two_moons(n: int, noise_sigma: float, rng: np.random.Generator) -> Dataset:
    if n < 2 or n % 2:
        raise ValueError(f"two-moons needs an even n >= 2, got {n}")
    half = n // 2  # class 0 rows first, then class 1
    t0 = rng.uniform(0.0, math.pi, half)
    t1 = rng.uniform(0.0, math.pi, half)
    x0 = np.column_stack([np.cos(t0), np.sin(t0)])
    x1 = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    x = np.vstack([x0, x1])
    if noise_sigma > 0:
        x = x + rng.normal(0.0, noise_sigma, size=x.shape)
    labels = np.repeat([0, 1], half)
    return Dataset(x, labels, 2, "two-moons")


def load_digits_dataset() -> Dataset:
    """The 8x8 handwritten digits (1797 rows, d=64, K=10) bundled with scikit-learn."""
    from sklearn.datasets import load_digits

    d = load_digits()
    return Dataset(d.data.astype(np.float64), d.target.astype(np.int64), 10, "digits")


def save_csv_dataset(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{k + 1}" for k in range(dataset.dim)] + ["label"])
        for row, y in zip(dataset.features, dataset.labels):
            w.writerow([repr(float(v)) for v in row] + [int(y)])


def load_csv_dataset(path, num_classes: int | None = None, name: str | None = None) -> Dataset:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if not header or header[-1] != "label":
            raise ValueError(f"{path}:1: header must end with 'label'")
        width = len(header)
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ValueError(f"{path}:{lineno}: expected {width} columns, found {len(row)}")
            try:
                feats.append([float(v) for v in row[:-1]])
                labels.append(int(row[-1]))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed row ({exc})") from None
    if not feats:
        raise ValueError(f"{path}: no data rows")
    labels_arr = np.array(labels, dtype=np.int64)
    if labels_arr.min() < UNLABELED:
        raise ValueError(f"{path}: labels must be >= -1")
    k = num_classes if num_classes is not None else max(int(labels_arr.max()) + 1, 2)
    return Dataset(np.array(feats), labels_arr, k, name or path.stem)


def split_ssl(dataset: Dataset, n_labeled: int, test_fraction: float, stratified: bool,
              rng: np.random.Generator) -> SSLSplit:
    """Hold out a test set, then choose labeled rows and erase labels on the rest.

    Rows already marked unlabeled (-1) never enter the test or labeled sets;
    they join the unlabeled set directly.
    """
    if not 0 <= test_fraction < 1:
        raise ValueError("test_fraction must lie in [0, 1)")
    known = np.flatnonzero(dataset.labeled_mask)
    perm = known[rng.permutation(known.size)]
    n_test = int(round(test_fraction * known.size))
    test_rows, rest = perm[:n_test], perm[n_test:]
    if n_labeled < 1 or n_labeled > rest.size:
        raise ValueError(f"n_labeled={n_labeled} infeasible with {rest.size} non-test rows")
    k = dataset.num_classes
    if stratified:
        if n_labeled % k:
            raise ValueError(f"stratified split needs n_labeled divisible by K={k}")
        per = n_labeled // k
        chosen = []
        for c in range(k):
            members = rest[dataset.labels[rest] == c]
            if members.size < per:
                raise ValueError(f"class {c} has {members.size} rows, {per} requested")
            chosen.append(members[:per])
        labeled_rows = np.sort(np.concatenate(chosen))
    else:
        labeled_rows = np.sort(rest[:n_labeled])
    unlabeled_rows = np.sort(np.concatenate([np.setdiff1d(rest, labeled_rows),
                                             np.flatnonzero(~dataset.labeled_mask)]))
    test_rows = np.sort(test_rows)
    return SSLSplit(
        dataset.subset(labeled_rows),
        dataset.subset(unlabeled_rows, erase_labels=True),
        dataset.subset(test_rows),
        labeled_rows, unlabeled_rows, test_rows,
    )


def standardize(split: SSLSplit) -> SSLSplit:
    """Per-column standardization with statistics from the training rows only."""
    train = np.vstack([split.labeled.features, split.unlabeled.features])
    mean = train.mean(axis=0)
    scale = train.std(axis=0)
    scale[scale < 1e-12] = 1.0

    def tf(ds: Dataset) -> Dataset:
        return replace(ds, features=(ds.features - mean) / scale)

    return replace(split, labeled=tf(split.labeled), unlabeled=tf(split.unlabeled),
                   test=tf(split.test), mean=mean, scale=scale)


def gen_weak_pairs(dataset: Dataset, n_pairs: int, rng: np.random.Generator,
                   rows=None) -> WeakPairSet:
    """Sample distinct unordered pairs and record only whether they share a class.

    ``rows`` restricts sampling to a subset of source rows (e.g. training rows);
    indices in the result always refer to the source dataset.
    """
    rows = np.arange(len(dataset)) if rows is None else np.asarray(rows, dtype=np.int64)
    labels = dataset.labels[rows]
    if np.any(labels == UNLABELED):
        raise ValueError("weak pairs need fully labeled rows")
    n = rows.size
    total = n * (n - 1) // 2
    if n_pairs < 0 or n_pairs > total:
        raise ValueError(f"cannot draw {n_pairs} distinct pairs from {n} rows")
    if n_pairs == 0:
        return WeakPairSet()
    ranks = rng.choice(total, size=n_pairs, replace=False)
    a, b = unrank_pairs(ranks, n)
    same = (labels[a] == labels[b]).astype(np.int64)
    return WeakPairSet(np.column_stack([rows[a], rows[b], same]))


def save_weak_pairs(pairs: WeakPairSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "same"])
        w.writerows(pairs.pairs.tolist())


def load_weak_pairs(path) -> WeakPairSet:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["i", "j", "same"]:
            raise ValueError(f"{path}:1: header must be 'i,j,same'")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                i, j, s = (int(v) for v in row)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed pair row {row!r}") from None
            if s not in (0, 1) or i < 0 or j < 0 or i == j:
                raise ValueError(f"{path}:{lineno}: invalid pair {row!r}")
            rows.append((i, j, s))
    return WeakPairSet(np.array(rows, dtype=np.int64).reshape(-1, 3))
