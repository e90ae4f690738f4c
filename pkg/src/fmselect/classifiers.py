"""Downstream classifiers used to score a feature subset: kNN, logistic regression, random forest."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_io import DatasetTable
from .tensor_core import softmax_stable


def _require_labels(*tables: DatasetTable) -> None:
    for t in tables:
        if t.labels is None:
            raise ValueError(f"table {t.name!r} has no labels")
    if tables[0].n_features != tables[-1].n_features:
        raise ValueError("train and test feature counts differ")


def _vote(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Row-wise majority vote over the last axis; ties go to the smaller label."""
    counts = np.zeros((labels.shape[0], n_classes), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(labels.shape[0]), labels.shape[1]), labels.ravel()), 1)
    return np.argmax(counts, axis=1)


def accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    return float(np.mean(pred == truth))


# --- kNN ---------------------------------------------------------------------

def knn_predict(train_x, train_y, test_x, n_classes, k_neighbors=5, chunk=512):
    """Euclidean kNN; equal distances keep the lower training index first."""
    k = min(k_neighbors, train_x.shape[0])
    train_x = train_x.astype(np.float64)
    tr_sq = np.einsum("ij,ij->i", train_x, train_x)
    out = np.empty(test_x.shape[0], dtype=np.int64)
    for s in range(0, test_x.shape[0], chunk):
        q = test_x[s:s + chunk].astype(np.float64)
        d2 = tr_sq[None, :] - 2.0 * (q @ train_x.T) + np.einsum("ij,ij->i", q, q)[:, None]
        nn = np.argsort(d2, axis=1, kind="stable")[:, :k]
        out[s:s + chunk] = _vote(train_y[nn], n_classes)
    return out


def classify_knn(train: DatasetTable, test: DatasetTable, k_neighbors: int = 5) -> float:
    _require_labels(train, test)
    n_classes = max(train.n_classes, test.n_classes)
    pred = knn_predict(train.features, train.labels, test.features, n_classes, k_neighbors)
    return accuracy(pred, test.labels)


# --- logistic regression -----------------------------------------------------

def logreg_loss_grad(W, b, x, y, n_classes):
    """Mean softmax cross-entropy and its gradient for weights ``W`` (D x C) and bias ``b``."""
    p = softmax_stable(x @ W + b, axis=1)
    n = x.shape[0]
    loss = -np.mean(np.log(np.maximum(p[np.arange(n), y], 1e-12)))
    g = p.copy()
    g[np.arange(n), y] -= 1.0
    g /= n
    return loss, x.T @ g, g.sum(axis=0)


def fit_logreg(x, y, n_classes, epochs=200, lr=0.1):
    W = np.zeros((x.shape[1], n_classes))
    b = np.zeros(n_classes)
    for _ in range(epochs):
        _, gW, gb = logreg_loss_grad(W, b, x, y, n_classes)
        W -= lr * gW
        b -= lr * gb
    return W, b


def classify_logreg(train: DatasetTable, test: DatasetTable, epochs: int = 200,
                    lr: float = 0.1) -> float:
    _require_labels(train, test)
    n_classes = max(train.n_classes, test.n_classes)
    W, b = fit_logreg(train.features.astype(np.float64), train.labels, n_classes, epochs, lr)
    pred = np.argmax(test.features @ W + b, axis=1)
    return accuracy(pred, test.labels)


# --- random forest -----------------------------------------------------------

@dataclass
class Tree:
    feature: np.ndarray  # -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    label: np.ndarray

    def predict(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(x.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.nonzero(active)[0]
            n = node[idx]
            go_left = x[idx, self.feature[n]] <= self.threshold[n]
            node[idx] = np.where(go_left, self.left[n], self.right[n])
            active = self.feature[node] >= 0
        return self.label[node]


def _best_split(x, y, n_classes, feats):
    """Best Gini split of rows (x, y) over candidate columns ``feats``.

    Returns ``(feature, threshold, weighted_gini)`` or ``None`` when every
    candidate column is constant. Thresholds are midpoints between adjacent
    distinct values; ties in impurity keep the first candidate/position.
    """
    n = y.shape[0]
    cols = x[:, feats]
    order = np.argsort(cols, axis=0, kind="stable")
    sorted_vals = np.take_along_axis(cols, order, axis=0)
    onehot = np.eye(n_classes, dtype=np.int64)[y]
    left_counts = np.cumsum(onehot[order], axis=0)[:-1]  # (n-1) x F x C
    total = left_counts[-1] + onehot[order[-1]]
    right_counts = total[None] - left_counts
    n_left = np.arange(1, n)[:, None]
    n_right = n - n_left
    gini_l = 1.0 - np.sum(left_counts.astype(np.float64) ** 2, axis=2) / n_left ** 2
    gini_r = 1.0 - np.sum(right_counts.astype(np.float64) ** 2, axis=2) / n_right ** 2
    score = (n_left * gini_l + n_right * gini_r) / n
    valid = sorted_vals[1:] > sorted_vals[:-1]
    if not valid.any():
        return None
    score = np.where(valid, score, np.inf)
    # column-major flat argmin: earliest candidate feature wins ties
    flat = np.argmin(score.T)
    f_pos, row = divmod(int(flat), n - 1)
    thr = 0.5 * (sorted_vals[row, f_pos] + sorted_vals[row + 1, f_pos])
    if not thr < sorted_vals[row + 1, f_pos]:
        thr = sorted_vals[row, f_pos]
    return int(feats[f_pos]), float(thr), float(score[row, f_pos])


def build_tree(x: np.ndarray, y: np.ndarray, n_classes: int, max_features: int,
               rng: np.random.Generator, min_samples_split: int = 2) -> Tree:
    """Grow a CART tree until nodes are pure or hold fewer than ``min_samples_split`` rows.

    At each node ``max_features`` columns are drawn without replacement; if
    all of them are constant on the node the remaining columns are tried in
    random order before giving up.
    """
    d = x.shape[1]
    feature, threshold, left, right, label = [], [], [], [], []

    def new_node(rows):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        label.append(int(np.argmax(np.bincount(y[rows], minlength=n_classes))))
        return len(feature) - 1

    root_rows = np.arange(x.shape[0])
    stack = [(new_node(root_rows), root_rows)]
    while stack:
        node, rows = stack.pop()
        yr = y[rows]
        if rows.size < min_samples_split or np.all(yr == yr[0]):
            continue
        perm = rng.permutation(d)
        split = None
        for start in range(0, d, max_features):
            split = _best_split(x[rows], yr, n_classes, perm[start:start + max_features])
            if split is not None:
                break
        if split is None:
            continue
        f, thr, _ = split
        mask = x[rows, f] <= thr
        lrows, rrows = rows[mask], rows[~mask]
        feature[node] = f
        threshold[node] = thr
        left[node] = new_node(lrows)
        right[node] = new_node(rrows)
        stack.append((right[node], rrows))
        stack.append((left[node], lrows))
    return Tree(np.array(feature), np.array(threshold), np.array(left), np.array(right),
                np.array(label))


def fit_forest(x, y, n_classes, n_trees, rng, bootstrap=True, max_features=None):
    n, d = x.shape
    mtry = max_features or max(1, int(np.floor(np.sqrt(d))))
    trees = []
    for _ in range(n_trees):
        rows = rng.integers(0, n, size=n) if bootstrap else np.arange(n)
        trees.append(build_tree(x[rows], y[rows], n_classes, mtry, rng))
    return trees


def forest_predict(trees, x, n_classes):
    votes = np.stack([t.predict(x) for t in trees], axis=1)
    return _vote(votes, n_classes)


def classify_forest(train: DatasetTable, test: DatasetTable, n_trees: int = 100,
                    rng: np.random.Generator | None = None) -> float:
    _require_labels(train, test)
    if rng is None:
        rng = np.random.default_rng(0)
    n_classes = max(train.n_classes, test.n_classes)
    trees = fit_forest(train.features, train.labels, n_classes, n_trees, rng)
    return accuracy(forest_predict(trees, test.features, n_classes), test.labels)
