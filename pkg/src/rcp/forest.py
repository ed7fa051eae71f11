"""Bagged regression forests for conditional means and quantiles.

Trees are grown by scikit-learn's CART (squared-error splits over ``mtry``
randomly drawn features); bagging, per-tree seeding, and the leaf-weight
quantile estimator live here.

Quantile predictions follow Meinshausen's quantile regression forest: each
training target gets weight ``mean_over_trees(count_i / leaf_count)`` where
``count_i`` is its in-bag multiplicity in the query's leaf, and the prediction
is the smallest target whose cumulative weight reaches ``beta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy import sparse
from sklearn.tree import DecisionTreeRegressor

_CHUNK = 2048


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 200
    min_leaf: Union[int, str] = 5  # or "auto"
    mtry: Optional[int] = None  # None -> ceil(d / 3)
    max_depth: Optional[int] = None
    bootstrap_rows: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be positive")
        if self.min_leaf != "auto" and not (isinstance(self.min_leaf, int) and self.min_leaf >= 1):
            raise ValueError(f"min_leaf must be a positive integer or 'auto', got {self.min_leaf!r}")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be positive")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be positive")

    def resolved_min_leaf(self, n: int) -> int:
        """``auto`` grows leaves like n^(2/3) (never below 5), a smoother fit for low d."""
        if self.min_leaf == "auto":
            return max(5, math.ceil(n ** (2.0 / 3.0)))
        return self.min_leaf

    def resolved_mtry(self, d: int) -> int:
        m = math.ceil(d / 3) if self.mtry is None else self.mtry
        if m > d:
            raise ValueError(f"mtry={m} exceeds the number of features d={d}")
        return m


class Forest:
    """Fitted tree ensemble plus the in-bag bookkeeping needed for leaf weights."""

    def __init__(self, trees, inbag_rows, inbag_counts, x, targets):
        self.trees = trees
        self.targets = targets
        self.d = x.shape[1]
        self.y_min = float(targets.min())
        self.y_max = float(targets.max())
        self._order = np.argsort(targets, kind="stable")
        self._sorted_targets = targets[self._order]

        # A[i, offset_k + leaf] = count_i / leaf_total / n_trees
        n = targets.shape[0]
        offsets, rows, cols, vals = [], [], [], []
        offset = 0
        for tree, r, c in zip(trees, inbag_rows, inbag_counts):
            leaves = tree.apply(x[r])
            totals = np.bincount(leaves, weights=c, minlength=tree.tree_.node_count)
            rows.append(r)
            cols.append(leaves + offset)
            vals.append(c / totals[leaves] / len(trees))
            offsets.append(offset)
            offset += tree.tree_.node_count
        self._offsets = np.array(offsets)
        self._leaf_weights = sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, offset),
        )
        self._n_cols = offset

    def check_x(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.ndim != 2 or x.shape[1] != self.d:
            raise ValueError(f"dimension mismatch: model fitted on d={self.d}, got shape {np.shape(x)}")
        return x, single

    def mean(self, x: np.ndarray) -> np.ndarray:
        acc = np.zeros(x.shape[0])
        for tree in self.trees:
            acc += tree.predict(x)
        return np.clip(acc / len(self.trees), self.y_min, self.y_max)

    def weights(self, x: np.ndarray) -> np.ndarray:
        """Dense (n_query, n_train) forest weights; each row sums to one."""
        q = x.shape[0]
        cols = np.empty((q, len(self.trees)), dtype=np.int64)
        for k, tree in enumerate(self.trees):
            cols[:, k] = tree.apply(x) + self._offsets[k]
        indicator = sparse.csr_matrix(
            (np.ones(cols.size), cols.ravel(), np.arange(0, cols.size + 1, len(self.trees))),
            shape=(q, self._n_cols),
        )
        return (indicator @ self._leaf_weights.T).toarray()

    def quantiles(self, x: np.ndarray, betas) -> np.ndarray:
        betas = np.atleast_1d(np.asarray(betas, dtype=float))
        out = np.empty((x.shape[0], betas.size))
        for start in range(0, x.shape[0], _CHUNK):
            w = self.weights(x[start:start + _CHUNK])[:, self._order]
            cum = np.cumsum(w, axis=1)
            total = cum[:, -1:]
            for j, b in enumerate(betas):
                idx = np.argmax(cum >= b * total - 1e-12, axis=1)
                out[start:start + _CHUNK, j] = self._sorted_targets[idx]
        return out


def fit_forest(rows, targets, params: ForestParams) -> Forest:
    x = np.asarray(rows, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(targets, dtype=float).ravel()
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"dimension mismatch: rows {x.shape}, targets {y.shape}")
    n, d = x.shape
    if n < 2:
        raise ValueError(f"need at least 2 rows to fit, got {n}")
    min_leaf = params.resolved_min_leaf(n)
    if n < min_leaf:
        raise ValueError(f"fewer rows ({n}) than min_leaf ({min_leaf})")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("rows and targets must be finite")
    mtry = params.resolved_mtry(d)

    trees, inbag_rows, inbag_counts = [], [], []
    for k in range(params.n_trees):
        # per-tree stream depends only on (seed, tree index)
        rng = np.random.default_rng(np.random.SeedSequence([params.seed & (2**64 - 1), k]))
        if params.bootstrap_rows:
            counts = np.bincount(rng.integers(0, n, n), minlength=n)
        else:
            counts = np.ones(n, dtype=np.int64)
        r = np.flatnonzero(counts)
        c = counts[r].astype(float)
        tree = DecisionTreeRegressor(
            min_samples_leaf=min_leaf,
            max_features=mtry,
            max_depth=params.max_depth,
            random_state=int(rng.integers(2**31 - 1)),
        )
        tree.fit(x[r], y[r], sample_weight=c)
        trees.append(tree)
        inbag_rows.append(r)
        inbag_counts.append(c)

    return Forest(trees, inbag_rows, inbag_counts, x, y)


@dataclass(frozen=True, eq=False)
class MeanModel:
    forest: Forest

    @property
    def d(self) -> int:
        return self.forest.d


@dataclass(frozen=True, eq=False)
class QuantileModel:
    forest: Forest

    @property
    def d(self) -> int:
        return self.forest.d


def fit_mean(rows, targets, params: ForestParams = ForestParams()) -> MeanModel:
    return MeanModel(fit_forest(rows, targets, params))


def fit_quantile(rows, targets, params: ForestParams = ForestParams()) -> QuantileModel:
    return QuantileModel(fit_forest(rows, targets, params))


def predict_mean(m: MeanModel, x):
    """Average over trees of the in-bag leaf means. Scalar for a vector ``x``, array for a matrix."""
    x, single = m.forest.check_x(x)
    out = m.forest.mean(x)
    return float(out[0]) if single else out


def _check_beta(beta):
    b = np.asarray(beta, dtype=float)
    if np.any(~(b > 0.0)) or np.any(~(b < 1.0)):
        raise ValueError(f"beta must lie in (0, 1), got {beta!r}")


def predict_quantile(m: QuantileModel, x, beta: float):
    _check_beta(beta)
    x, single = m.forest.check_x(x)
    out = m.forest.quantiles(x, [beta])[:, 0]
    return float(out[0]) if single else out


def predict_quantiles(m: QuantileModel, x, betas) -> np.ndarray:
    """Several levels at once, sharing one weight computation; shape (n_query, len(betas))."""
    _check_beta(betas)
    x, _ = m.forest.check_x(x)
    return m.forest.quantiles(x, betas)
