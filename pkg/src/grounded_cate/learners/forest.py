"""Random forest regression built from CART trees with variance-reduction splits.

Trees are grown by a compiled builder (numba, GIL released), so a thread
pool gives real parallelism. Each tree draws its bootstrap sample and its
feature-sampling stream from a seed derived from ``(seed, tree_index)``;
the fitted forest is therefore identical for any number of threads.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba
import numpy as np

from ..errors import DataError
from ..parallel import resolve_threads


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 200
    min_leaf: int = 5
    max_depth: int | None = None
    mtry: int | None = None  # None -> ceil(d / 3)
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be >= 1")

    def resolve_mtry(self, d: int) -> int:
        mtry = self.mtry if self.mtry is not None else max(1, math.ceil(d / 3))
        if not 1 <= mtry <= d:
            raise ValueError(f"mtry={mtry} outside [1, {d}]")
        return mtry

    def to_dict(self) -> dict:
        return {
            "n_trees": self.n_trees,
            "min_leaf": self.min_leaf,
            "max_depth": self.max_depth,
            "mtry": self.mtry,
            "bootstrap": self.bootstrap,
        }


@numba.njit(cache=True, nogil=True)
def _grow(X, y, rows, min_leaf, max_depth, mtry, seed):
    np.random.seed(seed)
    n = rows.shape[0]
    d = X.shape[1]
    cap = 2 * n + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    count = np.zeros(cap, np.int64)

    idx = rows.copy()
    buf = np.empty(n, np.int64)
    vals = np.empty(n)
    feats = np.arange(d)
    chosen = np.empty(mtry, np.int64)

    st_node = np.empty(cap, np.int64)
    st_start = np.empty(cap, np.int64)
    st_end = np.empty(cap, np.int64)
    st_depth = np.empty(cap, np.int64)
    sp = 0
    st_node[0] = 0
    st_start[0] = 0
    st_end[0] = n
    st_depth[0] = 0
    sp = 1
    n_nodes = 1

    while sp > 0:
        sp -= 1
        node = st_node[sp]
        start = st_start[sp]
        end = st_end[sp]
        depth = st_depth[sp]
        m = end - start

        total = 0.0
        ylo = np.inf
        yhi = -np.inf
        for i in range(start, end):
            v = y[idx[i]]
            total += v
            if v < ylo:
                ylo = v
            if v > yhi:
                yhi = v
        mean = total / m
        # the mean lies in [ylo, yhi]; clamp away summation rounding
        if mean < ylo:
            mean = ylo
        if mean > yhi:
            mean = yhi
        value[node] = mean
        count[node] = m

        if m < 2 * min_leaf or yhi == ylo:
            continue
        if max_depth >= 0 and depth >= max_depth:
            continue

        # sample up to mtry features that vary within the node
        for j in range(d):
            feats[j] = j
        n_chosen = 0
        k = 0
        while k < d and n_chosen < mtry:
            j = k + np.random.randint(0, d - k)
            tmp = feats[k]
            feats[k] = feats[j]
            feats[j] = tmp
            f = feats[k]
            k += 1
            lo = X[idx[start], f]
            hi = lo
            for i in range(start + 1, end):
                v = X[idx[i], f]
                if v < lo:
                    lo = v
                if v > hi:
                    hi = v
            if hi > lo:
                chosen[n_chosen] = f
                n_chosen += 1
        if n_chosen == 0:
            continue
        cand = np.sort(chosen[:n_chosen])

        parent = total * total / m
        best_gain = parent
        best_f = -1
        best_thr = 0.0
        for c in range(n_chosen):
            f = cand[c]
            for i in range(m):
                vals[i] = X[idx[start + i], f]
            order = np.argsort(vals[:m], kind="mergesort")
            sum_left = 0.0
            for i in range(m - 1):
                o = order[i]
                sum_left += y[idx[start + o]]
                n_left = i + 1
                n_right = m - n_left
                if n_right < min_leaf:
                    break
                if n_left < min_leaf:
                    continue
                v0 = vals[o]
                v1 = vals[order[i + 1]]
                if v1 <= v0:
                    continue
                sum_right = total - sum_left
                gain = sum_left * sum_left / n_left + sum_right * sum_right / n_right
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    thr = 0.5 * (v0 + v1)
                    if thr >= v1:
                        thr = v0
                    best_thr = thr
        if best_f < 0:
            continue

        # stable partition: left block keeps original order, then right block
        nl = 0
        nr = 0
        for i in range(start, end):
            r = idx[i]
            if X[r, best_f] <= best_thr:
                idx[start + nl] = r
                nl += 1
            else:
                buf[nr] = r
                nr += 1
        for i in range(nr):
            idx[start + nl + i] = buf[i]

        lchild = n_nodes
        rchild = n_nodes + 1
        n_nodes += 2
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = lchild
        right[node] = rchild

        st_node[sp] = rchild
        st_start[sp] = start + nl
        st_end[sp] = end
        st_depth[sp] = depth + 1
        sp += 1
        st_node[sp] = lchild
        st_start[sp] = start
        st_end[sp] = start + nl
        st_depth[sp] = depth + 1
        sp += 1

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        value[:n_nodes].copy(),
        count[:n_nodes].copy(),
    )


@numba.njit(cache=True, nogil=True)
def _accumulate(X, feature, threshold, left, right, value, out):
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] += value[node]


@dataclass(frozen=True, eq=False)
class RegressionTree:
    """Array-encoded binary tree; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray

    def __post_init__(self):
        for name in ("feature", "threshold", "left", "right", "value", "n_samples"):
            getattr(self, name).setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    def is_leaf(self) -> np.ndarray:
        return self.feature < 0

    def predict(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        out = np.zeros(X.shape[0])
        _accumulate(X, self.feature, self.threshold, self.left, self.right, self.value, out)
        return out


@dataclass(frozen=True, eq=False)
class ForestModel:
    trees: tuple[RegressionTree, ...]
    params: ForestParams
    n_features: int

    def predict(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise DataError(f"expected {self.n_features} features, got shape {X.shape}")
        out = np.zeros(X.shape[0])
        for t in self.trees:
            _accumulate(X, t.feature, t.threshold, t.left, t.right, t.value, out)
        return out / len(self.trees)


def tree_seed(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def forest_fit(X, y, params: ForestParams = ForestParams(), seed: int = 0, threads: int | None = None) -> ForestModel:
    """Grow ``params.n_trees`` CART trees and average them.

    Split search is exhaustive over midpoints between consecutive distinct
    values of each sampled feature. Equal gains resolve to the lowest
    feature index and then the lowest threshold.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise DataError(f"incompatible shapes X{X.shape}, y{y.shape}")
    n, d = X.shape
    if n < params.min_leaf:
        raise DataError(f"{n} rows is fewer than min_leaf={params.min_leaf}")
    if d < 1:
        raise DataError("forest needs at least one feature")
    mtry = params.resolve_mtry(d)
    max_depth = -1 if params.max_depth is None else params.max_depth

    def grow(index):
        rng = tree_seed(seed, index)
        rows = rng.integers(0, n, size=n) if params.bootstrap else np.arange(n)
        s = int(rng.integers(0, 2**31 - 1))
        arrays = _grow(X, y, rows.astype(np.int64), params.min_leaf, max_depth, mtry, s)
        return RegressionTree(*arrays)

    workers = resolve_threads(threads)
    if workers <= 1 or params.n_trees == 1:
        trees = [grow(i) for i in range(params.n_trees)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trees = list(pool.map(grow, range(params.n_trees)))
    return ForestModel(tuple(trees), params, d)
