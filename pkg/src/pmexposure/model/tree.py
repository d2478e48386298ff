"""CART regression trees grown by squared-error reduction.

Trees are stored as flat node arrays (``feature < 0`` marks a leaf) and grown
either breadth-first to a depth limit or best-first up to a leaf budget.
Samples go left when ``x[feature] <= threshold``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

LEAF = -1


@numba.njit(cache=True, nogil=True)
def _leaf_value(y, idx, start, end):
    # shifted mean: exact for constant targets, and clamped into the node's range
    y0 = y[idx[start]]
    lo, hi, acc = y0, y0, 0.0
    for k in range(start, end):
        v = y[idx[k]]
        acc += v - y0
        if v < lo:
            lo = v
        if v > hi:
            hi = v
    out = y0 + acc / (end - start)
    return min(max(out, lo), hi)


@numba.njit(cache=True, nogil=True)
def _best_split(X, y, idx, start, end, feats, min_leaf, centre):
    m = end - start
    best_gain, best_feat, best_thr, best_nl = 0.0, -1, 0.0, 0
    if m < 2 * min_leaf or m < 2:
        return best_gain, best_feat, best_thr, best_nl
    yc = np.empty(m)
    sse = 0.0
    total = 0.0
    for k in range(m):
        yc[k] = y[idx[start + k]] - centre
        sse += yc[k] * yc[k]
        total += yc[k]
    if sse <= 0.0:
        return best_gain, best_feat, best_thr, best_nl
    min_gain = 1e-12 * sse
    base = total * total / m
    vals = np.empty(m)
    for f in feats:
        for k in range(m):
            vals[k] = X[idx[start + k], f]
        order = np.argsort(vals, kind="mergesort")
        sl = 0.0
        for i in range(m - 1):
            sl += yc[order[i]]
            nl = i + 1
            if nl < min_leaf:
                continue
            if m - nl < min_leaf:
                break
            a = vals[order[i]]
            b = vals[order[i + 1]]
            if not a < b:
                continue
            sr = total - sl
            g = sl * sl / nl + sr * sr / (m - nl) - base
            if g > best_gain and g > min_gain:
                thr = 0.5 * (a + b)
                if not thr < b:
                    thr = a
                best_gain, best_feat, best_thr, best_nl = g, f, thr, nl
    return best_gain, best_feat, best_thr, best_nl


@numba.njit(cache=True, nogil=True)
def _grow(X, y, max_depth, min_leaf, max_leaves, n_sub, rand, best_first):
    n, d = X.shape
    cap = 2 * n + 1
    feature = np.full(cap, LEAF, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    gain = np.zeros(cap)
    count = np.zeros(cap, np.int64)
    depth = np.zeros(cap, np.int64)
    start = np.zeros(cap, np.int64)
    end = np.zeros(cap, np.int64)
    c_gain = np.zeros(cap)
    c_feat = np.full(cap, -1, np.int64)
    c_thr = np.zeros(cap)

    idx = np.arange(n)
    buf = np.empty(n, np.int64)
    perm = np.arange(d)
    pos = 0

    queue = np.empty(cap, np.int64)
    q_head, q_tail = 0, 0
    n_nodes = 1
    end[0] = n
    count[0] = n
    value[0] = _leaf_value(y, idx, 0, n)
    node = 0
    n_leaves = 1

    while True:
        # score the newly created nodes in creation order
        while q_tail < n_nodes:
            nd = q_tail
            queue[q_tail] = nd
            q_tail += 1
            if max_depth >= 0 and depth[nd] >= max_depth:
                continue
            if n_sub < d:
                for i in range(n_sub):
                    j = i + int(rand[pos] * (d - i))
                    pos += 1
                    if j >= d:
                        j = d - 1
                    perm[i], perm[j] = perm[j], perm[i]
                feats = np.sort(perm[:n_sub].copy())
            else:
                feats = perm
            g, f, t, nl = _best_split(X, y, idx, start[nd], end[nd], feats, min_leaf, value[nd])
            c_gain[nd], c_feat[nd], c_thr[nd] = g, f, t

        if max_leaves > 0 and n_leaves >= max_leaves:
            break
        if best_first:
            node = -1
            best = 0.0
            for k in range(n_nodes):
                if feature[k] == LEAF and c_feat[k] >= 0 and c_gain[k] > best:
                    best = c_gain[k]
                    node = k
            if node < 0:
                break
        else:
            node = -1
            while q_head < q_tail:
                k = queue[q_head]
                q_head += 1
                if c_feat[k] >= 0:
                    node = k
                    break
            if node < 0:
                break

        f = c_feat[node]
        t = c_thr[node]
        s, e = start[node], end[node]
        nl = 0
        nr = 0
        for k in range(s, e):
            if X[idx[k], f] <= t:
                idx[s + nl] = idx[k]
                nl += 1
            else:
                buf[nr] = idx[k]
                nr += 1
        for k in range(nr):
            idx[s + nl + k] = buf[k]

        feature[node] = f
        threshold[node] = t
        gain[node] = c_gain[node]
        lc, rc = n_nodes, n_nodes + 1
        left[node], right[node] = lc, rc
        start[lc], end[lc] = s, s + nl
        start[rc], end[rc] = s + nl, e
        for c in (lc, rc):
            depth[c] = depth[node] + 1
            count[c] = end[c] - start[c]
            value[c] = _leaf_value(y, idx, start[c], end[c])
        n_nodes += 2
        n_leaves += 1

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy(), gain[:n_nodes].copy(),
            count[:n_nodes].copy())


@numba.njit(cache=True, nogil=True)
def _predict(X, feature, threshold, left, right, value):
    out = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        node = 0
        while feature[node] != LEAF:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


@dataclass(eq=False)
class RegressionTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray
    n_samples: np.ndarray
    n_features: int

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return int((self.feature == LEAF).sum())

    @property
    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for k in range(self.n_nodes):
            if self.feature[k] != LEAF:
                depth[self.left[k]] = depth[self.right[k]] = depth[k] + 1
        return int(depth.max())

    def predict(self, X) -> np.ndarray:
        X = check_X(X, self.n_features)
        return _predict(X, self.feature, self.threshold, self.left, self.right, self.value)

    def importances(self) -> np.ndarray:
        """Unnormalised SSE reduction credited to each feature."""
        out = np.zeros(self.n_features)
        split = self.feature != LEAF
        np.add.at(out, self.feature[split], self.gain[split])
        return out

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "gain": self.gain.tolist(),
            "n_samples": self.n_samples.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict, n_features: int) -> "RegressionTree":
        tree = cls(np.asarray(d["feature"], dtype=np.int64), np.asarray(d["threshold"], dtype=np.float64),
                   np.asarray(d["left"], dtype=np.int64), np.asarray(d["right"], dtype=np.int64),
                   np.asarray(d["value"], dtype=np.float64), np.asarray(d["gain"], dtype=np.float64),
                   np.asarray(d["n_samples"], dtype=np.int64), n_features)
        tree.validate()
        return tree

    def validate(self) -> None:
        n = self.n_nodes
        arrays = (self.threshold, self.left, self.right, self.value, self.gain, self.n_samples)
        if n == 0 or any(len(a) != n for a in arrays):
            raise ValueError("inconsistent tree node arrays")
        split = self.feature != LEAF
        kids = np.concatenate([self.left[split], self.right[split]])
        if (self.feature[split] >= self.n_features).any() or (self.feature[split] < 0).any():
            raise ValueError("tree split on an unknown feature")
        if ((kids <= 0) | (kids >= n)).any() or len(np.unique(kids)) != len(kids):
            raise ValueError("tree child indices are invalid")
        if not np.isfinite(self.value).all():
            raise ValueError("tree has non-finite leaf values")


def check_X(X, n_features: int | None = None) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"X must be 2-D, got shape {X.shape}")
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"X has {X.shape[1]} features, model expects {n_features}")
    return X


def check_Xy(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = check_X(X)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if y.ndim != 1 or y.shape[0] != X.shape[0]:
        raise ValueError(f"y must be 1-D with {X.shape[0]} entries, got shape {y.shape}")
    if X.shape[0] == 0:
        raise ValueError("cannot fit on empty input")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValueError("X and y must be finite")
    return X, y


def fit_tree(X, y, max_depth: int | None = None, min_samples_leaf: int = 1,
             max_leaves: int | None = None, max_features: int | None = None,
             rng: np.random.Generator | None = None) -> RegressionTree:
    """Grow one regression tree.

    ``max_depth=None`` means unlimited depth.  Passing ``max_leaves`` switches
    to best-first growth: the leaf with the largest gain is split next until
    the budget is reached.  ``max_features`` draws that many candidate
    features afresh at every split using ``rng``.
    """
    X, y = check_Xy(X, y)
    n, d = X.shape
    if min_samples_leaf < 1:
        raise ValueError("min_samples_leaf must be >= 1")
    n_sub = d if max_features is None else int(max_features)
    if not 1 <= n_sub <= d:
        raise ValueError(f"max_features must be in [1, {d}], got {max_features}")
    if n_sub < d:
        if rng is None:
            raise ValueError("feature subsampling needs an rng")
        rand = rng.random((2 * n + 1) * n_sub)
    else:
        rand = np.empty(0)
    best_first = max_leaves is not None
    arrays = _grow(X, y, -1 if max_depth is None else int(max_depth), int(min_samples_leaf),
                   -1 if max_leaves is None else int(max_leaves), n_sub, rand, best_first)
    return RegressionTree(*arrays, n_features=d)
