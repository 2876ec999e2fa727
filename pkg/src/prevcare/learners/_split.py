"""Numba kernels for exact sorted-scan split search.

Every tree learner in the package (boosted trees, CART, the honest causal
tree) grows nodes over a per-feature presorted index matrix ``order`` of
shape ``(n_features, n_rows)``.  A node owns the same contiguous segment
``[start, end)`` in every row of ``order``; splitting a node stably
partitions each row of the segment, so children stay sorted without
re-sorting.

Per-sample statistics are passed as a 2-D ``stats`` array whose meaning
depends on the criterion:

    NEWTON    (gradient, hessian, count)
    VARIANCE  (weight * target, weight, count)
    ENTROPY   (weight * label, weight, count)
    CAUSAL    (n_treated, sum y treated, n_control, sum y control)
"""
import numpy as np
from numba import njit

NEWTON = 0
VARIANCE = 1
ENTROPY = 2
CAUSAL = 3


@njit(cache=True)
def _soft(g, l1):
    if g > l1:
        return g - l1
    if g < -l1:
        return g + l1
    return 0.0


@njit(cache=True)
def _xlogx(a, total):
    if a <= 0.0 or total <= 0.0:
        return 0.0
    return a * np.log(a / total)


@njit(cache=True)
def _score(crit, s0, s1, s2, s3, l1, l2):
    # split gain = score(left) + score(right) - score(parent)
    if crit == NEWTON:
        t = _soft(s0, l1)
        return t * t / (s1 + l2)
    if crit == VARIANCE:
        if s1 <= 0.0:
            return 0.0
        return s0 * s0 / s1
    if crit == ENTROPY:
        return _xlogx(s0, s1) + _xlogx(s1 - s0, s1)
    # CAUSAL: n * tau^2 with tau = mean(y | control) - mean(y | treated)
    if s0 <= 0.0 or s2 <= 0.0:
        return 0.0
    tau = s3 / s2 - s1 / s0
    return (s0 + s2) * tau * tau


@njit(cache=True)
def _feasible(crit, s0, s1, s2, s3, min_leaf, min_hess, min_treated, min_control):
    if crit == CAUSAL:
        return (s0 + s2 >= min_leaf) and (s0 >= min_treated) and (s2 >= min_control)
    if s2 < min_leaf:
        return False
    if crit == NEWTON and s1 < min_hess:
        return False
    return True


@njit(cache=True)
def node_totals(order, stats, start, end):
    n_stats = stats.shape[1]
    tot = np.zeros(4)
    for p in range(start, end):
        s = order[0, p]
        for c in range(n_stats):
            tot[c] += stats[s, c]
    return tot


@njit(cache=True)
def best_split(order, codes, stats, start, end, features, crit,
               l1, l2, min_leaf, min_hess, min_treated, min_control):
    """Return ``(gain, feature, position)`` of the best boundary in a node.

    ``codes`` is feature-major, shape ``(n_features, n_samples)``.
    ``position`` is the index (into ``order[feature]``) of the last sample
    going left.  ``feature`` is -1 when no feasible boundary exists.
    """
    tot = node_totals(order, stats, start, end)
    t0, t1, t2, t3 = tot[0], tot[1], tot[2], tot[3]
    parent = _score(crit, t0, t1, t2, t3, l1, l2)
    best_gain = -np.inf
    best_f = -1
    best_pos = -1
    for fi in range(features.shape[0]):
        f = features[fi]
        row = order[f]
        code = codes[f]
        a0 = 0.0
        a1 = 0.0
        a2 = 0.0
        a3 = 0.0
        s = row[start]
        c_cur = code[s]
        for p in range(start, end - 1):
            a0 += stats[s, 0]
            a1 += stats[s, 1]
            a2 += stats[s, 2]
            a3 += stats[s, 3]
            s_next = row[p + 1]
            c_next = code[s_next]
            same = c_cur == c_next
            s = s_next
            c_cur = c_next
            if same:
                continue
            if not _feasible(crit, a0, a1, a2, a3,
                             min_leaf, min_hess, min_treated, min_control):
                continue
            r0 = t0 - a0
            r1 = t1 - a1
            r2 = t2 - a2
            r3 = t3 - a3
            if not _feasible(crit, r0, r1, r2, r3,
                             min_leaf, min_hess, min_treated, min_control):
                continue
            gain = (_score(crit, a0, a1, a2, a3, l1, l2)
                    + _score(crit, r0, r1, r2, r3, l1, l2) - parent)
            if gain > best_gain:
                best_gain = gain
                best_f = f
                best_pos = p
    return best_gain, best_f, best_pos


@njit(cache=True)
def partition(order, X, feature, threshold, start, end, go_left, buf):
    """Stably split segment ``[start, end)`` of every row; return left size."""
    for p in range(start, end):
        s = order[0, p]
        go_left[s] = X[s, feature] <= threshold
    n_left = 0
    for f in range(order.shape[0]):
        li = start
        ri = 0
        for p in range(start, end):
            s = order[f, p]
            if go_left[s]:
                order[f, li] = s
                li += 1
            else:
                buf[ri] = s
                ri += 1
        for q in range(ri):
            order[f, li + q] = buf[q]
        n_left = li - start
    return n_left


@njit(cache=True)
def apply_tree(X, feature, threshold, left, right):
    """Leaf index reached by every row of ``X``."""
    n = X.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        node = 0
        while left[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out
