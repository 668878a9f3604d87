"""Compiled inner loops for tree growth and prediction.

Trees are grown level by level. Each feature column is presorted once per
fit; a level is processed by walking every presorted column a single time
and dispatching each row to the running statistics of the node it sits in.
All loops are serial so results never depend on thread scheduling.
"""

from __future__ import annotations

import numpy as np
from numba import njit

LEAF = -1
# gains closer than this (relative to the children's score) count as equal
TIE_RTOL = 1e-10


@njit(cache=True, nogil=True, inline="always")
def _midpoint(lo, hi):
    mid = 0.5 * (lo + hi)
    # adjacent doubles: the midpoint can round onto lo, which would send lo right
    if mid <= lo or mid > hi:
        mid = hi
    return mid


@njit(cache=True, nogil=True)
def scan_level(
    sorted_values, order, grad, hess, node_of, active, G, H, lam, gamma, min_child_weight,
    best_feat, best_thr, best_gain,
):
    """Exact greedy split search for every active node at once.

    ``order[f]`` lists row ids sorted by feature ``f``; ``sorted_values[f, k]``
    is the matching feature value.

    ``best_*`` arrays are indexed by node id and must be pre-initialised
    (``best_feat = -1``, ``best_gain = 0``). A candidate replaces the current
    best only when it wins by more than rounding noise (``TIE_RTOL`` relative to
    the children's score), so the lowest feature index and then lowest
    threshold win ties, including ties that summation order would otherwise
    break at random. The same margin keeps numerically-zero gains from
    splitting.
    """
    n_features, n_rows = order.shape
    n_nodes = active.shape[0]
    gl = np.zeros(n_nodes)
    hl = np.zeros(n_nodes)
    last = np.zeros(n_nodes)
    seen = np.zeros(n_nodes, dtype=np.bool_)
    for f in range(n_features):
        gl[:] = 0.0
        hl[:] = 0.0
        seen[:] = False
        for k in range(n_rows):
            r = order[f, k]
            n = node_of[r]
            if n < 0 or not active[n]:
                continue
            v = sorted_values[f, k]
            if seen[n] and v != last[n]:
                g_left = gl[n]
                h_left = hl[n]
                g_right = G[n] - g_left
                h_right = H[n] - h_left
                if h_left >= min_child_weight and h_right >= min_child_weight:
                    children = g_left * g_left / (h_left + lam) + g_right * g_right / (h_right + lam)
                    gain = 0.5 * (children - G[n] * G[n] / (H[n] + lam)) - gamma
                    if gain > best_gain[n] + TIE_RTOL * children:
                        best_gain[n] = gain
                        best_feat[n] = f
                        best_thr[n] = _midpoint(last[n], v)
            gl[n] += grad[r]
            hl[n] += hess[r]
            last[n] = v
            seen[n] = True


@njit(cache=True, nogil=True)
def grow_tree(X, sorted_values, order, grad, hess, node_of, capacity, max_depth, lam, gamma, min_child_weight):
    """Grow one tree over the rows whose ``node_of`` entry is 0 (others are -1).

    ``node_of`` is consumed as scratch space. Returns flat node arrays; node
    ids are assigned breadth first with the root at 0.
    """
    n_rows = X.shape[0]
    feature = np.full(capacity, LEAF, dtype=np.int64)
    threshold = np.zeros(capacity)
    left = np.full(capacity, LEAF, dtype=np.int64)
    right = np.full(capacity, LEAF, dtype=np.int64)
    value = np.zeros(capacity)
    split_gain = np.zeros(capacity)
    cover = np.zeros(capacity)

    G = np.zeros(capacity)
    H = np.zeros(capacity)
    count = np.zeros(capacity, dtype=np.int64)
    for r in range(n_rows):
        if node_of[r] == 0:
            G[0] += grad[r]
            H[0] += hess[r]
            count[0] += 1

    active = np.zeros(capacity, dtype=np.bool_)
    best_feat = np.full(capacity, LEAF, dtype=np.int64)
    best_thr = np.zeros(capacity)
    best_gain = np.zeros(capacity)

    n_nodes = 1
    level_lo = 0
    level_hi = 1
    depth = 0
    while level_lo < level_hi:
        any_active = False
        for n in range(level_lo, level_hi):
            active[n] = depth < max_depth and count[n] >= 2
            any_active = any_active or active[n]
        if any_active:
            scan_level(
                sorted_values, order, grad, hess, node_of, active, G, H, lam, gamma,
                min_child_weight, best_feat, best_thr, best_gain,
            )
        for n in range(level_lo, level_hi):
            active[n] = False
            if best_feat[n] >= 0:
                feature[n] = best_feat[n]
                threshold[n] = best_thr[n]
                split_gain[n] = best_gain[n]
                cover[n] = H[n]
                left[n] = n_nodes
                right[n] = n_nodes + 1
                n_nodes += 2
            else:
                value[n] = -G[n] / (H[n] + lam)
        if n_nodes == level_hi:
            break
        for r in range(n_rows):
            n = node_of[r]
            if n >= level_lo and n < level_hi and feature[n] >= 0:
                if X[r, feature[n]] < threshold[n]:
                    child = left[n]
                else:
                    child = right[n]
                node_of[r] = child
                G[child] += grad[r]
                H[child] += hess[r]
                count[child] += 1
        level_lo = level_hi
        level_hi = n_nodes
        depth += 1

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        value[:n_nodes].copy(),
        split_gain[:n_nodes].copy(),
        cover[:n_nodes].copy(),
    )


@njit(cache=True, nogil=True)
def apply_tree(X, feature, threshold, left, right, value, root, out):
    """``out[i] += tree(X[i])`` for a tree stored at offset ``root``."""
    for i in range(X.shape[0]):
        node = root
        while feature[node] >= 0:
            if X[i, feature[node]] < threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] += value[node]


@njit(cache=True, nogil=True)
def sum_trees(X, feature, threshold, left, right, value, roots):
    """Per-row sum of tree outputs, accumulated in tree order."""
    out = np.zeros(X.shape[0])
    for t in range(roots.shape[0]):
        apply_tree(X, feature, threshold, left, right, value, roots[t], out)
    return out


@njit(cache=True, nogil=True)
def sum_trees_row(x, feature, threshold, left, right, value, roots):
    total = 0.0
    for t in range(roots.shape[0]):
        node = roots[t]
        while feature[node] >= 0:
            if x[feature[node]] < threshold[node]:
                node = left[node]
            else:
                node = right[node]
        total += value[node]
    return total
