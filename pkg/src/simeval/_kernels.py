"""numba kernels over flat node arrays.

A tree is six parallel arrays indexed by node id (root = 0): ``feature``
(-1 on leaves), ``threshold``, ``left``, ``right``, ``value`` (fraction of
fraud among training samples reaching the node) and ``cover`` (weighted
training count).  Forest kernels take the concatenation of all trees plus an
``offsets`` array; child ids stay tree-local.
"""

import numpy as np
from numba import njit

# ----------------------------------------------------------------- growing


@njit(cache=True, nogil=True)
def build_tree(X, y, w, min_leaf, max_depth, mtry, seed):
    """Greedy Gini CART on weighted rows; returns the node arrays.

    ``w`` holds integer multiplicities (bootstrap counts) as floats, so all
    class counts are exact.  ``max_depth < 0`` disables the depth cap.  When
    ``mtry < p`` features are visited in a random order and the search stops
    after ``mtry`` features that are non-constant inside the node.
    """
    n, p = X.shape
    if mtry < p:
        np.random.seed(seed)
    cap = 2 * n + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    cover = np.zeros(cap)

    idx = np.arange(n)
    buf = np.empty(n, np.int64)
    feats = np.arange(p)
    st_node = np.empty(cap, np.int64)
    st_lo = np.empty(cap, np.int64)
    st_hi = np.empty(cap, np.int64)
    st_depth = np.empty(cap, np.int64)
    top = 1
    st_node[0] = 0
    st_lo[0] = 0
    st_hi[0] = n
    st_depth[0] = 0
    n_nodes = 1

    while top > 0:
        top -= 1
        node = st_node[top]
        lo = st_lo[top]
        hi = st_hi[top]
        depth = st_depth[top]
        W = 0.0
        P = 0.0
        for k in range(lo, hi):
            r = idx[k]
            W += w[r]
            P += w[r] * y[r]
        value[node] = P / W
        cover[node] = W
        if P == 0.0 or P == W or W < 2.0 * min_leaf:
            continue
        if max_depth >= 0 and depth >= max_depth:
            continue

        m = hi - lo
        vals = np.empty(m)
        best_s = np.inf
        best_f = -1
        best_t = 0.0
        visited = 0
        for q in range(p):
            if mtry < p:
                j = q + np.random.randint(p - q)
                tmp = feats[q]
                feats[q] = feats[j]
                feats[j] = tmp
            f = feats[q]
            for k in range(m):
                vals[k] = X[idx[lo + k], f]
            order = np.argsort(vals, kind="mergesort")
            if vals[order[0]] == vals[order[m - 1]]:
                continue
            visited += 1
            wl = 0.0
            pl = 0.0
            for k in range(m - 1):
                r = idx[lo + order[k]]
                wl += w[r]
                pl += w[r] * y[r]
                v0 = vals[order[k]]
                v1 = vals[order[k + 1]]
                if v0 == v1:
                    continue
                wr = W - wl
                if wl < min_leaf or wr < min_leaf:
                    continue
                pr = P - pl
                s = 2.0 * pl * (wl - pl) / wl + 2.0 * pr * (wr - pr) / wr
                t = 0.5 * (v0 + v1)
                if t >= v1:
                    t = v0
                if s < best_s or (s == best_s and (f < best_f or (f == best_f and t < best_t))):
                    best_s = s
                    best_f = f
                    best_t = t
            if visited >= mtry:
                break
        if best_f < 0:
            continue

        # stable partition of idx[lo:hi]
        nl = 0
        for k in range(lo, hi):
            if X[idx[k], best_f] <= best_t:
                buf[nl] = idx[k]
                nl += 1
        nr = nl
        for k in range(lo, hi):
            if X[idx[k], best_f] > best_t:
                buf[nr] = idx[k]
                nr += 1
        for k in range(m):
            idx[lo + k] = buf[k]

        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        feature[node] = best_f
        threshold[node] = best_t
        left[node] = lc
        right[node] = rc
        # right pushed first so the left subtree is grown first
        st_node[top] = rc
        st_lo[top] = lo + nl
        st_hi[top] = hi
        st_depth[top] = depth + 1
        top += 1
        st_node[top] = lc
        st_lo[top] = lo
        st_hi[top] = lo + nl
        st_depth[top] = depth + 1
        top += 1

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy(), cover[:n_nodes].copy())


# --------------------------------------------------------------- inference


@njit(cache=True, nogil=True)
def predict_packed(offsets, feature, threshold, left, right, value, X):
    n_trees = offsets.shape[0] - 1
    out = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        s = 0.0
        for t in range(n_trees):
            b = offsets[t]
            node = 0
            while feature[b + node] >= 0:
                if X[i, feature[b + node]] <= threshold[b + node]:
                    node = left[b + node]
                else:
                    node = right[b + node]
            s += value[b + node]
        out[i] = s / n_trees
    return out


@njit(cache=True, nogil=True)
def saabas_packed(offsets, feature, threshold, left, right, value, X):
    n_trees = offsets.shape[0] - 1
    n, p = X.shape
    contrib = np.zeros((n, p))
    base = np.zeros(n)
    for i in range(n):
        for t in range(n_trees):
            b = offsets[t]
            node = 0
            base[i] += value[b]
            while feature[b + node] >= 0:
                f = feature[b + node]
                if X[i, f] <= threshold[b + node]:
                    child = left[b + node]
                else:
                    child = right[b + node]
                contrib[i, f] += value[b + child] - value[b + node]
                node = child
        base[i] /= n_trees
        for j in range(p):
            contrib[i, j] /= n_trees
    return contrib, base


# ---------------------------------------------------- path-dependent TreeSHAP
# Not cached: reloading a cached self-recursive kernel segfaults under numba.


@njit(nogil=True)
def _extend(fi, zf, of, pw, s, depth, zero, one, feat):
    fi[s + depth] = feat
    zf[s + depth] = zero
    of[s + depth] = one
    pw[s + depth] = 1.0 if depth == 0 else 0.0
    for i in range(depth - 1, -1, -1):
        pw[s + i + 1] += one * pw[s + i] * (i + 1) / (depth + 1)
        pw[s + i] = zero * pw[s + i] * (depth - i) / (depth + 1)


@njit(nogil=True)
def _unwind(fi, zf, of, pw, s, depth, k):
    one = of[s + k]
    zero = zf[s + k]
    nxt = pw[s + depth]
    for i in range(depth - 1, -1, -1):
        if one != 0.0:
            tmp = pw[s + i]
            pw[s + i] = nxt * (depth + 1) / ((i + 1) * one)
            nxt = tmp - pw[s + i] * zero * (depth - i) / (depth + 1)
        else:
            pw[s + i] = pw[s + i] * (depth + 1) / (zero * (depth - i))
    for i in range(k, depth):
        fi[s + i] = fi[s + i + 1]
        zf[s + i] = zf[s + i + 1]
        of[s + i] = of[s + i + 1]


@njit(nogil=True)
def _unwound_sum(zf, of, pw, s, depth, k):
    one = of[s + k]
    zero = zf[s + k]
    nxt = pw[s + depth]
    total = 0.0
    for i in range(depth - 1, -1, -1):
        if one != 0.0:
            tmp = nxt * (depth + 1) / ((i + 1) * one)
            total += tmp
            nxt = pw[s + i] - tmp * zero * (depth - i) / (depth + 1)
        else:
            total += (pw[s + i] / zero) / ((depth - i) / (depth + 1))
    return total


@njit(nogil=True)
def _shap_recurse(b, feature, threshold, left, right, value, cover, x, phi,
                  fi, zf, of, pw, node, depth, parent, zero, one, feat):
    s = parent + depth + 1
    for i in range(depth):
        fi[s + i] = fi[parent + i]
        zf[s + i] = zf[parent + i]
        of[s + i] = of[parent + i]
        pw[s + i] = pw[parent + i]
    _extend(fi, zf, of, pw, s, depth, zero, one, feat)

    f = feature[b + node]
    if f < 0:
        for i in range(1, depth + 1):
            wsum = _unwound_sum(zf, of, pw, s, depth, i)
            phi[fi[s + i]] += wsum * (of[s + i] - zf[s + i]) * value[b + node]
        return 0

    if x[f] <= threshold[b + node]:
        hot = left[b + node]
        cold = right[b + node]
    else:
        hot = right[b + node]
        cold = left[b + node]
    c = cover[b + node]
    hot_zero = cover[b + hot] / c
    cold_zero = cover[b + cold] / c
    in_zero = 1.0
    in_one = 1.0
    k = 0
    while k <= depth:
        if fi[s + k] == f:
            break
        k += 1
    if k <= depth:
        in_zero = zf[s + k]
        in_one = of[s + k]
        _unwind(fi, zf, of, pw, s, depth, k)
        depth -= 1
    _shap_recurse(b, feature, threshold, left, right, value, cover, x, phi,
                  fi, zf, of, pw, hot, depth + 1, s, hot_zero * in_zero, in_one, f)
    _shap_recurse(b, feature, threshold, left, right, value, cover, x, phi,
                  fi, zf, of, pw, cold, depth + 1, s, cold_zero * in_zero, 0.0, f)
    return 0


@njit(nogil=True)
def treeshap_packed(offsets, feature, threshold, left, right, value, cover, max_depth, X):
    n_trees = offsets.shape[0] - 1
    n, p = X.shape
    size = (max_depth + 4) * (max_depth + 5) // 2 + 1
    fi = np.zeros(size, np.int64)
    zf = np.zeros(size)
    of = np.zeros(size)
    pw = np.zeros(size)
    phi = np.zeros((n, p))
    base = np.zeros(n)
    tree_phi = np.zeros(p)
    for i in range(n):
        for t in range(n_trees):
            b = offsets[t]
            for j in range(p):
                tree_phi[j] = 0.0
            _shap_recurse(b, feature, threshold, left, right, value, cover, X[i], tree_phi,
                          fi, zf, of, pw, 0, 0, 0, 1.0, 1.0, -1)
            for j in range(p):
                phi[i, j] += tree_phi[j]
            base[i] += value[b]
        base[i] /= n_trees
        for j in range(p):
            phi[i, j] /= n_trees
    return phi, base
