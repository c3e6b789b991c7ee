# cython: language_level=3
"""Compiled hot kernels: component labelling, exact split search, TreeSHAP.

Semantics (including floating-point accumulation order) match ``_pykernels``.
"""

import numpy as np

from libc.math cimport INFINITY
from libc.stdlib cimport malloc, free

BACKEND = "cython"


def neighbor_offsets(int connectivity):
    if connectivity not in (6, 18, 26):
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    out = []
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if (dz, dy, dx) >= (0, 0, 0):
                    continue
                order = abs(dz) + abs(dy) + abs(dx)
                if connectivity == 6 and order > 1:
                    continue
                if connectivity == 18 and order > 2:
                    continue
                out.append((dz, dy, dx))
    return out


cdef inline Py_ssize_t _find(Py_ssize_t[::1] parent, Py_ssize_t i) noexcept nogil:
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


def label_components(const unsigned char[:, :, ::1] candidates,
                     const unsigned char[:, :, ::1] arteries,
                     int connectivity):
    cdef Py_ssize_t nz = candidates.shape[0]
    cdef Py_ssize_t ny = candidates.shape[1]
    cdef Py_ssize_t nx = candidates.shape[2]
    offsets = neighbor_offsets(connectivity)
    cdef Py_ssize_t n_off = len(offsets)
    cdef Py_ssize_t[:, ::1] off = np.asarray(offsets, dtype=np.intp).reshape(n_off, 3)
    cdef Py_ssize_t[::1] parent = np.arange(nz * ny * nx, dtype=np.intp)
    out = np.zeros((nz, ny, nx), dtype=np.int32)
    cdef int[:, :, ::1] labels = out
    cdef Py_ssize_t z, y, x, k, zz, yy, xx, i, j, ri, rj
    cdef int n_labels = 0
    cdef int[::1] compact = np.zeros(nz * ny * nx, dtype=np.int32)

    with nogil:
        for z in range(nz):
            for y in range(ny):
                for x in range(nx):
                    if not candidates[z, y, x]:
                        continue
                    i = (z * ny + y) * nx + x
                    for k in range(n_off):
                        zz = z + off[k, 0]
                        yy = y + off[k, 1]
                        xx = x + off[k, 2]
                        if zz < 0 or yy < 0 or xx < 0 or zz >= nz or yy >= ny or xx >= nx:
                            continue
                        if not candidates[zz, yy, xx] or arteries[zz, yy, xx] != arteries[z, y, x]:
                            continue
                        j = (zz * ny + yy) * nx + xx
                        ri = _find(parent, i)
                        rj = _find(parent, j)
                        if ri != rj:
                            if ri < rj:
                                parent[rj] = ri
                            else:
                                parent[ri] = rj
        for z in range(nz):
            for y in range(ny):
                for x in range(nx):
                    if not candidates[z, y, x]:
                        continue
                    i = (z * ny + y) * nx + x
                    ri = _find(parent, i)
                    if compact[ri] == 0:
                        n_labels += 1
                        compact[ri] = n_labels
                    labels[z, y, x] = compact[ri]
    return out, n_labels


cdef inline double _soft(double g, double alpha) noexcept nogil:
    if g > alpha:
        return g - alpha
    if g < -alpha:
        return g + alpha
    return 0.0


def find_splits(const double[:, ::1] X, const long[:, ::1] order,
                const double[::1] grad, const double[::1] hess,
                const int[::1] node_of, int n_nodes,
                const unsigned char[::1] feature_ok,
                double lam, double alpha, double gamma, double min_child_weight):
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t p = X.shape[1]
    g_tot_a = np.zeros(n_nodes)
    h_tot_a = np.zeros(n_nodes)
    gain_a = np.full(n_nodes, -np.inf)
    feat_a = np.full(n_nodes, -1, dtype=np.int64)
    thr_a = np.zeros(n_nodes)
    gl_a = np.zeros(n_nodes)
    hl_a = np.zeros(n_nodes)
    cdef double[::1] g_tot = g_tot_a
    cdef double[::1] h_tot = h_tot_a
    cdef double[::1] best_gain = gain_a
    cdef long[::1] best_feat = feat_a
    cdef double[::1] best_thr = thr_a
    cdef double[::1] best_gl = gl_a
    cdef double[::1] best_hl = hl_a
    cdef double[::1] cum_g = np.zeros(n_nodes)
    cdef double[::1] cum_h = np.zeros(n_nodes)
    cdef double[::1] prev_v = np.zeros(n_nodes)
    cdef unsigned char[::1] seen = np.zeros(n_nodes, dtype=np.uint8)
    cdef Py_ssize_t i, f, r, k
    cdef double v, gl, hl, gr, hr, sl, sr, s, G, H, gain, thr

    with nogil:
        for i in range(n):
            k = node_of[i]
            if k >= 0:
                g_tot[k] += grad[i]
                h_tot[k] += hess[i]
        for f in range(p):
            if not feature_ok[f]:
                continue
            for k in range(n_nodes):
                cum_g[k] = 0.0
                cum_h[k] = 0.0
                seen[k] = 0
            for r in range(n):
                i = order[f, r]
                k = node_of[i]
                if k < 0:
                    continue
                v = X[i, f]
                if seen[k] and prev_v[k] < v:
                    gl = cum_g[k]
                    hl = cum_h[k]
                    G = g_tot[k]
                    H = h_tot[k]
                    gr = G - gl
                    hr = H - hl
                    if hl >= min_child_weight and hr >= min_child_weight:
                        sl = _soft(gl, alpha)
                        sr = _soft(gr, alpha)
                        s = _soft(G, alpha)
                        gain = 0.5 * (sl * sl / (hl + lam) + sr * sr / (hr + lam) - s * s / (H + lam)) - gamma
                        if gain > best_gain[k]:
                            best_gain[k] = gain
                            best_feat[k] = f
                            thr = (prev_v[k] + v) * 0.5
                            if thr <= prev_v[k]:
                                thr = v
                            best_thr[k] = thr
                            best_gl[k] = gl
                            best_hl[k] = hl
                cum_g[k] += grad[i]
                cum_h[k] += hess[i]
                prev_v[k] = v
                seen[k] = 1
    return gain_a, feat_a, thr_a, gl_a, hl_a, g_tot_a, h_tot_a


cdef struct PathElement:
    long feature
    double zero
    double one
    double weight


cdef void _extend(PathElement *path, int depth, double zero_fraction,
                  double one_fraction, long feature) noexcept nogil:
    cdef int i
    path[depth].feature = feature
    path[depth].zero = zero_fraction
    path[depth].one = one_fraction
    path[depth].weight = 1.0 if depth == 0 else 0.0
    for i in range(depth - 1, -1, -1):
        path[i + 1].weight += one_fraction * path[i].weight * (i + 1) / <double>(depth + 1)
        path[i].weight = zero_fraction * path[i].weight * (depth - i) / <double>(depth + 1)


cdef void _unwind(PathElement *path, int depth, int index) noexcept nogil:
    cdef double one_fraction = path[index].one
    cdef double zero_fraction = path[index].zero
    cdef double next_one = path[depth].weight
    cdef double tmp
    cdef int i
    for i in range(depth - 1, -1, -1):
        if one_fraction != 0:
            tmp = path[i].weight
            path[i].weight = next_one * (depth + 1) / ((i + 1) * one_fraction)
            next_one = tmp - path[i].weight * zero_fraction * (depth - i) / <double>(depth + 1)
        else:
            path[i].weight = (path[i].weight * (depth + 1)) / (zero_fraction * (depth - i))
    for i in range(index, depth):
        path[i].feature = path[i + 1].feature
        path[i].zero = path[i + 1].zero
        path[i].one = path[i + 1].one


cdef double _unwound_sum(PathElement *path, int depth, int index) noexcept nogil:
    cdef double one_fraction = path[index].one
    cdef double zero_fraction = path[index].zero
    cdef double next_one = path[depth].weight
    cdef double total = 0.0
    cdef double tmp
    cdef int i
    for i in range(depth - 1, -1, -1):
        if one_fraction != 0:
            tmp = next_one * (depth + 1) / ((i + 1) * one_fraction)
            total += tmp
            next_one = path[i].weight - tmp * zero_fraction * ((depth - i) / <double>(depth + 1))
        else:
            total += (path[i].weight / zero_fraction) / ((depth - i) / <double>(depth + 1))
    return total


cdef void _recurse(Py_ssize_t node, PathElement *parent_path, int depth,
                   double zero_fraction, double one_fraction, long feature,
                   const long[::1] left, const long[::1] right, const long[::1] split_feature,
                   const double[::1] threshold, const double[::1] value, const double[::1] cover,
                   const double[::1] x, double *phi) noexcept nogil:
    cdef PathElement *path = parent_path + depth + 1
    cdef int i, index
    cdef long split
    cdef Py_ssize_t hot, cold
    cdef double w, hot_zero, cold_zero, incoming_zero, incoming_one
    for i in range(depth):
        path[i] = parent_path[i]
    _extend(path, depth, zero_fraction, one_fraction, feature)

    if left[node] < 0:
        for i in range(1, depth + 1):
            w = _unwound_sum(path, depth, i)
            phi[path[i].feature] += w * (path[i].one - path[i].zero) * value[node]
        return

    split = split_feature[node]
    if x[split] < threshold[node]:
        hot = left[node]
        cold = right[node]
    else:
        hot = right[node]
        cold = left[node]
    w = cover[node]
    hot_zero = cover[hot] / w
    cold_zero = cover[cold] / w
    incoming_zero = 1.0
    incoming_one = 1.0

    index = 0
    while index <= depth:
        if path[index].feature == split:
            break
        index += 1
    if index != depth + 1:
        incoming_zero = path[index].zero
        incoming_one = path[index].one
        _unwind(path, depth, index)
        depth -= 1

    _recurse(hot, path, depth + 1, hot_zero * incoming_zero, incoming_one, split,
             left, right, split_feature, threshold, value, cover, x, phi)
    _recurse(cold, path, depth + 1, cold_zero * incoming_zero, 0.0, split,
             left, right, split_feature, threshold, value, cover, x, phi)


def tree_shap(const long[::1] left, const long[::1] right, const long[::1] feature,
              const double[::1] threshold, const double[::1] value, const double[::1] cover,
              const long[::1] roots, const double[:, ::1] X):
    cdef Py_ssize_t n_rows = X.shape[0]
    cdef Py_ssize_t n_features = X.shape[1]
    cdef Py_ssize_t n_nodes = left.shape[0]
    cdef Py_ssize_t r, t
    # path depth is bounded by node count + 1 along any root-to-leaf walk
    cdef Py_ssize_t max_depth = n_nodes + 2
    cdef Py_ssize_t path_len = (max_depth * (max_depth + 1)) // 2 + 1
    if n_rows and roots.shape[0]:
        max_depth = _max_depth(left, right, roots) + 2
        path_len = (max_depth * (max_depth + 1)) // 2 + 1
    out = np.zeros((n_rows, n_features))
    cdef double[:, ::1] phi = out
    cdef double *row_phi = <double *> malloc((n_features + 1) * sizeof(double))
    cdef PathElement *path = <PathElement *> malloc(path_len * sizeof(PathElement))
    if row_phi == NULL or path == NULL:
        free(row_phi)
        free(path)
        raise MemoryError()
    try:
        with nogil:
            for r in range(n_rows):
                for t in range(n_features + 1):
                    row_phi[t] = 0.0
                for t in range(roots.shape[0]):
                    _recurse(roots[t], path, 0, 1.0, 1.0, -1, left, right, feature,
                             threshold, value, cover, X[r], row_phi)
                for t in range(n_features):
                    phi[r, t] = row_phi[t]
    finally:
        free(row_phi)
        free(path)
    return out


cdef Py_ssize_t _max_depth(const long[::1] left, const long[::1] right, const long[::1] roots):
    stack = [(int(r), 0) for r in roots]
    best = 0
    while stack:
        node, d = stack.pop()
        if d > best:
            best = d
        if left[node] >= 0:
            stack.append((int(left[node]), d + 1))
            stack.append((int(right[node]), d + 1))
    return best
