"""Pure-Python/numpy implementations of the hot kernels.

These mirror ``_ckernels.pyx`` operation for operation, including the order
of floating-point accumulation, so both backends train identical models.
"""

import numpy as np

BACKEND = "python"


def neighbor_offsets(connectivity):
    """Half-neighbourhood (dz, dy, dx) offsets preceding a voxel in scan order."""
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


def label_components(candidates, arteries, connectivity):
    """Union-find labelling of candidate voxels, restricted to equal artery codes.

    ``candidates`` and ``arteries`` are uint8 arrays shaped (nz, ny, nx).
    Returns an int32 array of provisional labels (0 = background) numbered
    by first appearance in z-y-x scan order, and the label count.
    """
    offsets = neighbor_offsets(connectivity)
    zs, ys, xs = np.nonzero(candidates)
    coords = list(zip(zs.tolist(), ys.tolist(), xs.tolist()))
    index = {c: i for i, c in enumerate(coords)}
    codes = arteries[zs, ys, xs].tolist()
    parent = list(range(len(coords)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, (z, y, x) in enumerate(coords):
        for dz, dy, dx in offsets:
            j = index.get((z + dz, y + dy, x + dx))
            if j is None or codes[j] != codes[i]:
                continue
            ri, rj = find(i), find(j)
            if ri != rj:
                if ri < rj:
                    parent[rj] = ri
                else:
                    parent[ri] = rj

    labels = np.zeros(candidates.shape, dtype=np.int32)
    compact = {}
    for i, (z, y, x) in enumerate(coords):
        r = find(i)
        if r not in compact:
            compact[r] = len(compact) + 1
        labels[z, y, x] = compact[r]
    return labels, len(compact)


def _soft(g, alpha):
    return np.sign(g) * np.maximum(np.abs(g) - alpha, 0.0)


def find_splits(X, order, grad, hess, node_of, n_nodes, feature_ok, lam, alpha, gamma, min_child_weight):
    """Best exact split for every open node of one tree level.

    ``order[f]`` holds the row indices sorted by ``X[:, f]`` (stable).
    Rows with ``node_of < 0`` do not participate. Returns per-node arrays
    (gain, feature, threshold, G_left, H_left, G_total, H_total); nodes with
    no admissible split have gain ``-inf`` and feature ``-1``.
    """
    n_features = X.shape[1]
    active = node_of >= 0
    g_tot = np.bincount(node_of[active], weights=grad[active], minlength=n_nodes)[:n_nodes]
    h_tot = np.bincount(node_of[active], weights=hess[active], minlength=n_nodes)[:n_nodes]

    best_gain = np.full(n_nodes, -np.inf)
    best_feat = np.full(n_nodes, -1, dtype=np.int64)
    best_thr = np.zeros(n_nodes)
    best_gl = np.zeros(n_nodes)
    best_hl = np.zeros(n_nodes)

    for f in range(n_features):
        if not feature_ok[f]:
            continue
        o = order[f]
        nodes_sorted = node_of[o]
        for k in range(n_nodes):
            rows = o[nodes_sorted == k]
            if rows.size < 2:
                continue
            v = X[rows, f]
            gl = np.cumsum(grad[rows])
            hl = np.cumsum(hess[rows])
            G = g_tot[k]
            H = h_tot[k]
            gl = gl[:-1]
            hl = hl[:-1]
            gr = G - gl
            hr = H - hl
            ok = (v[:-1] < v[1:]) & (hl >= min_child_weight) & (hr >= min_child_weight)
            if not ok.any():
                continue
            sl = _soft(gl, alpha)
            sr = _soft(gr, alpha)
            s = _soft(G, alpha)
            gain = 0.5 * (sl * sl / (hl + lam) + sr * sr / (hr + lam) - s * s / (H + lam)) - gamma
            gain = np.where(ok, gain, -np.inf)
            pos = int(np.argmax(gain))
            if gain[pos] > best_gain[k]:
                best_gain[k] = gain[pos]
                best_feat[k] = f
                thr = (v[pos] + v[pos + 1]) * 0.5
                if thr <= v[pos]:
                    thr = v[pos + 1]
                best_thr[k] = thr
                best_gl[k] = gl[pos]
                best_hl[k] = hl[pos]
    return best_gain, best_feat, best_thr, best_gl, best_hl, g_tot, h_tot


def _extend(feat, zero, one, weight, depth, zero_fraction, one_fraction, feature):
    feat[depth] = feature
    zero[depth] = zero_fraction
    one[depth] = one_fraction
    weight[depth] = 1.0 if depth == 0 else 0.0
    for i in range(depth - 1, -1, -1):
        weight[i + 1] += one_fraction * weight[i] * (i + 1) / (depth + 1)
        weight[i] = zero_fraction * weight[i] * (depth - i) / (depth + 1)


def _unwind(feat, zero, one, weight, depth, index):
    one_fraction = one[index]
    zero_fraction = zero[index]
    next_one = weight[depth]
    for i in range(depth - 1, -1, -1):
        if one_fraction != 0:
            tmp = weight[i]
            weight[i] = next_one * (depth + 1) / ((i + 1) * one_fraction)
            next_one = tmp - weight[i] * zero_fraction * (depth - i) / (depth + 1)
        else:
            weight[i] = (weight[i] * (depth + 1)) / (zero_fraction * (depth - i))
    for i in range(index, depth):
        feat[i] = feat[i + 1]
        zero[i] = zero[i + 1]
        one[i] = one[i + 1]


def _unwound_sum(zero, one, weight, depth, index):
    one_fraction = one[index]
    zero_fraction = zero[index]
    next_one = weight[depth]
    total = 0.0
    for i in range(depth - 1, -1, -1):
        if one_fraction != 0:
            tmp = next_one * (depth + 1) / ((i + 1) * one_fraction)
            total += tmp
            next_one = weight[i] - tmp * zero_fraction * ((depth - i) / (depth + 1))
        else:
            total += (weight[i] / zero_fraction) / ((depth - i) / (depth + 1))
    return total


def _recurse(node, path, depth, zero_fraction, one_fraction, feature, tree, x, phi):
    left, right, feat_idx, thr, value, cover = tree
    feat, zero, one, weight = (list(p) for p in path)
    for arr in (feat, zero, one, weight):
        arr.append(0)
    _extend(feat, zero, one, weight, depth, zero_fraction, one_fraction, feature)

    if left[node] < 0:
        for i in range(1, depth + 1):
            w = _unwound_sum(zero, one, weight, depth, i)
            phi[feat[i]] += w * (one[i] - zero[i]) * value[node]
        return

    split = feat_idx[node]
    if x[split] < thr[node]:
        hot, cold = left[node], right[node]
    else:
        hot, cold = right[node], left[node]
    w = cover[node]
    hot_zero = cover[hot] / w
    cold_zero = cover[cold] / w
    incoming_zero = 1.0
    incoming_one = 1.0

    index = 0
    while index <= depth:
        if feat[index] == split:
            break
        index += 1
    if index != depth + 1:
        incoming_zero = zero[index]
        incoming_one = one[index]
        _unwind(feat, zero, one, weight, depth, index)
        depth -= 1
        for arr in (feat, zero, one, weight):
            arr.pop()

    path = (feat, zero, one, weight)
    _recurse(hot, path, depth + 1, hot_zero * incoming_zero, incoming_one, split, tree, x, phi)
    _recurse(cold, path, depth + 1, cold_zero * incoming_zero, 0.0, split, tree, x, phi)


def tree_shap(left, right, feature, threshold, value, cover, roots, X):
    """Path-dependent TreeSHAP attributions summed over trees.

    Node arrays are concatenated over trees with global child indices;
    ``roots`` lists each tree's root node. Returns phi of shape (n_rows, n_features).
    """
    n_rows, n_features = X.shape
    phi = np.zeros((n_rows, n_features))
    tree = (left.tolist(), right.tolist(), feature.tolist(), threshold.tolist(), value.tolist(), cover.tolist())
    roots = [int(r) for r in roots]
    for r in range(n_rows):
        x = X[r].tolist()
        row_phi = [0.0] * (n_features + 1)
        for root in roots:
            _recurse(root, ([], [], [], []), 0, 1.0, 1.0, -1, tree, x, row_phi)
        phi[r] = row_phi[:n_features]
    return phi
