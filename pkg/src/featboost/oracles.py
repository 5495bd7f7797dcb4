"""Brute-force reference implementations.

Deliberately naive (explicit loops, direct formulas) so they stay
independent of the vectorized production paths they are checked against.
Used by the verification CLI and reused by the test suite.
"""

from __future__ import annotations

import math

import numpy as np


def matmul_triple_loop(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def softmax_columns_direct(k):
    """Column softmax by direct exp/sum (no stabilization)."""
    k = np.asarray(k, dtype=np.float64)
    out = np.zeros_like(k)
    for d in range(k.shape[1]):
        e = [math.exp(v) for v in k[:, d]]
        s = sum(e)
        out[:, d] = [v / s for v in e]
    return out


def norm_by_summation(x):
    acc = 0.0
    for v in np.asarray(x).reshape(-1):
        acc += v * v
    return math.sqrt(acc)


def layer_norm_two_pass(x, gain, bias, eps=1e-5):
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for i in range(x.shape[0]):
        row = x[i]
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        out[i] = (row - mu) / math.sqrt(var + eps) * np.asarray(gain).reshape(-1) \
            + np.asarray(bias).reshape(-1)
    return out


def mlp_relu_chain(x, weights_and_biases, relu_last=False):
    """Explicit affine/ReLU chain; the final stage is linear unless asked."""
    h = np.asarray(x, dtype=np.float64)
    n_stages = len(weights_and_biases)
    for idx, (w, b) in enumerate(weights_and_biases):
        h = h @ np.asarray(w) + np.asarray(b).reshape(1, -1)
        if idx < n_stages - 1 or relu_last:
            h = np.maximum(h, 0.0)
    return h


def project_direct(desc, w1, b1, w2, b2):
    """affine -> relu -> affine plus the identity shortcut."""
    d = np.asarray(desc, dtype=np.float64)
    h = np.maximum(d @ w1 + b1.reshape(1, -1), 0.0)
    return h @ w2 + b2.reshape(1, -1) + d


def aft_literal(x, wq, wk, wv):
    """Per-keypoint evaluation of the gated pooling formula with explicit sums."""
    x = np.asarray(x, dtype=np.float64)
    q = x @ wq
    k = x @ wk
    v = x @ wv
    n, d = x.shape
    out = np.zeros_like(x)
    for i in range(n):
        for c in range(d):
            num = 0.0
            den = 0.0
            for j in range(n):
                e = math.exp(k[j, c])
                num += e * v[j, c]
                den += e
            out[i, c] = (1.0 / (1.0 + math.exp(-q[i, c]))) * num / den
    return out


def mha_by_hand(x, heads, wq, wk, wv, scale_mode="dk"):
    """Loop-based multi-head attention with row softmax over raw scores."""
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    dk_head = d // heads
    divisor = float(dk_head) if scale_mode == "dk" else math.sqrt(dk_head)
    out = np.zeros_like(x)
    for h in range(heads):
        cols = slice(h * dk_head, (h + 1) * dk_head)
        q = x @ wq[:, cols]
        k = x @ wk[:, cols]
        v = x @ wv[:, cols]
        for i in range(n):
            scores = [float(q[i] @ k[j]) / divisor for j in range(n)]
            m = max(scores)
            e = [math.exp(s - m) for s in scores]
            total = sum(e)
            acc = np.zeros(dk_head)
            for j in range(n):
                acc += (e[j] / total) * v[j]
            out[i, cols] = acc
    return out


def fastap_histogram_direct(z, is_positive, centers, delta, eps=1e-12):
    """AP from per-center histograms and the PR curve, all by direct summation."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    pos = np.asarray(is_positive, dtype=bool).reshape(-1)
    n_pos = int(pos.sum())
    h_pos = []
    h_all = []
    for c in centers:
        hp = ha = 0.0
        for value, p in zip(z, pos):
            w = max(0.0, 1.0 - abs(value - c) / delta)
            ha += w
            if p:
                hp += w
        h_pos.append(hp)
        h_all.append(ha)
    ap = 0.0
    cum_pos = cum_all = 0.0
    for hp, ha in zip(h_pos, h_all):
        cum_pos += hp
        cum_all += ha
        precision = cum_pos / max(cum_all, eps)
        recall_step = hp / n_pos
        ap += precision * recall_step
    return ap


def exact_ap_rank_walk(z, is_positive):
    """AP by walking the sorted ranking one tie group at a time (pure python)."""
    items = sorted(zip([float(v) for v in z], [bool(p) for p in is_positive]),
                   key=lambda t: t[0])
    total_pos = sum(1 for _, p in items if p)
    ap = 0.0
    seen = 0
    seen_pos = 0
    i = 0
    while i < len(items):
        j = i
        group_pos = 0
        while j < len(items) and items[j][0] == items[i][0]:
            if items[j][1]:
                group_pos += 1
            j += 1
        seen += j - i
        seen_pos += group_pos
        if group_pos:
            ap += group_pos * seen_pos / seen
        i = j
    return ap / total_pos


def classic_ap_no_ties(z, is_positive):
    """Textbook AP (mean precision at each positive); valid when all distances differ."""
    order = sorted(range(len(z)), key=lambda i: z[i])
    hits = 0
    precisions = []
    for rank, idx in enumerate(order, start=1):
        if is_positive[idx]:
            hits += 1
            precisions.append(hits / rank)
    return sum(precisions) / len(precisions)


def hamming_bit_loop(bits_a, bits_b):
    count = 0
    for x, y in zip(bits_a, bits_b):
        if int(x) != int(y):
            count += 1
    return count


def nn_exhaustive(dist_matrix):
    """First and second nearest target per row by explicit scanning.

    Returns (best_index, best_distance, second_distance) lists; ties go to
    the smallest index; second_distance is None with fewer than 2 targets.
    """
    d = np.asarray(dist_matrix, dtype=np.float64)
    n, m = d.shape
    best_idx, best_d, second_d = [], [], []
    for i in range(n):
        bj, bd = 0, d[i, 0]
        for j in range(1, m):
            if d[i, j] < bd:
                bj, bd = j, d[i, j]
        sd = None
        if m >= 2:
            sd = math.inf
            for j in range(m):
                if j != bj and d[i, j] < sd:
                    sd = d[i, j]
        best_idx.append(bj)
        best_d.append(bd)
        second_d.append(sd)
    return best_idx, best_d, second_d


def calibration_sweep(correct, incorrect, edges, reject_target):
    """Exhaustive threshold sweep over the given candidate edges."""
    best = None
    for tau in edges:
        rejected = sum(1 for v in incorrect if v > tau) / len(incorrect)
        if rejected < reject_target:
            continue
        retained = sum(1 for v in correct if v <= tau) / len(correct)
        if best is None or retained > best[1]:
            best = (float(tau), retained, rejected)
    return best


def boost_compose(desc, geo, params):
    """Full booster forward composed step by step from the oracle pieces.

    Post-norm layout only; returns the head output rows (unit-norm for the
    real head, +/-1 signs for the binary head).
    """
    t = {name: np.asarray(tv.data) for name, tv in params.tensors.items()}
    x = project_direct(desc, t["desc.w1"], t["desc.w1.b"], t["desc.w2"], t["desc.w2.b"])
    geo_stages = [(t[f"geo.w{i}"], t[f"geo.w{i}.b"]) for i in range(1, 6)]
    x = x + mlp_relu_chain(geo, geo_stages)
    for l in range(params.layers):
        att = aft_literal(x, t[f"enc{l}.wq"], t[f"enc{l}.wk"], t[f"enc{l}.wv"])
        x = layer_norm_two_pass(x + att, t[f"enc{l}.ln1_gain"], t[f"enc{l}.ln1_bias"])
        ffn = mlp_relu_chain(x, [(t[f"enc{l}.ffn.w1"], t[f"enc{l}.ffn.w1.b"]),
                                 (t[f"enc{l}.ffn.w2"], t[f"enc{l}.ffn.w2.b"])])
        x = layer_norm_two_pass(x + ffn, t[f"enc{l}.ln2_gain"], t[f"enc{l}.ln2_bias"])
    if params.head == "real":
        return x / np.array([[norm_by_summation(row)] for row in x])
    return np.where(np.tanh(x) >= 0.0, 1.0, -1.0)
