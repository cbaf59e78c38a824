"""Slow, loop-only reference implementations used as independent oracles.

Nothing here shares code with the package beyond reading numpy arrays
element by element; every sum is spelled out as nested Python loops.
"""

import math

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(seed, n):
    state = seed & MASK64
    out = []
    for _ in range(n):
        state = (state + 0x9E3779B97F4A7C15) & MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        out.append(z ^ (z >> 31))
    return out


def splitmix_floats(seed, n):
    return [2.0 * ((z >> 11) * 2.0 ** -53) - 1.0 for z in splitmix64(seed, n)]


def _at(x, i, j, c):
    h, w = x.shape[:2]
    if 0 <= i < h and 0 <= j < w:
        return float(x[i, j, c])
    return 0.0


def conv2d(x, w):
    h, wd, d_in = x.shape
    k, d_out = w.shape[0], w.shape[3]
    l = k // 2
    y = np.zeros((h, wd, d_out))
    for i in range(h):
        for j in range(wd):
            for m in range(d_out):
                acc = 0.0
                for a in range(-l, l + 1):
                    for b in range(-l, l + 1):
                        for c in range(d_in):
                            acc += w[l - a, l - b, c, m] * _at(x, i - a, j - b, c)
                y[i, j, m] = acc
    return y


def ev_apply(x, kern, groups):
    h, wd, d_in = x.shape
    k, n, d_out = kern.shape[2], kern.shape[4], kern.shape[5]
    l = k // 2
    y = np.zeros((h, wd, d_out))
    for i in range(h):
        for j in range(wd):
            for m in range(d_out):
                g = (m * groups) // d_out
                acc = 0.0
                for a in range(-l, l + 1):
                    for b in range(-l, l + 1):
                        for c in range(g * n, (g + 1) * n):
                            acc += _at(x, i - a, j - b, c) * kern[i, j, l - a, l - b, c - g * n, m]
                y[i, j, m] = acc
    return y


def _dot(u, v):
    return sum(float(p) * float(q) for p, q in zip(u, v))


def _vec_mat(vec, mat):
    return [_dot(vec, mat[:, col]) for col in range(mat.shape[1])]


def _softmax(scores):
    top = max(scores)
    e = [math.exp(s - top) for s in scores]
    total = sum(e)
    return [v / total for v in e]


def local_attention_pixel_probs(x, wq, wk, k, i, j, pos=None):
    """Probabilities over the K*K window (row-major) for one pixel and head.

    ``pos`` is None, ("absolute", P) or ("relative", r_table, wk_hat, u, v).
    """
    h, wd, d_in = x.shape
    l = k // 2
    xs = x if pos is None or pos[0] != "absolute" else x + pos[1]

    def feat(p, q):
        return [_at(xs, p, q, c) for c in range(d_in)]

    query = _vec_mat(feat(i, j), wq)
    scores = []
    for p in range(k):
        for q in range(k):
            key = _vec_mat(feat(i - l + p, j - l + q), wk)
            s = _dot(query, key)
            if pos is not None and pos[0] == "relative":
                _, r_table, wk_hat, u, v = pos
                rel = _vec_mat(r_table[p, q], wk_hat)
                s += _dot(query, rel) + _dot(u, key) + _dot(v, rel)
            scores.append(s)
    return _softmax(scores)


def local_self_attention(x, wq, wk, wv, k, wo=None, pos=None):
    """Per-pixel attention with explicit dot products.

    ``wq``, ``wk``, ``wv`` are per-head lists; ``pos`` entries that vary by
    head (relative wk_hat, u, v) are given as per-head lists too.
    """
    h, wd, d_in = x.shape
    l = k // 2
    heads = len(wq)
    d_h = wv[0].shape[1]
    cat = np.zeros((h, wd, heads * d_h))
    for z in range(heads):
        head_pos = pos
        if pos is not None and pos[0] == "relative":
            head_pos = ("relative", pos[1], pos[2][z], pos[3][z], pos[4][z])
        for i in range(h):
            for j in range(wd):
                probs = local_attention_pixel_probs(x, wq[z], wk[z], k, i, j, head_pos)
                for m in range(d_h):
                    acc = 0.0
                    for p in range(k):
                        for q in range(k):
                            nb = [_at(x, i - l + p, j - l + q, c) for c in range(d_in)]
                            acc += probs[p * k + q] * _dot(nb, wv[z][:, m])
                    cat[i, j, z * d_h + m] = acc
    if wo is None:
        return cat
    out = np.zeros((h, wd, wo.shape[1]))
    for i in range(h):
        for j in range(wd):
            out[i, j] = _vec_mat(cat[i, j], wo)
    return out


def involution_kernel(x, w0, w1, gamma, beta, k, groups):
    h, wd, d = x.shape
    kern = np.zeros((h, wd, k, k, groups))
    for i in range(h):
        for j in range(wd):
            hidden = []
            for row in range(w0.shape[0]):
                pre = _dot(w0[row], x[i, j])
                hidden.append(max(gamma[row] * pre + beta[row], 0.0))
            for g in range(groups):
                for p in range(k):
                    for q in range(k):
                        kern[i, j, p, q, g] = _dot(w1[g * k * k + p * k + q], hidden)
    return kern


def involution_apply(x, kern):
    h, wd, d = x.shape
    k, groups = kern.shape[2], kern.shape[4]
    l = k // 2
    y = np.zeros_like(x)
    for i in range(h):
        for j in range(wd):
            for m in range(d):
                g = (m * groups) // d
                acc = 0.0
                for a in range(-l, l + 1):
                    for b in range(-l, l + 1):
                        acc += kern[i, j, l - a, l - b, g] * _at(x, i - a, j - b, m)
                y[i, j, m] = acc
    return y


def channelwise_attention(x, wq_c, wk_c, wv, k):
    h, wd, d_in = x.shape
    l = k // 2
    y = np.zeros((h, wd, wv.shape[1]))
    for i in range(h):
        for j in range(wd):
            for c in range(d_in):
                probs = local_attention_pixel_probs(x, wq_c[c], wk_c[c], k, i, j)
                agg = 0.0
                for p in range(k):
                    for q in range(k):
                        agg += probs[p * k + q] * _at(x, i - l + p, j - l + q, c)
                for m in range(wv.shape[1]):
                    y[i, j, m] += agg * wv[c, m]
    return y
