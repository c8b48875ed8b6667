"""Independent brute-force reference implementations used by the tests.

Everything here is written with plain index loops and scalar arithmetic so
it shares no code path with the package. Reductions accumulate in ascending
index order (or ascending value order where the implementation contract
says so).
"""

import math

import numpy as np


def loop_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n), dtype=a.dtype)
    for i in range(m):
        for j in range(n):
            s = a.dtype.type(0.0)
            for kk in range(k):
                s = s + a[i, kk] * b[kk, j]
            out[i, j] = s
    return out


def loop_sum_all(x):
    s = x.dtype.type(0.0)
    for v in x.ravel():
        s = s + v
    return s


def loop_sum_axis(x, axis):
    moved = np.moveaxis(x, axis, 0)
    out = np.zeros(moved.shape[1:], dtype=x.dtype)
    flat = out.reshape(-1)
    src = moved.reshape(moved.shape[0], -1)
    for col in range(src.shape[1]):
        s = x.dtype.type(0.0)
        for row in range(src.shape[0]):
            s = s + src[row, col]
        flat[col] = s
    return out


def loop_mean_axis(x, axis):
    return loop_sum_axis(x, axis) / x.dtype.type(x.shape[axis])


def loop_gap(f):
    c, h, w = f.shape
    out = np.zeros(c, dtype=f.dtype)
    for ch in range(c):
        s = f.dtype.type(0.0)
        for i in range(h):
            for j in range(w):
                s = s + f[ch, i, j]
        out[ch] = s / f.dtype.type(h * w)
    return out


def loop_roi(f, box, k):
    """Adaptive average pooling of the box region to k x k, [C*k*k] flat."""
    c, h, w = f.shape
    c0 = min(math.floor(box.x1 * w), w - 1)
    c1 = max(min(math.ceil(box.x2 * w), w), c0 + 1)
    r0 = min(math.floor(box.y1 * h), h - 1)
    r1 = max(min(math.ceil(box.y2 * h), h), r0 + 1)
    rh, rw = r1 - r0, c1 - c0
    out = np.zeros((c, k, k), dtype=f.dtype)
    for a in range(k):
        rs = r0 + (a * rh) // k
        re = r0 + math.ceil((a + 1) * rh / k)
        for b in range(k):
            cs = c0 + (b * rw) // k
            ce = c0 + math.ceil((b + 1) * rw / k)
            for ch in range(c):
                s = f.dtype.type(0.0)
                for i in range(rs, re):
                    for j in range(cs, ce):
                        s = s + f[ch, i, j]
                out[ch, a, b] = s / f.dtype.type((re - rs) * (ce - cs))
    return out.reshape(-1)


def loop_se(f, w1, b1, w2, b2):
    """Channel gate: sigmoid(fc2(relu(fc1(gap(f))))) scaling each channel."""
    c, h, w = f.shape
    z = loop_gap(f)
    hidden = np.zeros(w1.shape[1], dtype=f.dtype)
    for o in range(w1.shape[1]):
        s = f.dtype.type(0.0)
        for i in range(c):
            s = s + z[i] * w1[i, o]
        hidden[o] = max(s + b1[o], 0)
    scale = np.zeros(c, dtype=f.dtype)
    for o in range(c):
        s = f.dtype.type(0.0)
        for i in range(len(hidden)):
            s = s + hidden[i] * w2[i, o]
        scale[o] = 1.0 / (1.0 + np.exp(-(s + b2[o])))
    out = np.zeros_like(f)
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                out[ch, i, j] = f[ch, i, j] * scale[ch]
    return out


def loop_edge_update(h, e, w_eh, w_e):
    """All ordered pairs i != j of relu(W h_i + W h_j + W_e e_ij)."""
    p, d = h.shape
    hw = loop_matmul(h, w_eh)
    ew = loop_matmul(e.reshape(p * p, d), w_e).reshape(p, p, d)
    out = np.zeros((p, p, d), dtype=h.dtype)
    for i in range(p):
        for j in range(p):
            if i == j:
                continue
            for c in range(d):
                v = hw[i, c] + hw[j, c] + ew[i, j, c]
                out[i, j, c] = v if v > 0 else 0.0
    return out


def loop_vertex_update(h, e_new, w_vh):
    """h_i + relu(W h_i + mean over j != i of e_ij * (W h)_j).

    Neighbor terms are summed in ascending value order, matching the
    implementation's order-invariant reduction.
    """
    p, d = h.shape
    hw = loop_matmul(h, w_vh)
    out = np.zeros_like(h)
    for i in range(p):
        for c in range(d):
            terms = sorted(e_new[i, j, c] * hw[j, c] for j in range(p) if j != i)
            s = h.dtype.type(0.0)
            for t in terms:
                s = s + t
            v = hw[i, c] + s / h.dtype.type(p - 1)
            out[i, c] = h[i, c] + (v if v > 0 else 0.0)
    return out


def brute_force_ap(scores, positive):
    """Mean over positives of precision at that positive's score threshold,
    by exhaustive pairwise counting."""
    n = len(scores)
    precs = []
    for i in range(n):
        if not positive[i]:
            continue
        num = sum(1 for j in range(n) if positive[j] and scores[j] >= scores[i])
        den = sum(1 for j in range(n) if scores[j] >= scores[i])
        precs.append(num / den)
    return sum(precs) / len(precs)


def brute_force_recalls(truths, preds, num_classes):
    out = np.full(num_classes, np.nan)
    for c in range(num_classes):
        total = sum(1 for t in truths if t == c)
        if total:
            hit = sum(1 for t, p in zip(truths, preds) if t == c and p == c)
            out[c] = 100.0 * hit / total
    return out


def reference_ema(values, decay):
    """Single-pass EMA over a sequence of (min, max) batch stats."""
    lo = hi = None
    for bmin, bmax in values:
        if lo is None:
            lo, hi = bmin, bmax
        else:
            lo = decay * lo + (1 - decay) * bmin
            hi = decay * hi + (1 - decay) * bmax
    return lo, hi


def central_diff(f, x, eps=1e-4):
    """Per-element central finite differences of scalar f at x."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g
