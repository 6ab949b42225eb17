"""Brute-force reference implementations used as independent test oracles.

Nothing here imports the package's numeric code; every function is a
direct loop over the textbook definition.
"""

from __future__ import annotations

import math

import numpy as np


def conv2d_loop(x, w, b=None, stride=1):
    """3x3 cross-correlation, zero padding 1 (output ceil(n / stride))."""
    bsz, cin, h, wd = x.shape
    cout = w.shape[0]
    ho, wo = -(-h // stride), -(-wd // stride)
    out = np.zeros((bsz, cout, ho, wo))
    for n in range(bsz):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(cin):
                        for di in range(3):
                            for dj in range(3):
                                yi, xj = i * stride + di - 1, j * stride + dj - 1
                                if 0 <= yi < h and 0 <= xj < wd:
                                    acc += x[n, c, yi, xj] * w[o, c, di, dj]
                    out[n, o, i, j] = acc
    return out


def avg_pool_loop(x, k=2):
    bsz, c, h, w = x.shape
    out = np.zeros((bsz, c, h // k, w // k))
    for n in range(bsz):
        for ch in range(c):
            for i in range(h // k):
                for j in range(w // k):
                    s = 0.0
                    for a in range(k):
                        for bb in range(k):
                            s += x[n, ch, i * k + a, j * k + bb]
                    out[n, ch, i, j] = s / (k * k)
    return out


def gap_loop(x):
    bsz, c, h, w = x.shape
    out = np.zeros((bsz, c))
    for n in range(bsz):
        for ch in range(c):
            out[n, ch] = sum(x[n, ch, i, j] for i in range(h) for j in range(w)) / (h * w)
    return out


def dense_loop(x, w, b=None):
    bsz, fin = x.shape
    fout = w.shape[0]
    out = np.zeros((bsz, fout))
    for n in range(bsz):
        for o in range(fout):
            out[n, o] = sum(x[n, i] * w[o, i] for i in range(fin)) + (0.0 if b is None else b[o])
    return out


def leaky_relu_loop(x, alpha=0.2):
    return np.vectorize(lambda v: v if v >= 0 else alpha * v)(x)


def batchnorm_train_loop(x, gamma, beta, eps=1e-5):
    bsz, c, h, w = x.shape
    out = np.zeros_like(x, dtype=float)
    for ch in range(c):
        vals = [x[n, ch, i, j] for n in range(bsz) for i in range(h) for j in range(w)]
        mu = sum(vals) / len(vals)
        var = sum((v - mu) ** 2 for v in vals) / len(vals)
        for n in range(bsz):
            for i in range(h):
                for j in range(w):
                    out[n, ch, i, j] = gamma[ch] * (x[n, ch, i, j] - mu) / math.sqrt(var + eps) + beta[ch]
    return out


def sigmoid_bce_loop(logits, labels):
    z = np.asarray(logits, dtype=float).ravel()
    y = np.asarray(labels, dtype=float).ravel()
    total = 0.0
    for zi, yi in zip(z, y):
        # log(1 + e^-|z|) form, evaluated with math only
        total += max(zi, 0.0) - zi * yi + math.log1p(math.exp(-abs(zi)))
    return total / len(z)


def softmax_ce_loop(logits, labels):
    total = 0.0
    for row, y in zip(np.asarray(logits, dtype=float), labels):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[int(y)]
    return total / len(labels)


def dct2_definition(x):
    """Orthonormal type-II 2D DCT straight from the O(S^4) double sum."""
    n = x.shape[0]
    out = np.zeros((n, n))
    for u in range(n):
        for v in range(n):
            au = math.sqrt(1.0 / n) if u == 0 else math.sqrt(2.0 / n)
            av = math.sqrt(1.0 / n) if v == 0 else math.sqrt(2.0 / n)
            s = 0.0
            for i in range(n):
                ci = math.cos(math.pi * (2 * i + 1) * u / (2 * n))
                for j in range(n):
                    s += x[i, j] * ci * math.cos(math.pi * (2 * j + 1) * v / (2 * n))
            out[u, v] = au * av * s
    return out


def numeric_grad(f, x, h=1e-6):
    """Central differences of scalar f with respect to every entry of x (x is perturbed in place)."""
    g = np.zeros_like(x, dtype=float)
    it = np.nditer(x, flags=["multi_index"], op_flags=["readwrite"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def max_rel_error(analytic, numeric):
    """Largest absolute deviation relative to the tensor's gradient scale."""
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    scale = max(np.abs(a).max(), np.abs(n).max(), 1e-12)
    return float(np.abs(a - n).max() / scale)


def counting_confusion(predicted, relevant):
    tp = fp = fn = tn = 0
    for p, r in zip(predicted, relevant):
        if p and r:
            tp += 1
        elif p and not r:
            fp += 1
        elif r:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn
