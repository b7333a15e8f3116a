"""Brute-force reference implementations shared by several test modules."""

import math

import numpy as np


def sliding_window(x, k):
    """Direct zero-padded cross-correlation, one output cell at a time."""
    n, m = x.shape
    kh, kw = k.shape
    out = np.zeros_like(x)
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for u in range(kh):
                for v in range(kw):
                    r, c = i + u - kh // 2, j + v - kw // 2
                    if 0 <= r < n and 0 <= c < m:
                        acc += k[u, v] * x[r, c]
            out[i, j] = acc
    return out


def ref_pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    num = sum((a - mx) * (b - my) for a, b in zip(x, y))
    den = math.sqrt(sum((a - mx) ** 2 for a in x)) * math.sqrt(sum((b - my) ** 2 for b in y))
    return num / den


def ref_ranks(x):
    order = sorted(range(len(x)), key=lambda i: x[i])
    ranks = [0.0] * len(x)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and x[order[j + 1]] == x[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def ref_spearman(x, y):
    rx, ry = ref_ranks(x), ref_ranks(y)
    n = len(x)
    d2 = sum((a - b) ** 2 for a, b in zip(rx, ry))
    return 1 - 6 * d2 / (n * (n * n - 1))


def ref_minkowski(x, y, p=2.0):
    return sum(abs(a - b) ** p for a, b in zip(x, y)) ** (1 / p)


def classic_gat(H, W, a, A, slope=0.2):
    """Per-node loop of the edge-free attention formula, self included."""
    n = H.shape[0]
    P = H @ W
    fo = W.shape[1]
    alpha = np.zeros((n, n))
    for i in range(n):
        nbrs = [j for j in range(n) if A[i, j] > 0 or j == i]
        logits = []
        for j in nbrs:
            s = a[:fo] @ P[i] + a[fo:] @ P[j]
            logits.append(s if s > 0 else slope * s)
        w = np.exp(np.array(logits) - max(logits))
        alpha[i, nbrs] = w / w.sum()
    return alpha
