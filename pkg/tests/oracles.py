"""Independent reference implementations used only by the tests.

They are written for clarity (explicit loops, mpmath, scipy.stats) and share
no code with the package.
"""

from __future__ import annotations

import itertools
import math

import mpmath
import numpy as np
from scipy import stats


def conv2d_naive(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    y = np.zeros((n, o, ho, wo))
    for a, f, i, j in itertools.product(range(n), range(o), range(ho), range(wo)):
        patch = xp[a, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
        y[a, f, i, j] = (patch * w[f]).sum() + (b[f] if b is not None else 0.0)
    return y


def conv_transpose2d_naive(x, w, b, stride, pad, out_hw):
    # scatter form: every input pixel stamps its weighted kernel into the output
    n, c, h, wd = x.shape
    _, o, kh, kw = w.shape
    oh, ow = out_hw
    full = np.zeros((n, o, (h - 1) * stride + kh + oh, (wd - 1) * stride + kw + ow))
    for a, ci, i, j in itertools.product(range(n), range(c), range(h), range(wd)):
        full[a, :, i * stride:i * stride + kh, j * stride:j * stride + kw] += x[a, ci, i, j] * w[ci]
    y = full[:, :, pad:pad + oh, pad:pad + ow]
    if b is not None:
        y = y + b[None, :, None, None]
    return y


def qpm_kernel_mp(codewords, eps, dps=40):
    """Transition matrix at ``dps`` digits with plain (unshifted) exponentials."""
    with mpmath.workdps(dps):
        cw = [[mpmath.mpf(float(v)) for v in row] for row in np.atleast_2d(codewords)]
        k = len(cw)
        d = [[mpmath.sqrt(sum((a - b) ** 2 for a, b in zip(cw[i], cw[j]))) for j in range(k)]
             for i in range(k)]
        e = mpmath.mpf(eps)
        pi = []
        for i in range(k):
            z = sum(mpmath.exp(-d[i][j]) for j in range(k) if j != i)
            pi.append([1 - e if j == i else e * mpmath.exp(-d[i][j]) / z for j in range(k)])
        return pi


def qpm_marginal_kl_mp(codewords, eps, dps=40):
    with mpmath.workdps(dps):
        pi = qpm_kernel_mp(codewords, eps, dps)
        k = len(pi)
        q = [sum(pi[i][j] for i in range(k)) / k for j in range(k)]
        kl = -sum(mpmath.log(k * qj) for qj in q) / k
        return [float(v) for v in q], float(kl), [[float(v) for v in row] for row in pi]


def kl_dropout_mp(p):
    with mpmath.workdps(40):
        p = mpmath.mpf(p)
        return float(mpmath.mpf(1) / 2 * (p / (1 - p) + mpmath.log(1 - p)))


def boundary_naive(mask):
    h, w = mask.shape
    pts = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                a, b = i + di, j + dj
                if not (0 <= a < h and 0 <= b < w) or not mask[a, b]:
                    pts.append((i, j))
                    break
    return pts


def surface_naive(pred, gt):
    bp, bg = boundary_naive(pred), boundary_naive(gt)

    def directed(src, dst):
        return [min(math.hypot(p[0] - q[0], p[1] - q[1]) for q in dst) for p in src]

    pooled = sorted(directed(bp, bg) + directed(bg, bp))
    # linear-interpolated 95th percentile written out by hand
    pos = 0.95 * (len(pooled) - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, len(pooled) - 1)
    hd95 = pooled[lo] + (pooled[hi] - pooled[lo]) * (pos - lo)
    return hd95, sum(pooled) / len(pooled)


def dice_jaccard_naive(pred, gt):
    a = {tuple(p) for p in np.argwhere(pred)}
    b = {tuple(p) for p in np.argwhere(gt)}
    if not a and not b:
        return 1.0, 1.0
    inter = len(a & b)
    return 2 * inter / (len(a) + len(b)), inter / len(a | b)


def paired_t_scipy(a, b):
    r = stats.ttest_rel(a, b)
    return float(r.statistic), float(r.pvalue)
