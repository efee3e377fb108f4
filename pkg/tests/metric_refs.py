"""Brute-force reference implementations for the metric oracles.

Loops over voxels on purpose: these are slow and obvious, and share no code
with the vectorized versions under test.
"""

import math

import mpmath
import numpy as np


def dsc_ref(g, p):
    inter = size_g = size_p = 0
    for a, b in zip(np.ravel(g), np.ravel(p)):
        size_g += bool(a)
        size_p += bool(b)
        inter += bool(a) and bool(b)
    return 1.0 if size_g + size_p == 0 else 2 * inter / (size_g + size_p)


def jaccard_ref(g, p):
    inter = union = 0
    for a, b in zip(np.ravel(g), np.ravel(p)):
        inter += bool(a) and bool(b)
        union += bool(a) or bool(b)
    return 1.0 if union == 0 else inter / union


def mse_ref(x, y):
    return math.fsum((float(a) - float(b)) ** 2 for a, b in zip(np.ravel(x), np.ravel(y))) / np.size(x)


def rmsd_ref(x, y):
    return math.sqrt(mse_ref(x, y))


def psnr_ref(x, y):
    mse = mse_ref(x, y)
    peak = max(float(v) for v in np.ravel(y))
    return 100.0 if mse == 0 else min(100.0, 10 * math.log10(peak * peak / mse))


def ncc_ref(x, y):
    xs = [float(v) for v in np.ravel(x)]
    ys = [float(v) for v in np.ravel(y)]
    mx, my = math.fsum(xs) / len(xs), math.fsum(ys) / len(ys)
    num = math.fsum((a - mx) * (b - my) for a, b in zip(xs, ys))
    den = math.sqrt(math.fsum((a - mx) ** 2 for a in xs) * math.fsum((b - my) ** 2 for b in ys))
    return num / den


def ssim_slice_ref(x, y, size=11, sigma=1.5, data_range=1.0):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    w2 = np.outer(g, g)
    w2 /= w2.sum()
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    h, w = x.shape
    vals = []
    for i in range(h - size + 1):
        for j in range(w - size + 1):
            a = x[i : i + size, j : j + size].astype(np.float64)
            b = y[i : i + size, j : j + size].astype(np.float64)
            ma, mb = np.sum(w2 * a), np.sum(w2 * b)
            va = np.sum(w2 * (a - ma) ** 2)
            vb = np.sum(w2 * (b - mb) ** 2)
            cov = np.sum(w2 * (a - ma) * (b - mb))
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def ssim_ref(x, y):
    if x.ndim == 2:
        return ssim_slice_ref(x, y)
    return float(np.mean([ssim_slice_ref(a, b) for a, b in zip(x, y)]))


def paired_p_ref(a, b):
    """Two-sided p from numerically integrating the Student t density."""
    mpmath.mp.dps = 40
    d = [mpmath.mpf(float(u)) - mpmath.mpf(float(v)) for u, v in zip(a, b)]
    n = len(d)
    mean = mpmath.fsum(d) / n
    sd = mpmath.sqrt(mpmath.fsum((x - mean) ** 2 for x in d) / (n - 1))
    t = abs(mean / (sd / mpmath.sqrt(n)))
    nu = n - 1
    c = mpmath.gamma((nu + 1) / 2) / (mpmath.sqrt(nu * mpmath.pi) * mpmath.gamma(nu / 2))
    tail = mpmath.quad(lambda s: c * (1 + s * s / nu) ** (-(nu + 1) / 2), [t, mpmath.inf])
    return float(2 * tail)
