"""Overlap, intensity and significance metrics.

All functions are pure and accept plain arrays. Intensity metrics expect
volumes in [0, 1]; region metrics are computed over the full masked array, so
voxels zeroed by :func:`mask_region` still count towards ``n``.
"""

from __future__ import annotations

import math
import warnings

import numpy as np
from scipy import special

from .data import TUMOR_LABELS

PSNR_CAP_DB = 100.0
REGIONS = ("whole_brain", "whole_tumor")


class DegenerateTestWarning(RuntimeWarning):
    pass


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x, y = np.asarray(x), np.asarray(y)
    if x.shape != y.shape:
        raise ValueError(f"extent mismatch: {x.shape} vs {y.shape}")
    return x, y


def _masks(gt, pt) -> tuple[np.ndarray, np.ndarray]:
    gt, pt = _pair(gt, pt)
    return gt.astype(bool), pt.astype(bool)


# overlap -------------------------------------------------------------------

def dsc(gt, pt) -> float:
    """2|GT & PT| / (|GT| + |PT|); 1 when both masks are empty."""
    g, p = _masks(gt, pt)
    denom = int(g.sum()) + int(p.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(g, p).sum()) / denom


def jaccard(gt, pt) -> float:
    """|GT & PT| / |GT | PT|; 1 when both masks are empty."""
    g, p = _masks(gt, pt)
    union = int(np.logical_or(g, p).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(g, p).sum()) / union


# intensity -----------------------------------------------------------------

def _sq_err(x, y) -> tuple[float, int]:
    x, y = _pair(x, y)
    if x.size == 0:
        raise ValueError("metric undefined on an empty array")
    d = x.astype(np.float64) - y.astype(np.float64)
    return float(np.sum(d * d)), x.size


def nmse(x, y) -> float:
    """(1/n) sum (x - y)^2, with no further normalization."""
    s, n = _sq_err(x, y)
    return s / n


def rmsd(x, y) -> float:
    s, n = _sq_err(x, y)
    return math.sqrt(s / n)


def psnr(x, y, max_i: float | None = None) -> float:
    """10 log10(max_i^2 / MSE) in dB, capped at 100 dB when MSE is 0.

    ``max_i`` defaults to the maximum of the reference ``y``.
    """
    mse = nmse(x, y)
    if max_i is None:
        max_i = float(np.max(y))
    if max_i <= 0:
        raise ValueError(f"PSNR needs a positive peak value, got {max_i}")
    if mse == 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(max_i * max_i / mse))


def ncc(x, y) -> float:
    """Pearson correlation of the two voxel sets."""
    x, y = _pair(x, y)
    a = x.astype(np.float64).ravel()
    b = y.astype(np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    na, nb = math.sqrt(float(a @ a)), math.sqrt(float(b @ b))
    if na == 0 or nb == 0:
        raise ValueError("undefined correlation: constant input")
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    w = np.exp(-(r * r) / (2 * sigma * sigma))
    return w / w.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable correlation keeping only fully covered positions."""
    k = len(w)
    rows = sum(w[i] * img[i : img.shape[0] - k + 1 + i] for i in range(k))
    return sum(w[j] * rows[:, j : rows.shape[1] - k + 1 + j] for j in range(k))


def ssim_slice(x, y, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
               data_range: float = 1.0) -> float:
    x, y = _pair(x, y)
    if x.ndim != 2:
        raise ValueError("ssim_slice expects a 2-D slice")
    if min(x.shape) < window:
        raise ValueError(f"SSIM window {window} larger than slice {x.shape}")
    x = x.astype(np.float64)
    y = y.astype(np.float64)
    w = gaussian_window(window, sigma)
    mx, my = _filter_valid(x, w), _filter_valid(y, w)
    vx = _filter_valid(x * x, w) - mx * mx
    vy = _filter_valid(y * y, w) - my * my
    cxy = _filter_valid(x * y, w) - mx * my
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())


def ssim(x, y, **kw) -> float:
    """Mean of per-slice SSIM over the leading axis (a 2-D input is one slice)."""
    x, y = _pair(x, y)
    if x.ndim == 2:
        return ssim_slice(x, y, **kw)
    if x.ndim != 3:
        raise ValueError("ssim expects a 2-D slice or a 3-D volume")
    return float(np.mean([ssim_slice(a, b, **kw) for a, b in zip(x, y)]))


# regions -------------------------------------------------------------------

def region_mask(seg_labels, region: str) -> np.ndarray:
    labels = np.asarray(seg_labels)
    if region == "whole_brain":
        return labels != 0
    if region == "whole_tumor":
        return np.isin(labels, TUMOR_LABELS)
    raise ValueError(f"unknown region {region!r}; expected one of {REGIONS}")


def mask_region(vol, seg_labels, region: str) -> np.ndarray:
    """Zero every voxel outside ``region`` of the ground-truth labels."""
    vol, labels = _pair(vol, seg_labels)
    return np.where(region_mask(labels, region), vol, np.zeros_like(vol))


# significance ----------------------------------------------------------------

def paired_ttest(a, b) -> float:
    """Two-sided paired t-test p-value on the per-patient differences.

    All-zero differences give p = 1. Constant non-zero differences have no
    variance; a :class:`DegenerateTestWarning` is emitted and p = 0 returned.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired_ttest needs two 1-D sequences of equal length")
    n = len(a)
    if n < 2:
        raise ValueError("paired_ttest needs at least two pairs")
    d = a - b
    if np.all(d == 0):
        return 1.0
    sd = float(np.std(d, ddof=1))
    if sd == 0:
        warnings.warn("paired differences have zero variance; p-value is degenerate", DegenerateTestWarning)
        return 0.0
    t = float(np.mean(d)) / (sd / math.sqrt(n))
    dof = n - 1
    # two-sided tail of Student's t via the regularized incomplete beta
    return float(special.betainc(dof / 2.0, 0.5, dof / (dof + t * t)))
