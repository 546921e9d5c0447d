"""Point-cloud and image metrics: Chamfer, PSNR, SSIM and depth error statistics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from .errors import DimensionMismatch, EmptyCloud


@dataclass
class ChamferReport:
    accuracy: float
    completeness: float
    chamfer: float


def _as_points(cloud):
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyCloud("point cloud is empty")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud has non-finite coordinates")
    return pts


def nearest_distances(src, dst):
    """Distance from every point of ``src`` to its nearest neighbour in ``dst``."""
    d, _ = cKDTree(dst).query(src, k=1)
    return d


def chamfer(recon, reference, cap=None) -> ChamferReport:
    """Accuracy (recon to reference), completeness (reverse) and their mean."""
    a = _as_points(recon)
    b = _as_points(reference)
    d_acc = nearest_distances(a, b)
    d_comp = nearest_distances(b, a)
    if cap is not None:
        d_acc = np.minimum(d_acc, cap)
        d_comp = np.minimum(d_comp, cap)
    acc, comp = float(d_acc.mean()), float(d_comp.mean())
    return ChamferReport(acc, comp, 0.5 * (acc + comp))


def _check_shapes(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, mask=None) -> float:
    """``10 log10(1 / MSE)`` over (masked) pixels; identical inputs give ``inf``."""
    a, b = _check_shapes(a, b)
    sq = (a - b) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape[:2]:
            raise DimensionMismatch(f"mask shape {mask.shape} does not match image {a.shape[:2]}")
        sq = sq[mask]
    mse = float(sq.mean())
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def ssim(a, b, window=11, k1=0.01, k2=0.03, sigma=1.5, data_range=1.0) -> float:
    """Gaussian-weighted SSIM averaged over pixels and channels.

    The Gaussian is truncated to ``window`` taps; borders use reflection.
    """
    a, b = _check_shapes(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    truncate = ((window - 1) / 2) / sigma

    def filt(x):
        return gaussian_filter(x, (sigma, sigma, 0), mode="reflect", truncate=truncate)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def depth_error_stats(pred, gt, mask=None, interval=1.0) -> dict:
    """MAE and the fraction of pixels within 1, 2 and 4 intervals, over pixels valid in both maps."""
    p = np.asarray(getattr(pred, "depth", pred), dtype=np.float64)
    g = np.asarray(getattr(gt, "depth", gt), dtype=np.float64)
    if p.shape != g.shape:
        raise DimensionMismatch(f"depth shapes differ: {p.shape} vs {g.shape}")
    sel = (p > 0) & (g > 0)
    if mask is not None:
        if np.shape(mask) != p.shape:
            raise DimensionMismatch("mask shape does not match the depth maps")
        sel &= np.asarray(mask, dtype=bool)
    err = np.abs(p - g)[sel]
    if err.size == 0:
        return {"mae": math.nan, "frac_1": 0.0, "frac_2": 0.0, "frac_4": 0.0, "n": 0}
    out = {"mae": float(err.mean())}
    for k in (1, 2, 4):
        out[f"frac_{k}"] = float(np.mean(err <= k * interval))
    out["n"] = int(err.size)
    return out


def report(chamfer_report=None, psnr_value=None, ssim_value=None, depth=None) -> dict:
    """Assemble the metrics document (missing entries are null)."""
    ch = None
    if chamfer_report is not None:
        ch = {"accuracy": chamfer_report.accuracy, "completeness": chamfer_report.completeness, "mean": chamfer_report.chamfer}
    return {"chamfer": ch, "psnr": psnr_value, "ssim": ssim_value, "depth": depth}


def report_json(rep: dict) -> str:
    """JSON text for a report; an infinite PSNR is written as the string ``"inf"``."""

    def fix(v):
        if isinstance(v, float) and math.isinf(v):
            return "inf"
        if isinstance(v, dict):
            return {k: fix(x) for k, x in v.items()}
        return v

    return json.dumps(fix(rep), indent=2, sort_keys=True)


