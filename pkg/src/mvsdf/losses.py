"""Supervision terms for grid optimization.

Each loss returns its value together with the partial derivatives on the
quantities it consumes (weights, colors, depths); turning those into grid
gradients is :func:`mvsdf.sdfrender.backward`'s job.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import Camera
from .errors import InvalidQ
from .mvs import ProbabilityVolume
from .sdfrender import VoxelSdfGrid, eikonal

W_MIN = 1e-6
SUPERVISION_MASS = 1e-3


def volume_lookup(pv: ProbabilityVolume, cam: Camera, X):
    """Probability of the 3D points ``X (P, 3)`` under one view's volume.

    Bilinear across pixels, linear along each pixel's hypothesis axis, zero
    outside the hypothesis range, off-image, behind the camera or on pixels
    flagged as unsupervised. ``cam`` must match the volume's resolution.
    """
    X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
    h, w, D = pv.prob.shape
    uv, z = cam.project_points(X)
    u, v = uv[:, 0], uv[:, 1]
    ok = (z > 0) & (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    u = np.where(ok, u, 0.0)
    v = np.where(ok, v, 0.0)
    u0 = np.minimum(np.floor(u).astype(np.intp), w - 2)
    v0 = np.minimum(np.floor(v).astype(np.intp), h - 2)
    fu, fv = u - u0, v - v0
    prob = pv.prob.reshape(-1)
    hyp = pv.hypotheses
    out = np.zeros(len(X))
    for du, dv, wt in ((0, 0, (1 - fu) * (1 - fv)), (1, 0, fu * (1 - fv)), (0, 1, (1 - fu) * fv), (1, 1, fu * fv)):
        pix = (v0 + dv) * w + (u0 + du)
        if hyp.is_global:
            lo, hi = hyp.values[0], hyp.values[-1]
        else:
            flat = hyp.values.reshape(-1, D)
            lo, hi = flat[pix, 0], flat[pix, -1]
        step = (hi - lo) / (D - 1)
        g = (z - lo) / np.where(step > 0, step, 1.0)
        inside = (z >= lo) & (z <= hi)
        k = np.clip(np.floor(g).astype(np.intp), 0, D - 2)
        f = np.clip(g - k, 0.0, 1.0)
        i = pix * D + k
        val = (1 - f) * prob[i] + f * prob[i + 1]
        out += wt * np.where(inside & pv.valid.reshape(-1)[pix], val, 0.0)
    return np.where(ok, out, 0.0)


def soft_consistency(ref_pv, src_pvs, ref_cam, src_cams, X, use_sources=True):
    """``P'(x) = P_ref(x) * sum_j P_src^j(x)`` for points ``X (P, 3)``.

    With ``use_sources=False`` the source factor is dropped and ``P_ref`` is
    returned unchanged.
    """
    p_ref = volume_lookup(ref_pv, ref_cam, X)
    if not use_sources:
        return p_ref
    total = np.zeros_like(p_ref)
    for pv, cam in zip(src_pvs, src_cams):
        total += volume_lookup(pv, cam, X)
    return p_ref * total


def soft_consistency_at(ref_pv, src_pvs, ref_cam, src_cams, point, ref_pixel=None) -> float:
    """Scalar form of :func:`soft_consistency` for a point on ``ref_pixel``'s ray."""
    return float(soft_consistency(ref_pv, src_pvs, ref_cam, src_cams, np.asarray(point)[None])[0])


@dataclass
class ConsistencyWeightedSamples:
    pprime: np.ndarray  # (R, N)

    @property
    def mass(self):
        return self.pprime.sum(axis=-1)

    @property
    def is_supervised(self):
        return self.mass >= SUPERVISION_MASS


def gce_weight_loss(w, pprime, q=0.5, normalize=1.0):
    """Generalized cross entropy on rendering weights, weighted by ``P'``.

    Returns ``(sum (1 - w^q) / q * P' / normalize, dL/dw)``. Weights are
    clamped to ``[1e-6, 1]``; the clamp passes gradient through unchanged.
    """
    if not (0.0 < q <= 1.0):
        raise InvalidQ(f"q must lie in (0, 1], got {q}")
    if isinstance(pprime, ConsistencyWeightedSamples):
        pprime = pprime.pprime
    wc = np.clip(np.asarray(w, dtype=np.float64), W_MIN, 1.0)
    wq = wc**q
    loss = float(np.sum((1.0 - wq) / q * pprime)) / normalize
    grad = -(wq / wc) * pprime / normalize
    return loss, grad


def blur_image(image, sigma_px=4.0):
    """Per-channel Gaussian blur with reflected borders (constants are preserved)."""
    image = np.asarray(image, dtype=np.float64)
    sig = (sigma_px, sigma_px) + (0,) * (image.ndim - 2)
    return gaussian_filter(image, sig, mode="reflect")


def photometric_loss(rendered, target):
    """Mean L1 over rays and channels and its gradient on ``rendered``."""
    rendered = np.asarray(rendered, dtype=np.float64)
    diff = rendered - np.asarray(target, dtype=np.float64)
    n = diff.size
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


def sparsity_loss(depths, epsilon=1e-3, normalize=None):
    """Mean of ``1 / (d + eps)`` over the given (unsupervised) ray depths."""
    d = np.asarray(depths, dtype=np.float64)
    if d.size == 0:
        return 0.0, np.zeros_like(d)
    n = d.size if normalize is None else normalize
    inv = 1.0 / (d + epsilon)
    return float(inv.sum() / n), -(inv**2) / n


def depth_mse(rendered, target):
    """Mean squared depth error and its gradient; empty input gives zero."""
    r = np.asarray(rendered, dtype=np.float64)
    if r.size == 0:
        return 0.0, np.zeros_like(r)
    diff = r - np.asarray(target, dtype=np.float64)
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def eikonal_loss(grid: VoxelSdfGrid, n_points=1024, rng=None, points=None):
    """Eikonal penalty at uniform points in the grid bounds; returns ``(loss, dL/dsdf)``."""
    if points is None:
        if n_points < 1:
            raise ValueError("n_points must be >= 1")
        rng = np.random.default_rng() if rng is None else rng
        points = grid.lo + rng.random((n_points, 3)) * (grid.hi - grid.lo)
    return eikonal(grid, points)
