"""Novel-view synthesis by depth-validated warping and Laplacian-pyramid merging.

Source pixels are pulled into the target view through the target depth,
blended with a softmax over viewing-direction cosines and merged with the
grid's own rendering wherever no source pixel survives the checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

from .core import Camera, bilinear_sample_many
from .errors import ImageTooSmall
from .mvs import DepthMap, reprojection_errors
from .sdfrender import VoxelSdfGrid, render_view

KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _blur(image):
    out = convolve1d(image, KERNEL, axis=0, mode="reflect")
    return convolve1d(out, KERNEL, axis=1, mode="reflect")


def pyr_down(image):
    return _blur(image)[::2, ::2]


def pyr_up(image, shape):
    """Zero-insert to ``shape`` (the finer level's size) and interpolate.

    The result is divided by the blurred sample mask so that constants are
    reproduced exactly, borders included.
    """
    up = np.zeros(tuple(shape[:2]) + image.shape[2:])
    up[::2, ::2] = image
    mask = np.zeros(tuple(shape[:2]))
    mask[::2, ::2] = 1.0
    norm = _blur(mask)
    return _blur(up) / norm.reshape(norm.shape + (1,) * (up.ndim - 2))


@dataclass
class LaplacianPyramid:
    bands: list  # band-pass images, finest first
    residual: np.ndarray

    @property
    def levels(self) -> int:
        return len(self.bands)


def gaussian_pyramid(image, levels=4):
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if min(h, w) < 2**levels:
        raise ImageTooSmall(f"{w}x{h} image is too small for {levels} pyramid levels")
    out = [image]
    for _ in range(levels):
        out.append(pyr_down(out[-1]))
    return out


def build_pyramid(image, levels=4) -> LaplacianPyramid:
    gauss = gaussian_pyramid(image, levels)
    bands = [g - pyr_up(gauss[k + 1], g.shape) for k, g in enumerate(gauss[:-1])]
    return LaplacianPyramid(bands, gauss[-1])


def collapse_pyramid(pyr: LaplacianPyramid):
    img = pyr.residual
    for band in reversed(pyr.bands):
        img = band + pyr_up(img, band.shape)
    return img


def blend_weights(cosines, temperature=20.0, mask=None):
    """Softmax of ``temperature * cos`` over the last axis, restricted to ``mask``."""
    logits = temperature * np.asarray(cosines, dtype=np.float64)
    if mask is None:
        mask = np.ones(logits.shape, dtype=bool)
    logits = np.where(mask, logits, -np.inf)
    top = logits.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(mask, np.exp(logits - top), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    return np.where(s > 0, e / np.where(s > 0, s, 1.0), 0.0)


def warp_and_blend(target_cam: Camera, target_depth: DepthMap, src_cams, src_images, src_depths, temperature=20.0, px_tol=1.0, rel_tol=0.01):
    """Warp source colors into the target view; returns ``(color, valid)``."""
    h, w = target_cam.shape
    depth = target_depth.depth
    valid_t = depth > 0
    X = target_cam.backproject_points(target_cam.pixel_grid(), np.where(valid_t, depth, 1.0))
    view_t = X - target_cam.center
    view_t /= np.linalg.norm(view_t, axis=-1, keepdims=True)
    cols, cosines, passing = [], [], []
    for cam, img, sd in zip(src_cams, src_images, src_depths):
        px, rel, ok = reprojection_errors(depth, target_cam, getattr(sd, "depth", sd), cam)
        ok &= (px < px_tol) & (rel < rel_tol)
        uv, _ = cam.project_points(X)
        c, _ = bilinear_sample_many(np.asarray(img, dtype=np.float64)[..., :3], uv)
        view_s = X - cam.center
        view_s /= np.linalg.norm(view_s, axis=-1, keepdims=True)
        cols.append(c)
        cosines.append((view_t * view_s).sum(axis=-1))
        passing.append(ok)
    if not cols:
        return np.zeros((h, w, 3)), np.zeros((h, w), dtype=bool)
    wts = blend_weights(np.stack(cosines, -1), temperature, np.stack(passing, -1))
    color = (wts[..., None] * np.stack(cols, -2)).sum(axis=-2)
    valid = np.any(np.stack(passing, -1), axis=-1)
    return color, valid


def composite(warped, rendered, valid, levels=4):
    """Merge two layers per pyramid level using the Gaussian pyramid of ``valid``."""
    pw = build_pyramid(warped, levels)
    pr = build_pyramid(rendered, levels)
    masks = gaussian_pyramid(np.asarray(valid, dtype=np.float64), levels)
    bands = [m[..., None] * a + (1 - m[..., None]) * b for m, a, b in zip(masks, pw.bands, pr.bands)]
    residual = masks[-1][..., None] * pw.residual + (1 - masks[-1][..., None]) * pr.residual
    return collapse_pyramid(LaplacianPyramid(bands, residual))


def synthesize_novel(target_cam: Camera, grid: VoxelSdfGrid, src_cams, src_images, src_depths=None, n_samples=96, temperature=20.0, levels=4, px_tol=1.0, rel_tol=0.01):
    """Image-based rendering of ``target_cam`` with grid-rendered fallback.

    Source depth maps are rendered from ``grid`` when not given. Returns the
    merged color image clipped to [0, 1].
    """
    rendered, depth, opacity = render_view(grid, target_cam, n_samples)
    target_depth = DepthMap(np.where(opacity >= 0.5, depth, 0.0), opacity)
    if src_depths is None:
        src_depths = []
        for cam in src_cams:
            _, d, op = render_view(grid, cam, n_samples)
            src_depths.append(np.where(op >= 0.5, d, 0.0))
    warped, valid = warp_and_blend(target_cam, target_depth, src_cams, src_images, src_depths, temperature, px_tol, rel_tol)
    warped = np.where(valid[..., None], warped, rendered)
    return np.clip(composite(warped, rendered, valid, levels), 0.0, 1.0)
