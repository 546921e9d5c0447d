"""Classical plane-sweep multi-view stereo.

Produces per-view depth probability volumes from windowed NCC matching
costs, winner-takes-all depth maps, cascade (coarse-to-fine) hypothesis
layouts, geometric consistency masks and fused point clouds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Camera, bilinear_sample_many, homography_parts, to_gray
from .errors import NoSourceViews

MAX_COST = 2.0
_VAR_EPS = 1e-12


@dataclass
class DepthHypotheses:
    """Ordered depth samples: a global ``(D,)`` list or a per-pixel ``(H, W, D)`` array."""

    values: np.ndarray
    interval: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    @property
    def count(self) -> int:
        return self.values.shape[-1]

    @property
    def is_global(self) -> bool:
        return self.values.ndim == 1

    def per_pixel(self, height, width) -> np.ndarray:
        if self.is_global:
            return np.broadcast_to(self.values, (height, width, self.count))
        return self.values

    @classmethod
    def uniform(cls, d_min, d_max, count) -> "DepthHypotheses":
        return cls(np.linspace(d_min, d_max, count), (d_max - d_min) / (count - 1))


@dataclass
class ProbabilityVolume:
    """Per-pixel probability over depth hypotheses.

    ``valid`` marks pixels that carry matching evidence; unsupervised pixels
    hold the uniform distribution.
    """

    prob: np.ndarray  # (H, W, D)
    hypotheses: DepthHypotheses
    valid: np.ndarray | None = None

    def __post_init__(self):
        if self.valid is None:
            self.valid = np.ones(self.prob.shape[:2], dtype=bool)

    @property
    def height(self):
        return self.prob.shape[0]

    @property
    def width(self):
        return self.prob.shape[1]

    @property
    def depths(self) -> np.ndarray:
        return self.hypotheses.per_pixel(self.height, self.width)


@dataclass
class DepthMap:
    depth: np.ndarray  # (H, W), 0 = invalid
    confidence: np.ndarray  # (H, W) in [0, 1]

    @property
    def valid(self):
        return self.depth > 0


def _window_offsets(window):
    r = window // 2
    dv, du = np.mgrid[-r : r + 1, -r : r + 1]
    return np.stack([du.ravel(), dv.ravel()], axis=-1).astype(np.float64)


def _zero_mean(patches):
    mean = patches.mean(axis=-1, keepdims=True)
    centered = patches - mean
    var = (centered**2).mean(axis=-1)
    return centered, var


def matching_cost(ref_image, src_images, ref_cam: Camera, src_cams, hyps: DepthHypotheses, window=5):
    """Plane-sweep cost volume ``(H, W, D)`` of mean ``1 - NCC`` over source views.

    Returns ``(cost, supervised)``. A source whose warped window never lands
    inside its image (over the whole sweep) is excluded for that pixel; a
    source that is inside for some hypotheses scores ``MAX_COST`` where it
    leaves the image, so the mean never switches source sets along the
    sweep. Pixels with no usable source get ``MAX_COST`` everywhere.
    ``supervised`` is False for those pixels and for texture-less reference
    patches.
    """
    if len(src_images) == 0:
        raise NoSourceViews("matching needs at least one source view")
    if window % 2 != 1:
        raise ValueError("window must be odd")
    h, w = ref_cam.height, ref_cam.width
    ref = to_gray(ref_image)
    # windows are clamped to the image; the same clamped pixels are warped
    q = ref_cam.pixel_grid()[:, :, None, :] + _window_offsets(window)[None, None]
    q[..., 0] = np.clip(q[..., 0], 0, w - 1)
    q[..., 1] = np.clip(q[..., 1], 0, h - 1)
    ref_patches = ref[q[..., 1].astype(np.intp), q[..., 0].astype(np.intp)]
    ref_c, ref_var = _zero_mean(ref_patches)
    ref_flat = ref_var >= _VAR_EPS
    q_h = np.concatenate([q, np.ones(q.shape[:-1] + (1,))], axis=-1)
    depths = hyps.per_pixel(h, w)
    D = hyps.count

    cost_sum = np.zeros((h, w, D))
    n_used = np.zeros((h, w), dtype=np.int64)
    for src_img, src_cam in zip(src_images, src_cams):
        src = to_gray(src_img)
        A, B = homography_parts(ref_cam, src_cam)
        Aq = q_h @ A.T
        b = B[:, 2]  # B @ [u, v, 1] is constant: the plane normal picks the third coordinate
        src_cost = np.full((h, w, D), MAX_COST)
        for k in range(D):
            d = depths[..., k][..., None, None]
            hom = Aq + b / d
            z = hom[..., 2]
            uv = hom[..., :2] / np.where(z > 1e-9, z, 1e-9)[..., None]
            vals, inside = bilinear_sample_many(src, uv)
            ok = inside.all(axis=-1) & (z > 1e-9).all(axis=-1)
            src_c, src_var = _zero_mean(vals)
            denom = np.sqrt(ref_var * src_var)
            informative = (ref_var >= _VAR_EPS) & (src_var >= _VAR_EPS)
            ncc = np.where(informative, (ref_c * src_c).mean(axis=-1) / np.where(informative, denom, 1.0), 0.0)
            src_cost[..., k] = np.where(ok, 1.0 - ncc, MAX_COST)
        # a source that never lands inside the image is dropped for that pixel;
        # one that leaves it for some hypotheses scores MAX_COST there
        seen = (src_cost < MAX_COST).any(axis=-1)
        cost_sum += np.where(seen[..., None], src_cost, 0.0)
        n_used += seen
    cost = np.where(n_used[..., None] > 0, cost_sum / np.maximum(n_used, 1)[..., None], MAX_COST)
    supervised = (n_used > 0) & ref_flat
    return cost, supervised


def cost_to_probability(cost, hyps: DepthHypotheses, temperature=0.05, supervised=None) -> ProbabilityVolume:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = -np.asarray(cost, dtype=np.float64) / temperature
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=-1, keepdims=True)
    if supervised is None:
        supervised = np.ones(p.shape[:2], dtype=bool)
    p[~supervised] = 1.0 / p.shape[-1]
    return ProbabilityVolume(p, hyps, np.asarray(supervised, dtype=bool).copy())


def wta_depth(pv: ProbabilityVolume) -> DepthMap:
    """Arg-max depth; ``np.argmax`` returns the first maximum, i.e. the smaller depth on ties."""
    k = np.argmax(pv.prob, axis=-1)
    depth = np.take_along_axis(pv.depths, k[..., None], axis=-1)[..., 0].copy()
    conf = np.take_along_axis(pv.prob, k[..., None], axis=-1)[..., 0].copy()
    depth[~pv.valid] = 0.0
    conf[~pv.valid] = 0.0
    return DepthMap(depth, conf)


def cascade_hypotheses(guide: DepthMap, count, interval, d_range, fraction=0.5) -> DepthHypotheses:
    """Per-pixel hypotheses centered on the guide depth with spacing ``fraction * interval``.

    Pixels without a valid guide fall back to ``count`` samples over ``d_range``.
    """
    spacing = fraction * interval
    h, w = guide.depth.shape
    offsets = (np.arange(count) - (count - 1) / 2.0) * spacing
    vals = guide.depth[..., None] + offsets
    lowest = vals[..., 0]
    shift = np.where(lowest <= 0, 1e-6 - lowest, 0.0)
    vals = vals + shift[..., None]
    fallback = np.linspace(d_range[0], d_range[1], count)
    vals = np.where(guide.valid[..., None], vals, fallback)
    return DepthHypotheses(vals, spacing)


def upsample_depth(dm: DepthMap, height, width) -> DepthMap:
    """Resize a depth map; bilinear where all four neighbours are valid, nearest elsewhere."""
    h, w = dm.depth.shape
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    fy, fx = h / height, w / width
    uv = np.stack([(u + 0.5) * fx - 0.5, (v + 0.5) * fy - 0.5], axis=-1)
    uv[..., 0] = np.clip(uv[..., 0], 0, w - 1)
    uv[..., 1] = np.clip(uv[..., 1], 0, h - 1)
    valid = dm.valid.astype(np.float64)
    d_lin, _ = bilinear_sample_many(dm.depth, uv)
    c_lin, _ = bilinear_sample_many(dm.confidence, uv)
    full, _ = bilinear_sample_many(valid, uv)
    ni = np.clip(np.round(uv[..., 1]).astype(np.intp), 0, h - 1)
    nj = np.clip(np.round(uv[..., 0]).astype(np.intp), 0, w - 1)
    use_lin = full > 1 - 1e-9
    depth = np.where(use_lin, d_lin, dm.depth[ni, nj])
    conf = np.where(use_lin, c_lin, dm.confidence[ni, nj])
    conf = np.where(depth > 0, conf, 0.0)
    return DepthMap(depth, conf)


def _sample_depth(depth, uv):
    """Depth lookup that never mixes in invalid (zero) neighbours.

    Bilinear where all four neighbours are valid, otherwise the nearest
    pixel if that one is valid.
    """
    h, w = depth.shape
    vals, inside = bilinear_sample_many(depth, uv)
    valid, _ = bilinear_sample_many((depth > 0).astype(np.float64), uv)
    ni = np.clip(np.round(np.where(inside, uv[..., 1], 0.0)).astype(np.intp), 0, h - 1)
    nj = np.clip(np.round(np.where(inside, uv[..., 0], 0.0)).astype(np.intp), 0, w - 1)
    near = depth[ni, nj]
    full = valid > 1 - 1e-9
    out = np.where(full, vals, near)
    ok = inside & (out > 0)
    return np.where(ok, out, 0.0), ok


def reprojection_errors(ref_depth, ref_cam: Camera, src_depth, src_cam: Camera):
    """Forward-backward check of the reference depth against one source.

    Returns ``(pixel_error, relative_depth_error, ok)`` per reference pixel.
    """
    grid = ref_cam.pixel_grid()
    valid = ref_depth > 0
    X = ref_cam.backproject_points(grid, np.where(valid, ref_depth, 1.0))
    uv_s, z_s = src_cam.project_points(X)
    d_s, ok = _sample_depth(src_depth, uv_s)
    ok &= valid & (z_s > 0)
    X_back = src_cam.backproject_points(uv_s, np.where(ok, d_s, 1.0))
    uv_r, z_r = ref_cam.project_points(X_back)
    px_err = np.linalg.norm(uv_r - grid, axis=-1)
    rel_err = np.abs(z_r - ref_depth) / np.where(valid, ref_depth, 1.0)
    return np.where(ok, px_err, np.inf), np.where(ok, rel_err, np.inf), ok


def geometric_consistency_mask(ref_depth: DepthMap, src_depths, ref_cam, src_cams, px_tol=1.0, rel_depth_tol=0.01, min_consistent=1):
    if min_consistent < 1:
        raise ValueError("min_consistent must be >= 1")
    count = np.zeros(ref_depth.depth.shape, dtype=np.int64)
    for sd, sc in zip(src_depths, src_cams):
        px, rel, ok = reprojection_errors(ref_depth.depth, ref_cam, sd.depth, sc)
        count += ok & (px < px_tol) & (rel < rel_depth_tol)
    return count >= min_consistent


def fuse_point_cloud(depths, masks, cams, conf_threshold=0.1, merge_radius=None, foreground=None, images=None):
    """Back-project filtered pixels of every view and merge near-duplicates.

    Merging averages points sharing a cell of a ``merge_radius`` lattice, so
    the result does not depend on the order of the views. Returns ``points``
    or ``(points, colors)`` when ``images`` is given.
    """
    if not (len(depths) == len(masks) == len(cams)):
        raise ValueError("depths, masks and cams must have equal length")
    pts, cols = [], []
    for i, (dm, mask, cam) in enumerate(zip(depths, masks, cams)):
        keep = mask & (dm.depth > 0) & (dm.confidence >= conf_threshold)
        if foreground is not None:
            keep &= foreground[i]
        vv, uu = np.nonzero(keep)
        uv = np.stack([uu, vv], axis=-1).astype(np.float64)
        pts.append(cam.backproject_points(uv, dm.depth[vv, uu]))
        if images is not None:
            cols.append(np.asarray(images[i], dtype=np.float64)[vv, uu])
    points = np.concatenate(pts) if pts else np.zeros((0, 3))
    colors = np.concatenate(cols) if cols else np.zeros((0, 3))
    if merge_radius and len(points):
        points, colors = _voxel_merge(points, colors if images is not None else None, merge_radius)
    if images is not None:
        return points, colors
    return points


def _voxel_merge(points, colors, radius):
    keys = np.floor(points / radius).astype(np.int64)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    counts = np.bincount(inv, minlength=len(uniq)).astype(np.float64)
    merged = np.stack([np.bincount(inv, points[:, c], len(uniq)) for c in range(3)], axis=-1) / counts[:, None]
    if colors is None:
        return merged, None
    mc = np.stack([np.bincount(inv, colors[:, c], len(uniq)) for c in range(3)], axis=-1) / counts[:, None]
    return merged, mc


def plane_sweep(view, images, cams, hyps: DepthHypotheses, window=5, temperature=0.05) -> ProbabilityVolume:
    """Probability volume for ``view`` using every other view as a source."""
    srcs = [i for i in range(len(images)) if i != view]
    cost, supervised = matching_cost(
        images[view], [images[i] for i in srcs], cams[view], [cams[i] for i in srcs], hyps, window
    )
    return cost_to_probability(cost, hyps, temperature, supervised)
