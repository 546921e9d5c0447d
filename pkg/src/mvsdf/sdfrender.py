"""Dense voxel SDF grid with Laplace-density volume rendering.

The grid stores a signed distance (negative inside) and an RGB color per
vertex. Density follows the Laplace CDF transform of the negated distance,
rendering weights follow the usual transmittance quadrature, and every
quantity is differentiated by hand in :func:`backward`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Camera, Ray
from .mvs import DepthMap

_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])


@dataclass
class VoxelSdfGrid:
    lo: np.ndarray
    hi: np.ndarray
    sdf: np.ndarray  # (nx, ny, nz)
    color: np.ndarray  # (nx, ny, nz, 3)
    log_beta: float
    beta_min: float = 0.0

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if self.beta_min <= 0:
            self.beta_min = 1e-4 * self.diameter

    @property
    def resolution(self) -> tuple:
        return self.sdf.shape

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / (np.asarray(self.sdf.shape) - 1)

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))

    @property
    def beta(self) -> float:
        return max(float(np.exp(self.log_beta)), self.beta_min)

    @property
    def alpha(self) -> float:
        return 1.0 / self.beta

    def vertices(self) -> np.ndarray:
        axes = [np.linspace(self.lo[i], self.hi[i], n) for i, n in enumerate(self.sdf.shape)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def copy(self) -> "VoxelSdfGrid":
        return VoxelSdfGrid(self.lo.copy(), self.hi.copy(), self.sdf.copy(), self.color.copy(), self.log_beta, self.beta_min)

    def query(self, X):
        """Trilinear sdf and raw color at points ``(..., 3)``; see :func:`sample_grid`."""
        tri = trilinear(self, X)
        return tri.sdf(self), tri.color(self)


def init_sphere(resolution, bounds, init_radius) -> VoxelSdfGrid:
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    if np.isscalar(resolution):
        resolution = (int(resolution),) * 3
    if init_radius >= 0.5 * (hi - lo).min():
        raise ValueError("init_radius must be below half the smallest bound extent")
    grid = VoxelSdfGrid(lo, hi, np.zeros(resolution), np.full(tuple(resolution) + (3,), 0.5), 0.0)
    grid.sdf = np.linalg.norm(grid.vertices() - 0.5 * (lo + hi), axis=-1) - init_radius
    grid.log_beta = float(np.log(0.1 * grid.diameter))
    return grid


@dataclass
class Trilinear:
    """Interpolation stencil kept for the backward pass."""

    index: np.ndarray  # (P, 8) flat vertex indices
    weight: np.ndarray  # (P, 8)
    frac: np.ndarray  # (P, 3) position inside the cell
    spacing: np.ndarray
    inside: np.ndarray  # (P,)
    outside_sdf: np.ndarray  # (P,) forced value for points outside the bounds

    @property
    def dweight(self):
        """``d weight / d position`` in world units, ``(P, 8, 3)``."""
        f = self.frac
        w_axis = np.where(_CORNERS[None] == 1, f[:, None, :], 1.0 - f[:, None, :])
        dw_axis = np.where(_CORNERS[None] == 1, 1.0, -1.0) / self.spacing
        return np.stack(
            [
                dw_axis[..., 0] * w_axis[..., 1] * w_axis[..., 2],
                w_axis[..., 0] * dw_axis[..., 1] * w_axis[..., 2],
                w_axis[..., 0] * w_axis[..., 1] * dw_axis[..., 2],
            ],
            axis=-1,
        )

    def sdf(self, grid):
        vals = np.einsum("pk,pk->p", grid.sdf.reshape(-1)[self.index], self.weight)
        return np.where(self.inside, vals, self.outside_sdf)

    def color(self, grid):
        vals = np.einsum("pkc,pk->pc", grid.color.reshape(-1, 3)[self.index], self.weight)
        vals[~self.inside] = 0.5
        return vals

    def gradient(self, grid):
        vals = np.einsum("pk,pkc->pc", grid.sdf.reshape(-1)[self.index], self.dweight)
        return np.where(self.inside[:, None], vals, 0.0)


def trilinear(grid: VoxelSdfGrid, X) -> Trilinear:
    X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
    res = np.asarray(grid.sdf.shape)
    h = grid.spacing
    g = (X - grid.lo) / h
    inside = np.all((X >= grid.lo) & (X <= grid.hi), axis=-1)
    i0 = np.clip(np.floor(g).astype(np.int64), 0, res - 2)
    f = np.clip(g - i0, 0.0, 1.0)
    base = (i0[:, 0] * res[1] + i0[:, 1]) * res[2] + i0[:, 2]
    offs = (_CORNERS[:, 0] * res[1] + _CORNERS[:, 1]) * res[2] + _CORNERS[:, 2]
    index = base[:, None] + offs[None]
    wx = np.stack([1.0 - f[:, 0], f[:, 0]], axis=-1)
    wy = np.stack([1.0 - f[:, 1], f[:, 1]], axis=-1)
    wz = np.stack([1.0 - f[:, 2], f[:, 2]], axis=-1)
    weight = (wx[:, :, None, None] * wy[:, None, :, None] * wz[:, None, None, :]).reshape(-1, 8)
    if inside.all():
        outside = np.ones(len(X))
    else:
        outside = np.linalg.norm(np.maximum(np.maximum(grid.lo - X, X - grid.hi), 0.0), axis=-1) + 1.0
    return Trilinear(index, weight, f, h, inside, outside)


def sample_grid(grid: VoxelSdfGrid, point):
    """Trilinear ``(sdf, color)`` at one point.

    Outside the bounds the sdf is the distance to the box plus one and the
    color is mid-gray; such points do not touch any grid parameter.
    """
    s, c = grid.query(np.asarray(point, dtype=np.float64)[None])
    return float(s[0]), c[0]


def laplace_density(s, beta):
    """Density from the Laplace CDF in the inside-positive variable ``s``.

    ``s <= 0``: ``alpha / 2 * exp(s / beta)``; ``s > 0``:
    ``alpha * (1 - exp(-s / beta) / 2)`` with ``alpha = 1 / beta``.
    """
    if np.any(np.asarray(beta) <= 0):
        raise ValueError("beta must be positive")
    s = np.asarray(s, dtype=np.float64)
    alpha = 1.0 / beta
    e = np.exp(-np.abs(s) / beta)
    return alpha * np.where(s <= 0, 0.5 * e, 1.0 - 0.5 * e)


def sdf_density(sdf, beta):
    """Density for a signed distance that is negative inside the surface."""
    return laplace_density(-np.asarray(sdf, dtype=np.float64), beta)


def _density_grads(sdf, beta):
    """d sigma / d sdf and d sigma / d beta for ``sigma = sdf_density(sdf, beta)``."""
    s = -sdf
    e = np.exp(-np.abs(s) / beta)
    sigma = np.where(s <= 0, 0.5 * e, 1.0 - 0.5 * e) / beta
    dsig_ds = 0.5 * e / beta**2
    # sigma = Psi(s / beta) / beta, so d/dbeta = -sigma / beta - Psi'(s / beta) * s / beta**3
    dsig_dbeta = -sigma / beta - 0.5 * e * np.abs(s) / beta**3 * np.sign(s)
    return sigma, -dsig_ds, dsig_dbeta


def weights_from_density(sigma, delta):
    """Rendering weights, per-sample transmittance and residual transmittance."""
    tau = sigma * delta
    acc = np.cumsum(tau, axis=-1)
    T = np.exp(-(acc - tau))
    w = T * -np.expm1(-tau)
    return w, T, np.exp(-acc[..., -1])


@dataclass
class RaySampleBatch:
    t: np.ndarray  # (R, N)
    delta: np.ndarray
    sdf: np.ndarray
    sigma: np.ndarray
    T: np.ndarray
    w: np.ndarray
    T_res: np.ndarray  # (R,)
    raw_color: np.ndarray  # (R, N, 3) before clamping
    color: np.ndarray  # (R, 3)
    depth: np.ndarray  # (R,) sum_i w_i t_i in ray units
    t_far: np.ndarray
    depth_scale: np.ndarray  # z-depth per unit t
    beta: float
    tri: Trilinear = field(repr=False)

    @property
    def sample_colors(self):
        return np.clip(self.raw_color, 0.0, 1.0)

    @property
    def opacity(self):
        return 1.0 - self.T_res

    def z_depth(self):
        """Opacity-normalized expected z-depth (0 where nothing was hit)."""
        acc = self.w.sum(axis=-1)
        return np.where(acc > 1e-9, self.depth / np.maximum(acc, 1e-9), 0.0) * self.depth_scale


def ray_bounds(grid: VoxelSdfGrid, origins, dirs):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / np.where(dirs == 0, 1e-30, dirs)
        t0 = (grid.lo - origins) * inv
        t1 = (grid.hi - origins) * inv
    t_near = np.maximum(np.minimum(t0, t1).max(axis=-1), 1e-6)
    t_far = np.maximum(t0, t1).min(axis=-1)
    return t_near, t_far


def sample_offsets(n_rays, n_samples, rng=None):
    """Stratum offsets in [0, 1); deterministic midpoints unless ``rng`` is given."""
    if rng is None:
        return np.full((n_rays, n_samples), 0.5)
    return rng.random((n_rays, n_samples))


def ray_samples(t_near, t_far, n_samples, offsets=None):
    """Stratified sample positions and intervals; empty rays get zero-length intervals."""
    t_near = np.asarray(t_near, dtype=np.float64)
    t_far = np.maximum(np.asarray(t_far, dtype=np.float64), t_near)
    if offsets is None:
        offsets = sample_offsets(len(t_near), n_samples)
    step = (t_far - t_near)[:, None] / n_samples
    t = t_near[:, None] + (np.arange(n_samples)[None] + offsets) * step
    delta = np.empty_like(t)
    delta[:, :-1] = np.diff(t, axis=-1)
    delta[:, -1] = t_far - t[:, -1]
    return t, delta


def render_rays(grid: VoxelSdfGrid, origins, dirs, n_samples=96, depth_scale=None, offsets=None) -> RaySampleBatch:
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape)
    t_near, t_far = ray_bounds(grid, origins, dirs)
    t, delta = ray_samples(t_near, t_far, n_samples, offsets)
    return render_samples(grid, origins, dirs, t, delta, t_far, depth_scale)


def render_samples(grid, origins, dirs, t, delta, t_far, depth_scale=None) -> RaySampleBatch:
    R, N = t.shape
    X = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    tri = trilinear(grid, X.reshape(-1, 3))
    sdf = tri.sdf(grid).reshape(R, N)
    raw = tri.color(grid).reshape(R, N, 3)
    beta = grid.beta
    sigma = sdf_density(sdf, beta)
    w, T, T_res = weights_from_density(sigma, delta)
    color = (w[..., None] * np.clip(raw, 0.0, 1.0)).sum(axis=1)
    depth = (w * t).sum(axis=1)
    if depth_scale is None:
        depth_scale = np.ones(R)
    return RaySampleBatch(t, delta, sdf, sigma, T, w, T_res, raw, color, depth, t_far, np.asarray(depth_scale), beta, tri)


def render_ray(grid: VoxelSdfGrid, ray: Ray, n_samples=96, offsets=None) -> RaySampleBatch:
    """Render a single ray between its own ``t_near``/``t_far``."""
    if n_samples < 8:
        raise ValueError("n_samples must be >= 8")
    t, delta = ray_samples(np.array([ray.t_near]), np.array([ray.t_far]), n_samples, offsets)
    return render_samples(grid, ray.origin[None], ray.direction[None], t, delta, np.array([ray.t_far]), np.array([ray.depth_scale]))


@dataclass
class GridGradients:
    sdf: np.ndarray
    color: np.ndarray
    beta: float

    def __iadd__(self, other):
        self.sdf += other.sdf
        self.color += other.color
        self.beta += other.beta
        return self

    @classmethod
    def zeros_like(cls, grid):
        return cls(np.zeros_like(grid.sdf), np.zeros_like(grid.color), 0.0)


def backward(grid: VoxelSdfGrid, batch: RaySampleBatch, d_w=None, d_color=None, d_depth=None, d_tres=None) -> GridGradients:
    """Reverse-mode gradients of a scalar loss given its partials on the batch outputs.

    ``d_w`` is ``(R, N)``, ``d_color`` ``(R, 3)``, ``d_depth`` and ``d_tres``
    ``(R,)``; any may be None.
    """
    R, N = batch.w.shape
    G = np.zeros((R, N)) if d_w is None else np.array(d_w, dtype=np.float64)
    colors = batch.sample_colors
    grad_color = np.zeros((R, N, 3))
    if d_color is not None:
        G += (colors * d_color[:, None, :]).sum(axis=-1)
        unclamped = (batch.raw_color >= 0.0) & (batch.raw_color <= 1.0)
        grad_color = batch.w[..., None] * d_color[:, None, :] * unclamped
    if d_depth is not None:
        G += batch.t * d_depth[:, None]
    # w_i = T_i (1 - exp(-tau_i)): dw_i/dtau_k = -w_i (k < i), T_{i+1} (k = i)
    T_next = batch.T * np.exp(-batch.sigma * batch.delta)
    Gw = G * batch.w
    later = np.cumsum(Gw[:, ::-1], axis=1)[:, ::-1] - Gw
    d_tau = G * T_next - later
    if d_tres is not None:
        d_tau -= (d_tres * batch.T_res)[:, None]
    d_sigma = d_tau * batch.delta
    _, dsig_dsdf, dsig_dbeta = _density_grads(batch.sdf, batch.beta)
    d_sdf = (d_sigma * dsig_dsdf).reshape(-1)
    d_beta = float((d_sigma * dsig_dbeta).sum())

    tri = batch.tri
    n_vert = grid.sdf.size
    wts = tri.weight * tri.inside[:, None]
    idx = tri.index.reshape(-1)
    g_sdf = np.bincount(idx, (wts * d_sdf[:, None]).reshape(-1), n_vert)
    gc = grad_color.reshape(-1, 3)
    idx3 = (idx[:, None] * 3 + np.arange(3)).reshape(-1)
    g_col = np.bincount(idx3, (wts[..., None] * gc[:, None, :]).reshape(-1), 3 * n_vert)
    return GridGradients(g_sdf.reshape(grid.sdf.shape), g_col.reshape(grid.color.shape), d_beta)


def camera_rays(camera: Camera, uv=None):
    """Origins, unit directions and z-per-t scale for the given (or all) pixels."""
    if uv is None:
        uv = camera.pixel_grid().reshape(-1, 2)
    dirs, scale = camera.pixel_directions(uv)
    return np.broadcast_to(camera.center, dirs.shape), dirs, scale


def render_view(grid: VoxelSdfGrid, camera: Camera, n_samples=96, chunk=4096):
    """Render color ``(H, W, 3)``, opacity-normalized z-depth and opacity."""
    origins, dirs, scale = camera_rays(camera)
    cols, depths, ops = [], [], []
    for s in range(0, len(dirs), chunk):
        b = render_rays(grid, origins[s : s + chunk], dirs[s : s + chunk], n_samples, scale[s : s + chunk])
        cols.append(b.color)
        depths.append(b.z_depth())
        ops.append(b.opacity)
    shape = camera.shape
    return (
        np.concatenate(cols).reshape(shape + (3,)),
        np.concatenate(depths).reshape(shape),
        np.concatenate(ops).reshape(shape),
    )


def render_depth_map(grid: VoxelSdfGrid, camera: Camera, n_samples=96, min_opacity=0.5) -> DepthMap:
    """Expected z-depth with opacity as confidence; pixels below ``min_opacity`` are invalid."""
    _, depth, opacity = render_view(grid, camera, n_samples)
    valid = (opacity >= min_opacity) & (depth > 0)
    return DepthMap(np.where(valid, depth, 0.0), np.clip(opacity, 0.0, 1.0))


def eikonal(grid: VoxelSdfGrid, points):
    """Mean ``(|grad s| - 1)^2`` over ``points`` and its gradient on the sdf values."""
    tri = trilinear(grid, points)
    g = tri.gradient(grid)
    norm = np.linalg.norm(g, axis=-1)
    resid = norm - 1.0
    n = len(points)
    loss = float(np.mean(resid**2))
    d_g = (2.0 * resid / n / np.maximum(norm, 1e-12))[:, None] * g
    d_corner = (tri.dweight * d_g[:, None, :]).sum(axis=-1) * tri.inside[:, None]
    g_sdf = np.bincount(tri.index.reshape(-1), d_corner.reshape(-1), grid.sdf.size).reshape(grid.sdf.shape)
    return loss, g_sdf
