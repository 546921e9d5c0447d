"""Analytic SDF scenes used as synthetic ground truth.

Scenes are unions of spheres and boxes carrying a procedural 3D texture.
They render to calibrated color/depth images by sphere tracing and provide
surface point clouds for Chamfer evaluation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import Camera, Ray, bilinear_sample_many, look_at
from .errors import InvalidConfig


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    def sdf(self, X):
        return np.linalg.norm(X - np.asarray(self.center), axis=-1) - self.radius

    def aabb(self):
        c = np.asarray(self.center, dtype=np.float64)
        return c - self.radius, c + self.radius


@dataclass(frozen=True)
class Box:
    center: tuple
    half_extents: tuple

    def sdf(self, X):
        q = np.abs(X - np.asarray(self.center)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def aabb(self):
        c = np.asarray(self.center, dtype=np.float64)
        h = np.asarray(self.half_extents, dtype=np.float64)
        return c - h, c + h


@dataclass(frozen=True)
class Texture:
    """Procedural 3D color: multi-octave value noise or a checkerboard.

    ``frequency`` is in cycles per scene diameter.
    """

    kind: str = "noise"
    frequency: float = 8.0
    color_a: tuple = (0.92, 0.75, 0.35)
    color_b: tuple = (0.10, 0.18, 0.45)
    octaves: int = 3
    seed: int = 0
    contrast: float = 2.5

    def __post_init__(self):
        if self.kind not in ("noise", "checker"):
            raise InvalidConfig(f"unknown texture kind {self.kind!r}", "texture.kind")

    def _lattice(self):
        rng = np.random.default_rng(self.seed)
        return rng.random((64, 64, 64))

    def scalar(self, X, diameter):
        X = np.asarray(X, dtype=np.float64)
        scale = self.frequency / diameter
        if self.kind == "checker":
            idx = np.floor(X * scale).astype(np.int64)
            return (idx.sum(axis=-1) % 2).astype(np.float64)
        table = self._lattice()
        total = np.zeros(X.shape[:-1])
        norm = 0.0
        amp = 1.0
        for octave in range(self.octaves):
            P = X * scale * (2**octave) + 17.0 * octave
            total += amp * _value_noise(table, P)
            norm += amp
            amp *= 0.6
        return np.clip(0.5 + self.contrast * (total / norm - 0.5), 0.0, 1.0)

    def color(self, X, diameter):
        s = self.scalar(X, diameter)[..., None]
        a = np.asarray(self.color_a)
        b = np.asarray(self.color_b)
        return a + (b - a) * s


def _value_noise(table, P):
    n = table.shape[0]
    i0 = np.floor(P).astype(np.int64)
    f = P - i0
    f = f * f * (3 - 2 * f)
    out = np.zeros(P.shape[:-1])
    for dx in (0, 1):
        wx = f[..., 0] if dx else 1 - f[..., 0]
        for dy in (0, 1):
            wy = f[..., 1] if dy else 1 - f[..., 1]
            for dz in (0, 1):
                wz = f[..., 2] if dz else 1 - f[..., 2]
                v = table[(i0[..., 0] + dx) % n, (i0[..., 1] + dy) % n, (i0[..., 2] + dz) % n]
                out += wx * wy * wz * v
    return out


@dataclass(frozen=True)
class AnalyticScene:
    primitives: tuple
    bounds: tuple  # (min xyz, max xyz)
    texture: Texture = field(default_factory=Texture)

    def __post_init__(self):
        if not self.primitives:
            raise InvalidConfig("scene needs at least one primitive", "primitives")
        lo, hi = (np.asarray(b, dtype=np.float64) for b in self.bounds)
        for i, p in enumerate(self.primitives):
            plo, phi = p.aabb()
            if np.any(plo <= lo) or np.any(phi >= hi):
                raise InvalidConfig("primitive leaves the scene bounds", f"primitives[{i}]")

    @property
    def lo(self):
        return np.asarray(self.bounds[0], dtype=np.float64)

    @property
    def hi(self):
        return np.asarray(self.bounds[1], dtype=np.float64)

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)

    def sdf(self, X):
        X = np.asarray(X, dtype=np.float64)
        return np.min([p.sdf(X) for p in self.primitives], axis=0)

    def normal(self, X, eps=None):
        eps = 1e-5 * self.diameter if eps is None else eps
        X = np.asarray(X, dtype=np.float64)
        g = np.stack(
            [self.sdf(X + e) - self.sdf(X - e) for e in np.eye(3) * eps],
            axis=-1,
        )
        return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)

    def color(self, X):
        return self.texture.color(X, self.diameter)


def sdf_eval(scene: AnalyticScene, point) -> float:
    return float(scene.sdf(np.asarray(point, dtype=np.float64)))


def ray_box(origins, dirs, lo, hi):
    """Slab test; returns (t_enter, t_exit) with t_enter clamped at 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / np.where(dirs == 0, 1e-30, dirs)
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.minimum(t0, t1).max(axis=-1)
    tmax = np.maximum(t0, t1).min(axis=-1)
    return np.maximum(tmin, 0.0), tmax


def trace_many(scene: AnalyticScene, origins, dirs, tol=None, max_iter=256):
    """Vectorized sphere tracing. Returns ray parameter ``t`` (NaN on miss)."""
    tol = 1e-5 * scene.diameter if tol is None else tol
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape)
    t_in, t_out = ray_box(origins, dirs, scene.lo, scene.hi)
    t = t_in.copy()
    active = t_in < t_out
    hit = np.zeros(t.shape, dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        X = origins[idx] + t[idx, None] * dirs[idx]
        s = scene.sdf(X)
        done = np.abs(s) < tol
        hit[idx[done]] = True
        t[idx] += np.where(done, 0.0, s)
        left = t[idx] > t_out[idx]
        active[idx[done | left]] = False
    return np.where(hit, t, np.nan)


def sphere_trace(scene: AnalyticScene, ray: Ray, tol=None, max_iter=256):
    """Z-depth of the first surface hit along ``ray`` (in its camera), or None."""
    t = trace_many(scene, ray.origin[None], ray.direction[None], tol, max_iter)[0]
    if np.isnan(t):
        return None
    return float(t * ray.depth_scale)


def render_ground_truth(scene: AnalyticScene, camera: Camera, light_dir, ambient=0.15):
    """Sphere-traced Lambertian color image ``(H, W, 3)`` and z-depth ``(H, W)``."""
    dirs, zscale = camera.pixel_directions(camera.pixel_grid())
    dirs = dirs.reshape(-1, 3)
    t = trace_many(scene, camera.center, dirs)
    hit = ~np.isnan(t)
    color = np.zeros((dirs.shape[0], 3))
    depth = np.zeros(dirs.shape[0])
    if hit.any():
        X = camera.center + t[hit, None] * dirs[hit]
        n = scene.normal(X)
        light = np.asarray(light_dir, dtype=np.float64)
        light = light / np.linalg.norm(light)
        shade = ambient + (1 - ambient) * np.maximum(n @ light, 0.0)
        color[hit] = np.clip(scene.color(X) * shade[:, None], 0.0, 1.0)
        depth[hit] = t[hit] * zscale.reshape(-1)[hit]
    return color.reshape(camera.height, camera.width, 3), depth.reshape(camera.height, camera.width)


def sample_surface(scene: AnalyticScene, n: int, rng=None, tol=None) -> np.ndarray:
    """``n`` points on the zero level set via shell rejection and Newton projection."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng)
    tol = 1e-4 * scene.diameter if tol is None else tol
    band = 0.05 * scene.diameter
    out = []
    have = 0
    while have < n:
        X = rng.uniform(scene.lo, scene.hi, size=(max(4 * n, 1024), 3))
        X = X[np.abs(scene.sdf(X)) < band]
        s = scene.sdf(X)
        todo = np.flatnonzero(np.abs(s) >= tol)
        for _ in range(30):
            if todo.size == 0:
                break
            X[todo] -= s[todo, None] * scene.normal(X[todo])
            s[todo] = scene.sdf(X[todo])
            todo = todo[np.abs(s[todo]) >= tol]
        X = X[np.abs(s) < tol]
        out.append(X)
        have += len(X)
    return np.concatenate(out)[:n]


def visible_points(points, cameras, depths, min_views=2, rel_tol=0.01):
    """Mask of points seen unoccluded (per the ground-truth depth maps) by ``min_views`` cameras.

    Depth is read bilinearly and only where all four neighbours hit the surface.
    """
    count = np.zeros(len(points), dtype=np.int64)
    for cam, depth in zip(cameras, depths):
        uv, z = cam.project_points(points)
        d, inside = bilinear_sample_many(depth, uv)
        full, _ = bilinear_sample_many((depth > 0).astype(np.float64), uv)
        ok = inside & (full > 1 - 1e-9) & (z > 0) & (np.abs(d - z) < rel_tol * z)
        count += ok
    return count >= min_views


def arc_cameras(n, radius, center, fov_deg, width, height, arc_deg=60.0, elevation_deg=0.0):
    """Cameras evenly spaced on a horizontal arc, all looking at ``center``.

    World +y is up; the arc is centered on the -z side of ``center``.
    """
    if n < 2:
        raise ValueError("need at least two cameras")
    center = np.asarray(center, dtype=np.float64)
    fx = (width / 2.0) / np.tan(np.radians(fov_deg) / 2.0)
    el = np.radians(elevation_deg)
    cams = []
    for theta in np.radians(np.linspace(-arc_deg / 2.0, arc_deg / 2.0, n)):
        offset = radius * np.array([np.sin(theta) * np.cos(el), np.sin(el), -np.cos(theta) * np.cos(el)])
        cams.append(
            look_at(center + offset, center, (0.0, 1.0, 0.0), fx, fx, (width - 1) / 2.0, (height - 1) / 2.0, width, height)
        )
    return cams


# --- scene description files -------------------------------------------------


@dataclass
class SceneSpec:
    """Scene file contents: geometry plus the capture rig."""

    scene: AnalyticScene
    light_dir: np.ndarray
    n_views: int = 3
    cam_radius: float = 2.8
    fov_deg: float = 45.0
    arc_deg: float = 60.0
    elevation_deg: float = 15.0
    width: int = 128
    height: int = 96
    depth_range: tuple = (1.0, 5.0)

    def cameras(self, n_views=None, width=None, height=None):
        return arc_cameras(
            n_views or self.n_views,
            self.cam_radius,
            self.scene.center,
            self.fov_deg,
            width or self.width,
            height or self.height,
            self.arc_deg,
            self.elevation_deg,
        )


def _vec(d, key, path, n=3):
    try:
        v = tuple(float(x) for x in d[key])
    except KeyError:
        raise InvalidConfig("missing field", f"{path}.{key}") from None
    except (TypeError, ValueError):
        raise InvalidConfig("expected a list of numbers", f"{path}.{key}") from None
    if len(v) != n:
        raise InvalidConfig(f"expected {n} values", f"{path}.{key}")
    return v


def scene_from_dict(d: dict) -> SceneSpec:
    prims = []
    for i, p in enumerate(d.get("primitives", [])):
        path = f"primitives[{i}]"
        kind = p.get("type")
        if kind == "sphere":
            if "radius" not in p:
                raise InvalidConfig("missing field", f"{path}.radius")
            prims.append(Sphere(_vec(p, "center", path), float(p["radius"])))
        elif kind == "box":
            prims.append(Box(_vec(p, "center", path), _vec(p, "half_extents", path)))
        else:
            raise InvalidConfig(f"unknown primitive type {kind!r}", f"{path}.type")
    if "bounds" not in d:
        raise InvalidConfig("missing field", "bounds")
    bounds = (_vec(d["bounds"], "min", "bounds"), _vec(d["bounds"], "max", "bounds"))
    tex = d.get("texture", {})
    texture = Texture(
        kind=tex.get("kind", "noise"),
        frequency=float(tex.get("frequency", 8.0)),
        color_a=tuple(tex.get("color_a", Texture.color_a)),
        color_b=tuple(tex.get("color_b", Texture.color_b)),
        octaves=int(tex.get("octaves", 3)),
        seed=int(tex.get("seed", 0)),
        contrast=float(tex.get("contrast", 2.5)),
    )
    scene = AnalyticScene(tuple(prims), bounds, texture)
    rig = d.get("cameras", {})
    light = np.asarray(d.get("light_dir", [0.3, 0.6, -1.0]), dtype=np.float64)
    return SceneSpec(
        scene=scene,
        light_dir=light / np.linalg.norm(light),
        n_views=int(rig.get("n", 3)),
        cam_radius=float(rig.get("radius", 2.8)),
        fov_deg=float(rig.get("fov_deg", 45.0)),
        arc_deg=float(rig.get("arc_deg", 60.0)),
        elevation_deg=float(rig.get("elevation_deg", 15.0)),
        width=int(rig.get("width", 128)),
        height=int(rig.get("height", 96)),
        depth_range=tuple(float(x) for x in d.get("depth_range", (1.0, 5.0))),
    )


def scene_to_dict(spec: SceneSpec) -> dict:
    prims = []
    for p in spec.scene.primitives:
        if isinstance(p, Sphere):
            prims.append({"type": "sphere", "center": list(p.center), "radius": p.radius})
        else:
            prims.append({"type": "box", "center": list(p.center), "half_extents": list(p.half_extents)})
    t = spec.scene.texture
    return {
        "primitives": prims,
        "bounds": {"min": list(spec.scene.bounds[0]), "max": list(spec.scene.bounds[1])},
        "texture": {
            "kind": t.kind,
            "frequency": t.frequency,
            "color_a": list(t.color_a),
            "color_b": list(t.color_b),
            "octaves": t.octaves,
            "seed": t.seed,
            "contrast": t.contrast,
        },
        "light_dir": [float(x) for x in spec.light_dir],
        "cameras": {
            "n": spec.n_views,
            "radius": spec.cam_radius,
            "fov_deg": spec.fov_deg,
            "arc_deg": spec.arc_deg,
            "elevation_deg": spec.elevation_deg,
            "width": spec.width,
            "height": spec.height,
        },
        "depth_range": list(spec.depth_range),
    }


def load_scene(path) -> SceneSpec:
    with open(path) as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as e:
            raise InvalidConfig(f"invalid JSON: {e}") from None
    return scene_from_dict(d)


def builtin_suite() -> list[SceneSpec]:
    """Three textured 3-view test scenes: sphere+box, two spheres, slab+sphere."""
    bounds = ((-1.2, -1.2, -1.2), (1.2, 1.2, 1.2))
    scenes = [
        {
            "primitives": [
                {"type": "sphere", "center": [-0.25, 0.0, 0.0], "radius": 0.6},
                {"type": "box", "center": [0.55, 0.2, 0.3], "half_extents": [0.35, 0.45, 0.35]},
            ],
            "texture": {"seed": 1},
        },
        {
            "primitives": [
                {"type": "sphere", "center": [-0.4, -0.15, 0.1], "radius": 0.55},
                {"type": "sphere", "center": [0.45, 0.25, -0.1], "radius": 0.45},
            ],
            "texture": {"seed": 2, "color_a": [0.85, 0.85, 0.8], "color_b": [0.45, 0.1, 0.05]},
        },
        {
            "primitives": [
                {"type": "box", "center": [0.0, -0.3, 0.0], "half_extents": [0.7, 0.3, 0.5]},
                {"type": "sphere", "center": [0.1, 0.35, -0.05], "radius": 0.4},
            ],
            "texture": {"seed": 3, "color_a": [0.2, 0.7, 0.3], "color_b": [0.95, 0.9, 0.6]},
        },
    ]
    out = []
    for d in scenes:
        d["bounds"] = {"min": list(bounds[0]), "max": list(bounds[1])}
        out.append(scene_from_dict(d))
    return out


@dataclass
class SyntheticViews:
    images: list
    depths: list
    cameras: list
    gt_points: np.ndarray

    @property
    def masks(self):
        return [d > 0 for d in self.depths]


def capture(spec: SceneSpec, n_views=None, width=None, height=None, n_points=200000, seed=0) -> SyntheticViews:
    """Render the rig and sample the ground-truth cloud (points seen by >= 2 views)."""
    cams = spec.cameras(n_views, width, height)
    rendered = [render_ground_truth(spec.scene, c, spec.light_dir) for c in cams]
    images = [r[0] for r in rendered]
    depths = [r[1] for r in rendered]
    rng = np.random.default_rng(seed)
    kept, have = [], 0
    for _ in range(20):
        pts = sample_surface(spec.scene, 2 * n_points, rng)
        pts = pts[visible_points(pts, cams, depths)]
        kept.append(pts)
        have += len(pts)
        if have >= n_points:
            break
    return SyntheticViews(images, depths, cams, np.concatenate(kept)[:n_points])
