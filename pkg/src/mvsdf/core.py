"""Pinhole cameras, rays, plane homographies and image sampling.

Conventions
-----------
* ``R``, ``t`` map world to camera: ``X_cam = R @ X_world + t``.
* Integer pixel coordinates address pixel centers; ``image[v, u]``.
* Images are numpy arrays of shape ``(H, W)`` or ``(H, W, C)``; colors are
  in [0, 1] and depth images use 0 for "no depth".
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DepthNonPositive, InvalidRange, OutOfBounds

_MIN_Z = 1e-9


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 8 or self.height < 8:
            raise ValueError("image must be at least 8x8")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or np.linalg.det(R) < 0:
            raise ValueError("rotation must be orthonormal with det +1")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def axis(self) -> np.ndarray:
        """Optical axis (camera +z) in world coordinates."""
        return self.R[2].copy()

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    # vectorized helpers; these never raise and leave validity to the caller

    def to_camera(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.R.T + self.t

    def project_points(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project world points ``(..., 3)``; returns ``uv (..., 2)`` and z-depth."""
        Xc = self.to_camera(X)
        z = Xc[..., 2]
        safe = np.where(np.abs(z) > _MIN_Z, z, _MIN_Z)
        u = self.fx * Xc[..., 0] / safe + self.cx
        v = self.fy * Xc[..., 1] / safe + self.cy
        return np.stack([u, v], axis=-1), z

    def backproject_points(self, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64)
        depth = np.asarray(depth, dtype=np.float64)
        x = (uv[..., 0] - self.cx) / self.fx * depth
        y = (uv[..., 1] - self.cy) / self.fy * depth
        Xc = np.stack([x, y, depth], axis=-1)
        return (Xc - self.t) @ self.R

    def pixel_directions(self, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Unit world-space ray directions through ``uv`` and the z-depth per unit length."""
        uv = np.asarray(uv, dtype=np.float64)
        d_cam = np.stack(
            [(uv[..., 0] - self.cx) / self.fx, (uv[..., 1] - self.cy) / self.fy, np.ones(uv.shape[:-1])],
            axis=-1,
        )
        norm = np.linalg.norm(d_cam, axis=-1)
        d_cam = d_cam / norm[..., None]
        return d_cam @ self.R, 1.0 / norm

    def pixel_grid(self) -> np.ndarray:
        """``(H, W, 2)`` array of pixel-center coordinates."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        return np.stack([u, v], axis=-1)

    def scaled(self, factor: int) -> "Camera":
        """Camera for an image box-downsampled by an integer ``factor``."""
        if factor == 1:
            return self
        off = (factor - 1) / 2.0
        return Camera(
            self.fx / factor,
            self.fy / factor,
            (self.cx - off) / factor,
            (self.cy - off) / factor,
            self.R,
            self.t,
            self.width // factor,
            self.height // factor,
        )

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "R": [float(x) for x in self.R.reshape(-1)],
            "t": [float(x) for x in self.t],
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            float(d["fx"]),
            float(d["fy"]),
            float(d["cx"]),
            float(d["cy"]),
            np.asarray(d["R"], dtype=np.float64).reshape(3, 3),
            np.asarray(d["t"], dtype=np.float64),
            int(d["width"]),
            int(d["height"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Camera":
        return cls.from_dict(json.loads(text))


def look_at(eye, target, up, fx, fy, cx, cy, width, height) -> Camera:
    """Camera at ``eye`` whose optical axis passes through ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return Camera(fx, fy, cx, cy, R, -R @ eye, width, height)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float
    # z-depth in the generating camera per unit of t
    depth_scale: float = field(default=1.0)

    def __post_init__(self):
        if not (0 < self.t_near < self.t_far):
            raise InvalidRange(f"need 0 < t_near < t_far, got {self.t_near}, {self.t_far}")

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


def project(camera: Camera, point) -> tuple[np.ndarray, float]:
    point = np.asarray(point, dtype=np.float64)
    if not np.all(np.isfinite(point)):
        raise ValueError("point must be finite")
    z = float(camera.to_camera(point)[2])
    if z <= _MIN_Z:
        raise DepthNonPositive(f"camera-frame depth {z} is not positive")
    uv, _ = camera.project_points(point)
    return uv, z


def backproject(camera: Camera, pixel, depth: float) -> np.ndarray:
    if depth <= 0:
        raise DepthNonPositive(f"depth {depth} is not positive")
    return camera.backproject_points(np.asarray(pixel, dtype=np.float64), depth)


def pixel_ray(camera: Camera, pixel, t_near: float, t_far: float) -> Ray:
    if t_near >= t_far:
        raise InvalidRange(f"t_near {t_near} >= t_far {t_far}")
    d, scale = camera.pixel_directions(np.asarray(pixel, dtype=np.float64))
    return Ray(camera.center, d, float(t_near), float(t_far), float(scale))


def homography_parts(ref: Camera, src: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Split the plane-induced homography as ``H(d) = A + B / d``."""
    R_rel = src.R @ ref.R.T
    t_rel = src.t - R_rel @ ref.t
    A = src.K @ R_rel @ ref.K_inv
    B = src.K @ np.outer(t_rel, [0.0, 0.0, 1.0]) @ ref.K_inv
    return A, B


def plane_homography(ref: Camera, src: Camera, depth: float) -> np.ndarray:
    """Map reference pixels on the fronto-parallel plane ``z_ref = depth`` into ``src``."""
    if depth <= 0:
        raise DepthNonPositive(f"depth {depth} is not positive")
    A, B = homography_parts(ref, src)
    return A + B / depth


def apply_homography(H: np.ndarray, uv: np.ndarray) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64)
    p = uv @ H[:, :2].T + H[:, 2]
    return p[..., :2] / p[..., 2:3]


def bilinear_sample_many(image: np.ndarray, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized bilinear lookup.

    Returns ``(values, inside)``; out-of-footprint samples read as 0 and have
    ``inside`` False.
    """
    img = np.asarray(image)
    h, w = img.shape[:2]
    u = uv[..., 0]
    v = uv[..., 1]
    inside = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    uc = np.clip(np.where(inside, u, 0.0), 0, w - 1)
    vc = np.clip(np.where(inside, v, 0.0), 0, h - 1)
    u0 = np.minimum(np.floor(uc).astype(np.intp), max(w - 2, 0))
    v0 = np.minimum(np.floor(vc).astype(np.intp), max(h - 2, 0))
    fu = uc - u0
    fv = vc - v0
    if img.ndim == 3:
        fu = fu[..., None]
        fv = fv[..., None]
    top = img[v0, u0] * (1 - fu) + img[v0, u0 + 1] * fu
    bot = img[v0 + 1, u0] * (1 - fu) + img[v0 + 1, u0 + 1] * fu
    out = top * (1 - fv) + bot * fv
    mask = inside[..., None] if img.ndim == 3 else inside
    return np.where(mask, out, 0.0), inside


def bilinear_sample(image: np.ndarray, pixel):
    """Bilinear lookup at one pixel position; raises ``OutOfBounds`` off-image."""
    vals, inside = bilinear_sample_many(image, np.asarray(pixel, dtype=np.float64))
    if not bool(inside):
        raise OutOfBounds(f"sample {pixel} leaves the {image.shape[1]}x{image.shape[0]} image")
    return vals


def to_gray(image: np.ndarray) -> np.ndarray:
    if image.ndim == 2:
        return image.astype(np.float64)
    return image[..., :3] @ np.array([0.299, 0.587, 0.114])


def downsample(image: np.ndarray, factor: int) -> np.ndarray:
    """Box-average downsampling by an integer factor (matches ``Camera.scaled``)."""
    if factor == 1:
        return np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    hh, ww = h // factor, w // factor
    img = np.asarray(image, dtype=np.float64)[: hh * factor, : ww * factor]
    img = img.reshape(hh, factor, ww, factor, *img.shape[2:])
    return img.mean(axis=(1, 3))
