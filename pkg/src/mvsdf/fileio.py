"""Readers and writers for PFM, PLY, PNG, probability volumes, grid checkpoints and cameras."""

from __future__ import annotations

import json
import os
import struct

import numpy as np
from PIL import Image

from .core import Camera
from .errors import CorruptCheckpoint, InvalidConfig
from .mvs import DepthHypotheses, ProbabilityVolume
from .sdfrender import VoxelSdfGrid

PVOL_MAGIC = b"PVOL1"
SDFG_MAGIC = b"SDFG1"


def _write(path, data: bytes):
    with open(path, "wb") as f:
        f.write(data)


# --- PFM (single channel, little-endian, top row first in memory) ---


def write_pfm(path, depth):
    d = np.asarray(depth, dtype="<f4")
    h, w = d.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    _write(path, header + np.flipud(d).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = (int(x) for x in f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        chans = 3 if kind == b"PF" else 1
        data = np.frombuffer(f.read(), dtype=dtype, count=w * h * chans)
    shape = (h, w, 3) if chans == 3 else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float32)


# --- PLY (binary little-endian) ---


def write_ply(path, points, colors=None):
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    props = ["property float x", "property float y", "property float z"]
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if colors is not None:
        props += ["property uchar red", "property uchar green", "property uchar blue"]
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    rec = np.empty(len(pts), dtype=fields)
    rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    if colors is not None:
        c = to_uint8(colors).reshape(-1, 3)
        rec["red"], rec["green"], rec["blue"] = c[:, 0], c[:, 1], c[:, 2]
    header = "\n".join(["ply", "format binary_little_endian 1.0", f"element vertex {len(pts)}", *props, "end_header"]) + "\n"
    _write(path, header.encode("ascii") + rec.tobytes())


_PLY_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "uchar": "u1", "uint8": "u1", "int": "<i4", "uint": "<u4"}


def read_ply(path):
    """Return ``(points (N, 3) float32, colors (N, 3) uint8 or None)``."""
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        n = 0
        fields = []
        while True:
            line = f.readline()
            if not line:
                raise ValueError(f"{path}: truncated PLY header")
            tok = line.decode("ascii").split()
            if not tok:
                continue
            if tok[0] == "format" and tok[1] != "binary_little_endian":
                raise ValueError(f"{path}: only binary little-endian PLY is supported")
            if tok[0] == "element" and tok[1] == "vertex":
                n = int(tok[2])
            elif tok[0] == "property":
                fields.append((tok[2], _PLY_TYPES[tok[1]]))
            elif tok[0] == "end_header":
                break
        rec = np.frombuffer(f.read(), dtype=fields, count=n)
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=-1).astype(np.float32)
    cols = None
    if "red" in rec.dtype.names:
        cols = np.stack([rec["red"], rec["green"], rec["blue"]], axis=-1)
    return pts, cols


# --- PNG ---


def to_uint8(image):
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image):
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


# --- probability volumes ---


def write_pvol(path, pv: ProbabilityVolume):
    h, w, D = pv.prob.shape
    hyp = np.asarray(pv.hypotheses.values, dtype="<f4").reshape(-1)
    data = PVOL_MAGIC + struct.pack("<3I", w, h, D) + hyp.tobytes() + np.asarray(pv.prob, dtype="<f4").tobytes()
    _write(path, data)


def read_pvol(path) -> ProbabilityVolume:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:5] != PVOL_MAGIC or len(raw) < 17:
        raise CorruptCheckpoint(f"{path}: bad PVOL header")
    w, h, D = struct.unpack("<3I", raw[5:17])
    body = len(raw) - 17
    n_prob = 4 * w * h * D
    if body == 4 * D + n_prob:
        hyp_shape = (D,)
    elif body == 4 * w * h * D + n_prob:
        hyp_shape = (h, w, D)
    else:
        raise CorruptCheckpoint(f"{path}: size {len(raw)} does not match {w}x{h}x{D}")
    n_hyp = int(np.prod(hyp_shape))
    hyp = np.frombuffer(raw, "<f4", n_hyp, 17).reshape(hyp_shape).astype(np.float64)
    prob = np.frombuffer(raw, "<f4", w * h * D, 17 + 4 * n_hyp).reshape(h, w, D).astype(np.float64)
    flat = hyp if hyp.ndim == 1 else hyp.reshape(-1, D)
    interval = float(np.mean(np.diff(flat, axis=-1))) if D > 1 else 0.0
    return ProbabilityVolume(prob, DepthHypotheses(hyp, interval))


# --- grid checkpoints (x slowest, z fastest) ---


def write_sdfg(path, grid: VoxelSdfGrid):
    nx, ny, nz = grid.sdf.shape
    head = SDFG_MAGIC + struct.pack("<3I", nx, ny, nz) + struct.pack("<7d", *grid.lo, *grid.hi, grid.beta)
    body = np.asarray(grid.sdf, dtype="<f4").tobytes() + np.asarray(grid.color, dtype="<f4").tobytes()
    _write(path, head + body)


def read_sdfg(path) -> VoxelSdfGrid:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:5] != SDFG_MAGIC or len(raw) < 73:
        raise CorruptCheckpoint(f"{path}: bad SDFG magic")
    nx, ny, nz = struct.unpack("<3I", raw[5:17])
    vals = struct.unpack("<7d", raw[17:73])
    n = nx * ny * nz
    if len(raw) != 73 + 16 * n or min(nx, ny, nz) < 2:
        raise CorruptCheckpoint(f"{path}: size {len(raw)} does not match a {nx}x{ny}x{nz} grid")
    if not vals[6] > 0:
        raise CorruptCheckpoint(f"{path}: beta must be positive")
    sdf = np.frombuffer(raw, "<f4", n, 73).reshape(nx, ny, nz).astype(np.float64)
    color = np.frombuffer(raw, "<f4", 3 * n, 73 + 4 * n).reshape(nx, ny, nz, 3).astype(np.float64)
    return VoxelSdfGrid(np.array(vals[:3]), np.array(vals[3:6]), sdf, color, float(np.log(vals[6])))


# --- cameras ---


def write_camera(path, cam: Camera):
    with open(path, "w") as f:
        f.write(cam.to_json() + "\n")


def read_camera(path) -> Camera:
    if not os.path.exists(path):
        raise InvalidConfig("camera file not found", str(path))
    try:
        with open(path) as f:
            return Camera.from_json(f.read())
    except (KeyError, ValueError, TypeError) as e:
        raise InvalidConfig(f"bad camera file: {e}", str(path)) from None
