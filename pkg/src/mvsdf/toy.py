"""One-dimensional ray ensemble for probing noise tolerance of the weight loss.

Each ray crosses a planar surface at a random depth. The per-sample target
distribution mixes a narrow peak at the true depth with a second peak at a
wrong depth carrying a fixed share of the mass, mimicking a false-positive
stereo match. Only the weight loss drives the SDF.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import gce_weight_loss
from .pipeline import OptimizerState, adam_step
from .sdfrender import VoxelSdfGrid, backward, render_rays


@dataclass
class ToyConfig:
    n_rays: int = 16
    n_vert: int = 64
    n_samples: int = 64
    steps: int = 300
    noise: float = 0.3  # mass on the false peak
    lr: float = 0.02
    beta: float = 0.02
    peak_width: float = 0.02
    init_jitter: float = 0.08


def _setup(seed, cfg: ToyConfig):
    rng = np.random.default_rng(seed)
    n = cfg.n_rays
    ny = 2 * n  # two vertex rows per ray so neighbouring rays never share cells
    lo, hi = np.zeros(3), np.array([1.0, ny - 1.0, 1.0])
    x = np.linspace(0.0, 1.0, cfg.n_vert)
    d_true = rng.uniform(0.35, 0.65, n)
    shift = rng.uniform(0.12, 0.25, n)
    d_false = np.where(rng.random(n) < 0.5, d_true - shift, d_true + shift)
    d0 = d_true + rng.uniform(-cfg.init_jitter, cfg.init_jitter, n)
    sdf = np.broadcast_to(np.repeat(d0, 2)[None, :, None] - x[:, None, None], (cfg.n_vert, ny, 2)).copy()
    grid = VoxelSdfGrid(lo, hi, sdf, np.full(sdf.shape + (3,), 0.5), np.log(cfg.beta))
    origins = np.stack([np.full(n, -0.5), 2.0 * np.arange(n), np.zeros(n)], -1)
    dirs = np.tile([1.0, 0.0, 0.0], (n, 1))
    return grid, origins, dirs, d_true, d_false


def toy_trial(seed, q, cfg: ToyConfig | None = None) -> float:
    """Final mean absolute depth error of one toy optimization under ``q``."""
    cfg = cfg or ToyConfig()
    grid, origins, dirs, d_true, d_false = _setup(seed, cfg)
    xs = render_rays(grid, origins, dirs, cfg.n_samples).t - 0.5  # ray parameter to x

    def peak(c):
        p = np.exp(-0.5 * ((xs - c[:, None]) / cfg.peak_width) ** 2)
        return p / p.sum(axis=1, keepdims=True)

    target = (1 - cfg.noise) * peak(d_true) + cfg.noise * peak(d_false)
    state, params = OptimizerState(), {"sdf": grid.sdf}
    for _ in range(cfg.steps):
        b = render_rays(grid, origins, dirs, cfg.n_samples)
        _, d_w = gce_weight_loss(b.w, target, q, normalize=cfg.n_rays)
        adam_step(state, params, {"sdf": backward(grid, b, d_w=d_w).sdf}, {"sdf": cfg.lr})
    b = render_rays(grid, origins, dirs, cfg.n_samples)
    depth = b.depth / np.maximum(b.w.sum(axis=1), 1e-9) - 0.5
    return float(np.mean(np.abs(depth - d_true)))
