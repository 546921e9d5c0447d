"""End-to-end reconstruction: MVS-supervised grid fitting plus guided cascade stereo.

``run_full`` chains stage-1 plane sweep, grid optimization under the
weight loss, rendered-depth guidance for the finer stages, and fusion.
``config.method`` also selects the two baselines: ``"cascade"`` (stereo
only) and ``"grid"`` (grid fitting without MVS, cloud taken from the grid's
own depth maps).
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import losses, mvs
from .core import Camera, downsample
from .errors import DivergenceDetected, EmptyReconstruction, InvalidConfig, NonFiniteGradient
from .sdfrender import (
    VoxelSdfGrid,
    backward,
    camera_rays,
    init_sphere,
    ray_bounds,
    ray_samples,
    render_depth_map,
    render_rays,
)

log = logging.getLogger(__name__)

ABLATIONS = {
    "no-soft-consistency": "use_soft_consistency",
    "no-gce": "use_gce",
    "no-prob-volume": "use_prob_volume",
    "no-weight-loss": "use_weight_loss",
    "no-mvs": "use_mvs",
}
CE_Q = 1e-4
MIN_POINTS = 100

# Faster settings for CPU experiments: a coarser grid, fewer steps, a smaller
# sdf step (Adam on sparse per-vertex gradients overshoots at 0.01) and
# 3x3 windows for the full-resolution stages.
DESK = {
    "steps": 1500,
    "grid_resolution": 48,
    "lr_sdf": 0.003,
    "lr_log_beta": 0.01,
    "stage_windows": (5, 3, 3),
}


@dataclass
class PipelineConfig:
    depth_range: tuple = (1.0, 5.0)
    bounds: tuple = ((-1.2, -1.2, -1.2), (1.2, 1.2, 1.2))
    method: str = "full"  # full | cascade | grid
    seed: int = 0
    # stereo
    stage_counts: tuple = (192, 32, 8)
    stage_scales: tuple = (4, 2, 1)
    stage_windows: tuple = (5, 5, 5)
    interval_ratio: float = 0.5
    guided_fraction: float = 0.5
    cascade_fraction: float = 1.0
    temperature: float = 0.05
    # grid optimization
    grid_resolution: int = 64
    init_radius: float = 0.6
    n_samples: int = 96
    batch_rays: int = 512
    steps: int = 5000
    warmup_steps: int = 200
    blur_sigma: float = 4.0
    q: float = 0.5
    epsilon: float = 1e-3
    lr_sdf: float = 0.01
    lr_color: float = 0.05
    lr_log_beta: float = 0.001
    w_photometric: float = 1.0
    w_weight: float = 1.0
    w_sparsity: float = 1.0
    w_eikonal: float = 0.1
    eikonal_points: int = 1024
    use_soft_consistency: bool = True
    use_gce: bool = True
    use_prob_volume: bool = True
    use_weight_loss: bool = True
    use_mvs: bool = True
    # fusion
    px_tol: float = 1.0
    rel_depth_tol: float = 0.01
    min_consistent: int = 1
    merge_radius: float = 0.01

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.batch_rays < 1:
            raise InvalidConfig("must be >= 1", "batch_rays")
        if not (0.0 < self.q <= 1.0):
            raise InvalidConfig("must lie in (0, 1]", "q")
        counts = list(self.stage_counts)
        if any(c < 2 for c in counts) or any(a <= b for a, b in zip(counts, counts[1:])):
            raise InvalidConfig("stage counts must be >= 2 and strictly decreasing", "stage_counts")
        if not (len(self.stage_counts) == len(self.stage_scales) == len(self.stage_windows)):
            raise InvalidConfig("stage_counts, stage_scales and stage_windows must have equal length", "stage_scales")
        lo, hi = self.depth_range
        if not (0 < lo < hi):
            raise InvalidConfig("need 0 < d_min < d_max", "depth_range")
        if self.method not in ("full", "cascade", "grid"):
            raise InvalidConfig(f"unknown method {self.method!r}", "method")
        if self.steps < 0 or self.warmup_steps < 0:
            raise InvalidConfig("must be >= 0", "steps")

    @property
    def stage1_interval(self) -> float:
        return (self.depth_range[1] - self.depth_range[0]) / (self.stage_counts[0] - 1)

    def stage_interval(self, k) -> float:
        return self.stage1_interval * self.interval_ratio**k

    @property
    def q_effective(self) -> float:
        return self.q if self.use_gce else CE_Q

    @classmethod
    def desk(cls, **overrides) -> "PipelineConfig":
        """Defaults with the ``DESK`` settings applied, then ``overrides``."""
        return cls(**{**DESK, **overrides})

    def ablate(self, *names) -> "PipelineConfig":
        changes = {}
        for n in names:
            if n not in ABLATIONS:
                raise InvalidConfig(f"unknown ablation {n!r}", "ablation")
            changes[ABLATIONS[n]] = False
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        ablation = d.pop("ablation", {}) or {}
        names = {f.name for f in dataclasses.fields(cls)}
        for k in d:
            if k not in names:
                raise InvalidConfig("unknown field", k)
        for k, v in ablation.items():
            if k not in ABLATIONS.values():
                raise InvalidConfig("unknown ablation flag", f"ablation.{k}")
            d[k] = bool(v)
        for k in ("depth_range", "stage_counts", "stage_scales", "stage_windows"):
            if k in d:
                d[k] = tuple(d[k])
        if "bounds" in d:
            d["bounds"] = tuple(tuple(float(x) for x in b) for b in d["bounds"])
        try:
            return cls(**d)
        except TypeError as e:
            raise InvalidConfig(str(e)) from None


@dataclass
class SceneData:
    """Calibrated input views plus optional ground truth for evaluation."""

    images: list
    cameras: list
    masks: list | None = None
    gt_points: np.ndarray | None = None
    gt_depths: list | None = None

    def __post_init__(self):
        if len(self.images) != len(self.cameras):
            raise InvalidConfig("images and cameras differ in count", "cameras")
        if len(self.images) < 2:
            raise InvalidConfig("need at least two views", "images")


# --- optimizer ----------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(state: OptimizerState, params: dict, grads: dict, lrs: dict, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place Adam update of every array in ``params``.

    Raises NonFiniteGradient, leaving params and state untouched, when any
    gradient holds a NaN or infinity.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in {k!r}")
        if np.shape(g) != np.shape(params[k]):
            raise ValueError(f"gradient shape {np.shape(g)} does not match {k!r} {np.shape(params[k])}")
    state.step += 1
    t = state.step
    for k, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        if k not in state.m:
            state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        denom = np.sqrt(v / (1 - beta2**t))
        denom += eps
        params[k] -= (lrs[k] / (1 - beta1**t)) * m / denom
    return params, state


# --- supervision helpers --------------------------------------------------------


def delta_volume(pv: mvs.ProbabilityVolume) -> mvs.ProbabilityVolume:
    """Replace every distribution by a one-hot at its arg-max hypothesis."""
    k = np.argmax(pv.prob, axis=-1)
    prob = np.zeros_like(pv.prob)
    np.put_along_axis(prob, k[..., None], 1.0, axis=-1)
    return mvs.ProbabilityVolume(prob, pv.hypotheses, pv.valid.copy())


def depth_mse_supervision(rendered, target):
    """MSE between rendered ray depths and filtered stereo depths (ablation path)."""
    return losses.depth_mse(rendered, target)


def filtered_depths(depth_maps, cams, config: PipelineConfig):
    out = []
    for v, dm in enumerate(depth_maps):
        others = [i for i in range(len(depth_maps)) if i != v]
        mask = mvs.geometric_consistency_mask(
            dm, [depth_maps[i] for i in others], cams[v], [cams[i] for i in others],
            config.px_tol, config.rel_depth_tol, config.min_consistent,
        )
        out.append(np.where(mask, dm.depth, 0.0))
    return out


@dataclass
class _Supervision:
    pvs: list  # stage-1 volumes (possibly delta-ized)
    cams: list  # cameras matching the volume resolution
    mse_targets: list | None = None  # filtered stage-1 depth maps for the MSE ablation
    scale: int = 1


def pixel_pprime(grid, config, sup: _Supervision, origins, dirs, per_view, chunk=2048):
    """Consistency-weighted probability at every ray sample of every input pixel.

    Sample positions depend only on the pixel (deterministic strata), so the
    weights are computed once up front. Returns ``(n_pixels, n_samples)``.
    """
    t_near, t_far = ray_bounds(grid, origins, dirs)
    t, _ = ray_samples(t_near, t_far, config.n_samples)
    out = np.zeros(t.shape)
    n_views = len(sup.pvs)
    for v in range(n_views):
        others = [j for j in range(n_views) if j != v]
        for s in range(v * per_view, (v + 1) * per_view, chunk):
            e = min(s + chunk, (v + 1) * per_view)
            X = origins[s:e, None, :] + t[s:e, :, None] * dirs[s:e, None, :]
            out[s:e] = losses.soft_consistency(
                sup.pvs[v], [sup.pvs[j] for j in others], sup.cams[v], [sup.cams[j] for j in others],
                X.reshape(-1, 3), config.use_soft_consistency,
            ).reshape(e - s, -1)
    return out


# --- optimization ---------------------------------------------------------------


def optimize_grid(config: PipelineConfig, data: SceneData, volumes=None, log_records=None) -> VoxelSdfGrid:
    """Fit a voxel SDF grid to the input views, supervised by stage-1 volumes.

    ``volumes`` are the stage-1 ProbabilityVolumes (one per view); they may
    be omitted when ``config.use_mvs`` is False. Per-step losses are appended
    to ``log_records`` when a list is given.
    """
    rng = np.random.default_rng(config.seed)
    lo, hi = (np.asarray(b, dtype=np.float64) for b in config.bounds)
    grid = init_sphere(config.grid_resolution, (lo, hi), config.init_radius)
    cams = data.cameras
    images = [np.asarray(im, dtype=np.float64)[..., :3] for im in data.images]
    blurred = [losses.blur_image(im, config.blur_sigma) for im in images]
    h, w = images[0].shape[:2]
    n_views = len(images)

    sup = None
    if config.use_mvs:
        if volumes is None or len(volumes) != n_views:
            raise InvalidConfig("need one stage-1 probability volume per view", "volumes")
        scale = config.stage_scales[0]
        pvs = list(volumes) if config.use_prob_volume else [delta_volume(p) for p in volumes]
        scams = [c.scaled(scale) for c in cams]
        targets = None
        if not config.use_weight_loss:
            targets = filtered_depths([mvs.wta_depth(p) for p in volumes], scams, config)
        sup = _Supervision(pvs, scams, targets, scale)

    # fixed per-pixel ray geometry
    ray_d = np.concatenate([camera_rays(c)[1] for c in cams])
    ray_s = np.concatenate([camera_rays(c)[2] for c in cams])
    centers = np.stack([c.center for c in cams])
    pix_view = np.repeat(np.arange(n_views), h * w)
    flat_images = np.concatenate([im.reshape(-1, 3) for im in images])
    flat_blurred = np.concatenate([im.reshape(-1, 3) for im in blurred])
    pprime_all = mse_all = None
    if sup is not None and config.use_weight_loss:
        pprime_all = pixel_pprime(grid, config, sup, centers[pix_view], ray_d, h * w)
    elif sup is not None:
        v_all, p_all = pix_view, np.arange(n_views * h * w) % (h * w)
        rows = np.minimum((p_all // w) // sup.scale, sup.mse_targets[0].shape[0] - 1)
        cols = np.minimum((p_all % w) // sup.scale, sup.mse_targets[0].shape[1] - 1)
        mse_all = np.stack(sup.mse_targets)[v_all, rows, cols]

    state = OptimizerState()
    params = {"sdf": grid.sdf, "color": grid.color, "log_beta": np.array([grid.log_beta])}
    lrs = {"sdf": config.lr_sdf, "color": config.lr_color, "log_beta": config.lr_log_beta}
    log_beta_min = np.log(grid.beta_min)
    ref_photo = None
    over = 0
    R = config.batch_rays

    for step in range(config.steps):
        idx = rng.integers(0, n_views * h * w, size=R)
        origins = centers[pix_view[idx]]
        batch = render_rays(grid, origins, ray_d[idx], config.n_samples, ray_s[idx])
        warm = step < config.warmup_steps
        target = (flat_blurred if warm else flat_images)[idx]
        l_photo, d_color = losses.photometric_loss(batch.color, target)
        d_color *= config.w_photometric
        d_w = d_depth = d_tres = None
        l_weight = l_sparse = 0.0
        if sup is not None:
            if pprime_all is not None:
                samples = losses.ConsistencyWeightedSamples(pprime_all[idx])
                unsup = ~samples.is_supervised
                l_weight, d_w = losses.gce_weight_loss(batch.w, samples, config.q_effective, normalize=R)
                d_w *= config.w_weight
            else:
                tgt = mse_all[idx]
                has = tgt > 0
                unsup = ~has
                l_weight, g = depth_mse_supervision(batch.depth[has], tgt[has] / batch.depth_scale[has])
                d_depth = np.zeros(R)
                d_depth[has] = config.w_weight * g
            if warm and unsup.any():
                far = batch.depth[unsup] + batch.T_res[unsup] * batch.t_far[unsup]
                l_sparse, g = losses.sparsity_loss(far, config.epsilon)
                g = g * config.w_sparsity
                d_depth = np.zeros(R) if d_depth is None else d_depth
                d_tres = np.zeros(R)
                d_depth[unsup] += g
                d_tres[unsup] = g * batch.t_far[unsup]
        grads = backward(grid, batch, d_w, d_color, d_depth, d_tres)
        l_eik, g_eik = losses.eikonal_loss(grid, config.eikonal_points, rng)
        grads.sdf += config.w_eikonal * g_eik

        beta = grid.beta
        g_log_beta = grads.beta * beta if np.exp(grid.log_beta) > grid.beta_min else min(grads.beta * beta, 0.0)
        adam_step(state, params, {"sdf": grads.sdf, "color": grads.color, "log_beta": np.array([g_log_beta])}, lrs)
        params["log_beta"][0] = max(params["log_beta"][0], log_beta_min)
        grid.log_beta = float(params["log_beta"][0])

        if log_records is not None:
            log_records.append(
                {
                    "step": step,
                    "photometric": l_photo,
                    "weight_loss": l_weight,
                    "sparsity": l_sparse,
                    "eikonal": l_eik,
                    "beta": grid.beta,
                }
            )
        if step == 10:
            ref_photo = l_photo
        elif ref_photo is not None and l_photo > 10 * ref_photo:
            over += 1
            if over >= 100:
                raise DivergenceDetected(f"photometric loss above 10x its step-10 value for 100 steps (step {step})")
        else:
            over = 0
    return grid


# --- stereo stages --------------------------------------------------------------


def _stage_inputs(data: SceneData, scale):
    return [downsample(np.asarray(im, dtype=np.float64)[..., :3], scale) for im in data.images], [c.scaled(scale) for c in data.cameras]


def stage1_volumes(config: PipelineConfig, data: SceneData):
    imgs, cams = _stage_inputs(data, config.stage_scales[0])
    hyps = mvs.DepthHypotheses.uniform(*config.depth_range, config.stage_counts[0])
    return [mvs.plane_sweep(v, imgs, cams, hyps, config.stage_windows[0], config.temperature) for v in range(len(imgs))]


def refine_stages(config: PipelineConfig, data: SceneData, guides, fraction, first=1):
    """Run stages ``first..`` from per-view guide depth maps; returns (volumes, depth maps) per stage."""
    stages = []
    for k in range(first, len(config.stage_counts)):
        imgs, cams = _stage_inputs(data, config.stage_scales[k])
        h, w = cams[0].shape
        pvs, dms = [], []
        for v in range(len(imgs)):
            g = guides[v]
            if g.depth.shape != (h, w):
                g = mvs.upsample_depth(g, h, w)
            hyps = mvs.cascade_hypotheses(g, config.stage_counts[k], config.stage_interval(k), config.depth_range, fraction)
            pv = mvs.plane_sweep(v, imgs, cams, hyps, config.stage_windows[k], config.temperature)
            pvs.append(pv)
            dms.append(mvs.wta_depth(pv))
        stages.append((pvs, dms))
        guides = dms
    return stages


def fuse(config: PipelineConfig, data: SceneData, depth_maps):
    h, w = depth_maps[0].depth.shape
    scale = data.cameras[0].height // h
    cams = [c.scaled(scale) for c in data.cameras]
    masks = []
    for v, dm in enumerate(depth_maps):
        others = [i for i in range(len(depth_maps)) if i != v]
        masks.append(
            mvs.geometric_consistency_mask(
                dm, [depth_maps[i] for i in others], cams[v], [cams[i] for i in others],
                config.px_tol, config.rel_depth_tol, config.min_consistent,
            )
        )
    fg = None
    if data.masks is not None:
        fg = [downsample(np.asarray(m, dtype=np.float64), scale) > 0.5 for m in data.masks]
    imgs = [downsample(np.asarray(im, dtype=np.float64)[..., :3], scale) for im in data.images]
    points, colors = mvs.fuse_point_cloud(depth_maps, masks, cams, 0.0, config.merge_radius, fg, imgs)
    return points, colors, masks


@dataclass
class RunResult:
    points: np.ndarray
    colors: np.ndarray
    depth_maps: list  # final per-view depth maps
    grid: VoxelSdfGrid | None
    metrics: dict
    stage_volumes: list = field(default_factory=list)  # per stage: list of ProbabilityVolume
    stage_depths: list = field(default_factory=list)  # per stage: list of DepthMap
    log: list = field(default_factory=list)


def run_full(config: PipelineConfig, data: SceneData, grid: VoxelSdfGrid | None = None) -> RunResult:
    """Run the configured method and fuse a point cloud (metrics filled when GT is present).

    A pre-fitted ``grid`` skips optimization.
    """
    records = []
    stage_vols, stage_deps = [], []
    if config.method in ("full", "cascade"):
        vols = stage1_volumes(config, data)
        stage_vols.append(vols)
        stage_deps.append([mvs.wta_depth(p) for p in vols])
    if config.method == "cascade":
        grid = None
        stages = refine_stages(config, data, stage_deps[0], config.cascade_fraction)
    else:
        if grid is None:
            if config.method == "grid":
                config = dataclasses.replace(config, use_mvs=False)
            grid = optimize_grid(config, data, stage_vols[0] if stage_vols else None, records)
        if config.method == "full":
            s2 = config.stage_scales[1]
            guides = [render_depth_map(grid, c.scaled(s2), config.n_samples) for c in data.cameras]
            stages = refine_stages(config, data, guides, config.guided_fraction)
        else:
            stages = [([], [render_depth_map(grid, c, config.n_samples) for c in data.cameras])]
    for pvs, dms in stages:
        stage_vols.append(pvs)
        stage_deps.append(dms)
    final = stage_deps[-1]
    points, colors, _ = fuse(config, data, final)
    if len(points) < MIN_POINTS:
        raise EmptyReconstruction(f"fused cloud has {len(points)} points (< {MIN_POINTS})")
    metrics = evaluate_run(config, data, points, final)
    return RunResult(points, colors, final, grid, metrics, stage_vols, stage_deps, records)


def evaluate_run(config, data: SceneData, points, depth_maps) -> dict:
    from .evaluation import chamfer, depth_error_stats
    from .mvs import DepthMap

    metrics = {"n_points": int(len(points))}
    if data.gt_points is not None:
        rep = chamfer(points, data.gt_points)
        metrics["chamfer"] = {"accuracy": rep.accuracy, "completeness": rep.completeness, "mean": rep.chamfer}
    if data.gt_depths is not None:
        h, w = depth_maps[0].depth.shape
        scale = data.cameras[0].height // h
        preds = np.concatenate([dm.depth for dm in depth_maps])
        gts = np.concatenate([downsample(g, scale) if scale > 1 else g for g in data.gt_depths])
        fg = gts > 0
        stats = depth_error_stats(
            DepthMap(preds, np.ones_like(preds)), DepthMap(gts, np.ones_like(gts)), fg,
            config.stage_interval(len(config.stage_counts) - 1),
        )
        metrics["depth"] = stats
    return metrics
