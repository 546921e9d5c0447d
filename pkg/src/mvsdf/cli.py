"""Command-line interface: ``gen-scene``, ``run``, ``render`` and ``eval``.

Exit status is 0 on success, 1 for configuration problems and 2 for runtime
failures. ``RECON_THREADS`` caps the BLAS/OpenMP thread pools.
"""

from __future__ import annotations

import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _thread_cap():
    raw = os.environ.get("RECON_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        return f"RECON_THREADS must be a positive integer, got {raw!r}"
    for var in _THREAD_VARS:
        os.environ[var] = str(n)
    return None


_THREAD_ERROR = _thread_cap()  # must run before numpy is imported

import argparse  # noqa: E402
import json  # noqa: E402
import time  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import fileio  # noqa: E402
from .errors import InvalidConfig, ReconError  # noqa: E402
from .evaluation import chamfer, psnr, report, report_json, ssim  # noqa: E402
from .pipeline import ABLATIONS, PipelineConfig, SceneData, run_full  # noqa: E402
from .scene import capture, load_scene, scene_to_dict  # noqa: E402
from .sdfrender import render_view  # noqa: E402



def _parse_res(text):
    try:
        w, h = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise InvalidConfig(f"expected WxH, got {text!r}", "--res") from None
    return w, h


def cmd_gen_scene(scene_path, out_dir, views=None, res=None, seed=0, n_points=200000):
    spec = load_scene(scene_path)
    w, h = res if res else (spec.width, spec.height)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cap = capture(spec, views or spec.n_views, w, h, n_points=n_points, seed=seed)
    for i, (img, depth, cam) in enumerate(zip(cap.images, cap.depths, cap.cameras)):
        fileio.write_png(out / f"view_{i:03d}.png", img)
        fileio.write_pfm(out / f"depth_{i:03d}.pfm", depth)
        fileio.write_camera(out / f"cam_{i:03d}.json", cam)
    fileio.write_ply(out / "gt.ply", cap.gt_points)
    meta = scene_to_dict(spec)
    meta["cameras"].update({"n": len(cap.cameras), "width": w, "height": h})
    meta["seed"] = seed
    (out / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def load_scene_dir(scene_dir) -> tuple[SceneData, dict]:
    d = Path(scene_dir)
    if not d.is_dir():
        raise InvalidConfig("scene directory not found", str(d))
    meta = {}
    if (d / "scene.json").exists():
        meta = json.loads((d / "scene.json").read_text())
    images, cams, depths = [], [], []
    i = 0
    while (d / f"view_{i:03d}.png").exists():
        images.append(fileio.read_png(d / f"view_{i:03d}.png"))
        cams.append(fileio.read_camera(d / f"cam_{i:03d}.json"))
        dp = d / f"depth_{i:03d}.pfm"
        depths.append(fileio.read_pfm(dp).astype(np.float64) if dp.exists() else None)
        i += 1
    if not images:
        raise InvalidConfig("no view_000.png found", str(d))
    have_depth = all(x is not None for x in depths)
    gt = None
    if (d / "gt.ply").exists():
        gt = fileio.read_ply(d / "gt.ply")[0].astype(np.float64)
    data = SceneData(
        images,
        cams,
        masks=[x > 0 for x in depths] if have_depth else None,
        gt_points=gt,
        gt_depths=depths if have_depth else None,
    )
    return data, meta


def load_run_config(config_path, ablate=(), overrides=None):
    """Read a run config; ``scene_dir`` is resolved relative to the config file."""
    path = Path(config_path)
    if not path.exists():
        raise InvalidConfig("config file not found", str(path))
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise InvalidConfig(f"invalid JSON: {e}", str(path)) from None
    if "scene_dir" not in doc:
        raise InvalidConfig("missing field", "scene_dir")
    scene_dir = (path.parent / doc.pop("scene_dir")).resolve()
    data, meta = load_scene_dir(scene_dir)
    if "depth_range" not in doc and "depth_range" in meta:
        doc["depth_range"] = meta["depth_range"]
    if "bounds" not in doc and "bounds" in meta:
        doc["bounds"] = [meta["bounds"]["min"], meta["bounds"]["max"]]
    doc.update(overrides or {})
    config = PipelineConfig.from_dict(doc).ablate(*ablate)
    return config, data, scene_dir


def cmd_run(config_path, out_dir, ablate=(), overrides=None):
    t0 = time.time()
    config, data, scene_dir = load_run_config(config_path, ablate, overrides)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = run_full(config, data)
    except ReconError as e:
        raise type(e)(f"pipeline ({config.method}): {e}") from e
    artifacts = {}

    def put(name, writer, obj):
        writer(out / name, obj)
        artifacts.setdefault("files", []).append(name)

    for k, vols in enumerate(result.stage_volumes):
        for v, pv in enumerate(vols):
            put(f"stage{k + 1}_prob_{v:03d}.pvol", fileio.write_pvol, pv)
    for k, dms in enumerate(result.stage_depths):
        for v, dm in enumerate(dms):
            put(f"stage{k + 1}_depth_{v:03d}.pfm", fileio.write_pfm, dm.depth)
    if result.grid is not None:
        put("grid.sdfg", fileio.write_sdfg, result.grid)
    fileio.write_ply(out / "fused.ply", result.points, result.colors)
    artifacts["files"].append("fused.ply")
    with open(out / "train_log.jsonl", "w") as f:
        for rec in result.log:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    artifacts["files"].append("train_log.jsonl")
    rep = report()
    if "chamfer" in result.metrics:
        rep["chamfer"] = result.metrics["chamfer"]
    rep["depth"] = result.metrics.get("depth")
    rep["n_points"] = result.metrics["n_points"]
    rep["method"] = config.method
    (out / "metrics.json").write_text(report_json(rep) + "\n")
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    artifacts["files"] += ["metrics.json", "config.json"]
    manifest = {
        "config": str(Path(config_path).resolve()),
        "scene_dir": str(scene_dir),
        "seed": config.seed,
        "artifacts": artifacts["files"],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"run finished in {time.time() - t0:.1f} s", file=sys.stderr)
    return rep


def cmd_render(grid_path, cam_path, out_png, source_dir=None, ibr=False, depth_out=None, n_samples=96):
    grid = fileio.read_sdfg(grid_path)
    cam = fileio.read_camera(cam_path)
    color, depth, opacity = render_view(grid, cam, n_samples)
    if ibr:
        from .ibr import synthesize_novel

        if source_dir is None:
            raise InvalidConfig("--ibr needs --sources", "--sources")
        data, _ = load_scene_dir(source_dir)
        color = synthesize_novel(cam, grid, data.cameras, data.images, n_samples=n_samples)
    fileio.write_png(out_png, color)
    if depth_out:
        fileio.write_pfm(depth_out, np.where(opacity >= 0.5, depth, 0.0))
    return color


def cmd_eval(recon_ply, gt_ply, images=(), out=None):
    for p in (recon_ply, gt_ply, *images):
        if not Path(p).exists():
            raise InvalidConfig("file not found", str(p))
    recon, _ = fileio.read_ply(recon_ply)
    gt, _ = fileio.read_ply(gt_ply)
    ch = chamfer(recon.astype(np.float64), gt.astype(np.float64))
    p = s = None
    if images:
        if len(images) != 2:
            raise InvalidConfig("expected two images (prediction, reference)", "--images")
        a, b = (fileio.read_png(x) for x in images)
        p, s = psnr(a, b), ssim(a, b)
    rep = report(ch, p, s)
    text = report_json(rep)
    if out:
        Path(out).write_text(text + "\n")
    return rep


def build_parser():
    ap = argparse.ArgumentParser(prog="mvsdf", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="render a synthetic scene")
    g.add_argument("scene")
    g.add_argument("out_dir")
    g.add_argument("--views", type=int)
    g.add_argument("--res", type=_parse_res, help="WxH")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--gt-points", type=int, default=200000)

    r = sub.add_parser("run", help="run the reconstruction pipeline")
    r.add_argument("config")
    r.add_argument("out_dir")
    r.add_argument("--ablate", action="append", default=[], choices=sorted(ABLATIONS))
    r.add_argument("--method", choices=["full", "cascade", "grid"])
    r.add_argument("--steps", type=int)
    r.add_argument("--seed", type=int)

    d = sub.add_parser("render", help="render a grid checkpoint")
    d.add_argument("grid")
    d.add_argument("camera")
    d.add_argument("out_png")
    d.add_argument("--sources", help="scene directory with source views")
    d.add_argument("--ibr", action="store_true")
    d.add_argument("--depth", help="optional PFM output")
    d.add_argument("--samples", type=int, default=96)

    e = sub.add_parser("eval", help="evaluate a reconstruction")
    e.add_argument("recon")
    e.add_argument("gt")
    e.add_argument("--images", nargs=2, default=(), metavar=("PRED", "REF"))
    e.add_argument("--out")
    return ap


def main(argv=None) -> int:
    if _THREAD_ERROR:
        print(f"error: {_THREAD_ERROR}", file=sys.stderr)
        return 1
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-scene":
            cmd_gen_scene(args.scene, args.out_dir, args.views, args.res, args.seed, args.gt_points)
        elif args.command == "run":
            over = {k: getattr(args, k) for k in ("method", "steps", "seed") if getattr(args, k) is not None}
            rep = cmd_run(args.config, args.out_dir, args.ablate, over)
            print(report_json(rep))
        elif args.command == "render":
            cmd_render(args.grid, args.camera, args.out_png, args.sources, args.ibr, args.depth, args.samples)
        elif args.command == "eval":
            print(report_json(cmd_eval(args.recon, args.gt, args.images, args.out)))
    except InvalidConfig as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (ReconError, FloatingPointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
