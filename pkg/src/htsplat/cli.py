"""Command-line front end: ``htsplat <command> [flags]``.

Exit codes: 0 success, 1 IO/schema errors or failed checks, 2 usage errors.
Reports are ``key=value`` lines on stdout.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import core_math as cm
from . import scene_io, scenes
from .raster.renderer import THREADS_ENV, render, set_threads


class UsageError(Exception):
    pass


def _floats(text, n):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"expected {n} comma-separated numbers, got {text!r}") from None
    if len(vals) != n:
        raise UsageError(f"expected {n} comma-separated numbers, got {text!r}")
    return tuple(vals)


def add_render_flags(p, precision="float32"):
    p.add_argument("--mode", default="hybrid",
                   help="hybrid, full-sort, global-mean-sort, oit or affine")
    p.add_argument("--k", type=int, default=16, help="core size K (0 = pure order-independent)")
    p.add_argument("--tau-alpha", type=float, default=1 / 255)
    p.add_argument("--tau-k", type=float, default=0.05)
    p.add_argument("--tile", type=int, default=8)
    p.add_argument("--background", default="0,0,0", help="r,g,b in [0, 1]")
    p.add_argument("--precision", default=precision, choices=["float32", "float64"])
    p.add_argument("--no-tail", action="store_true", help="drop tail fragments instead of blending them")
    p.add_argument("--early-stop", action="store_true",
                   help="stop a pixel once the core is full and nearly opaque (unsafe)")
    p.add_argument("--no-tiling", action="store_true", help="one tile covering the whole image")


def render_config(args, **override) -> cm.RenderConfig:
    kw = dict(mode=args.mode, K=args.k, tau_alpha=args.tau_alpha, tau_K=args.tau_k, tile_size=args.tile,
              background=_floats(args.background, 3), precision=args.precision, use_tail=not args.no_tail,
              early_stop=args.early_stop, tiling=not args.no_tiling)
    kw.update(override)
    try:
        return cm.RenderConfig(**kw)
    except (cm.ConfigError, ValueError) as e:
        raise UsageError(str(e)) from None


def _scene_source(p, required=True):
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--scene", help="scene file (binary little-endian splat ply)")
    g.add_argument("--procedural", choices=["toy", "crossing", "deep", "random"],
                   help="built-in scene instead of a file")


def _load_scene(args):
    if args.scene:
        return scene_io.load_scene(args.scene)
    return {"toy": scenes.toy_reference, "crossing": scenes.crossing_scene,
            "deep": scenes.deep_overlap_scene,
            "random": lambda: scenes.random_scene(32, 0)}[args.procedural]()


def _default_cameras(args, size):
    if getattr(args, "procedural", None) in ("crossing",):
        return [scenes.yaw_camera(0.0, size, size)], ["cam000"]
    if getattr(args, "procedural", None) == "deep":
        return [cm.Camera.look_at([0, 0, 0], [0, 0, 1], up=(0, -1, 0), width=size, height=size)], ["cam000"]
    if getattr(args, "procedural", None) == "toy":
        cams = scenes.orbit_cameras(width=size, image_height=size)
        return cams, [f"cam{i:03d}" for i in range(len(cams))]
    return [scenes.default_camera(size, size)], ["cam000"]


def _load_cameras(args):
    if getattr(args, "cameras", None):
        cams, names, _ = scene_io.load_cameras(args.cameras)
        return cams, names
    return _default_cameras(args, args.size)


def _emit(lines, prefix=""):
    for k, v in lines:
        print(f"{prefix}{k}={v}")


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else str(v)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_render(args):
    cfg = render_config(args)
    if args.format not in ("ppm", "png"):
        raise UsageError(f"unknown image format {args.format!r}")
    raw = _load_scene(args)
    cams, names = _load_cameras(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for cam, name in zip(cams, names):
        fb = render(raw, cam, cfg)
        path = out / f"{name}.{args.format}"
        scene_io.write_image(fb, path, args.format)
        _emit([("image", str(path))] + [(k, _fmt(v)) for k, v in fb.timings.items()], f"{name}.")
    return 0


def cmd_path_render(args):
    cfg = render_config(args)
    from .verify import ray_consistency

    raw = _load_scene(args)
    cams = scene_io.load_camera_path(args.path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, cam in enumerate(cams):
        fb = render(raw, cam, cfg)
        scene_io.write_image(fb, out / f"frame_{i:04d}.{args.format}", args.format)
        lines = [("total_ms", _fmt(fb.timings["total_ms"]))]
        if args.ray_metric and i > 0:
            if not np.allclose(cam.position, cams[0].position, atol=1e-9):
                lines.append(("ray_consistency", "na"))
            else:
                d, m = ray_consistency(raw, cams[0], cam, cfg.replace(precision="float64"))
                lines.append(("ray_consistency", _fmt(float(d[m].max()) if m.any() else 0.0)))
        _emit(lines, f"frame{i:04d}.")
    print(f"frames={len(cams)}")
    return 0


def cmd_bench(args):
    cfg = render_config(args)
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    raw = _load_scene(args)
    cams, _ = _load_cameras(args)
    render(raw, cams[0], cfg)  # compile and warm up
    keys = ("preprocess_ms", "tiling_ms", "blending_ms", "total_ms")
    acc = {k: [] for k in keys}
    for cam in cams:
        for _ in range(args.repeats):
            t = render(raw, cam, cfg).timings
            for k in keys:
                acc[k].append(t[k])
    means = {k: float(np.mean(v)) for k, v in acc.items()}
    lines = [("mode", cfg.mode.value), ("K", cfg.effective_K), ("threads", set_threads()),
             ("cameras", len(cams)), ("repeats", args.repeats)]
    lines += [(k, _fmt(v)) for k, v in means.items()]
    lines.append(("fps", _fmt(1000.0 / means["total_ms"] if means["total_ms"] > 0 else float("inf"))))
    _emit(lines)
    return 0


def cmd_compare(args):
    cfg_a = render_config(args, mode=args.mode)
    try:
        cfg_b = cfg_a.replace(mode=cm.parse_mode(args.against))
    except (cm.ConfigError, ValueError) as e:
        raise UsageError(str(e)) from None
    from .fit import psnr

    raw = _load_scene(args)
    cams, names = _load_cameras(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for cam, name in zip(cams, names):
        a = render(raw, cam, cfg_a).image
        b = render(raw, cam, cfg_b).image
        diff = np.abs(a - b).max(-1)
        scale = max(float(diff.max()), 1e-12)
        heat = np.stack([diff / scale, np.zeros_like(diff), 1.0 - diff / scale], -1) * (diff > 0)[..., None]
        scene_io.write_image(heat, out / f"{name}_diff.{args.format}", args.format)
        scene_io.write_image(a, out / f"{name}_{cfg_a.mode.value}.{args.format}", args.format)
        scene_io.write_image(b, out / f"{name}_{cfg_b.mode.value}.{args.format}", args.format)
        _emit([("max_abs_diff", _fmt(float(diff.max()))), ("mean_abs_diff", _fmt(float(np.abs(a - b).mean()))),
               ("psnr", _fmt(psnr(a, b)))], f"{name}.")
    return 0


def cmd_fit(args):
    from .fit import FitConfig, Loss, fit

    cfg = render_config(args)
    try:
        fcfg = FitConfig(iterations=args.iterations, loss=Loss(args.loss), opacity_decay=args.opacity_decay,
                         seed=args.seed, render=cfg)
    except (cm.ConfigError, ValueError) as e:
        raise UsageError(str(e)) from None
    if args.toy:
        cams = scenes.orbit_cameras(width=args.size, image_height=args.size)
        ref = scenes.toy_reference()
        init = scenes.toy_init()
    else:
        if not (args.target_scene and args.cameras and args.init):
            raise UsageError("fit needs --toy or all of --target-scene, --cameras and --init")
        ref = scene_io.load_scene(args.target_scene)
        cams, _, _ = scene_io.load_cameras(args.cameras)
        init = scene_io.load_scene(args.init)
    targets = [render(ref, c, cm.RenderConfig()).image for c in cams]
    res = fit(targets, cams, init, fcfg, eval_config=cm.RenderConfig())
    if args.out:
        scene_io.save_scene(res.scene, args.out)
    if args.loss_curve:
        Path(args.loss_curve).write_text(res.loss_curve_text() + "\n")
    _emit([("iterations", len(res.losses)), ("initial_loss", _fmt(res.losses[0])),
           ("final_loss", _fmt(res.losses[-1])), ("psnr", _fmt(res.psnr))])
    return 0


def cmd_gradcheck(args):
    from .grad import gradcheck

    cfg = render_config(args)
    if args.scene:
        raw = scene_io.load_scene(args.scene)
    else:
        raw = scenes.random_scene(args.splats, args.seed, spread=0.7, scale_range=(0.1, 0.4))
    if len(raw) > 64:
        raise UsageError("gradcheck is meant for scenes of at most 64 splats")
    if args.cameras:
        cam = scene_io.load_cameras(args.cameras)[0][0]
    else:
        cam = scenes.default_camera(args.size, args.size)
    rep = gradcheck(raw, cam, cfg, tolerance=args.tolerance, seed=args.seed)
    print(rep.to_text())
    return 0 if rep.passed else 1


def cmd_verify(args):
    from .verify import run_all

    checks = run_all(quick=args.quick, out=sys.stdout, include_fit=not args.skip_fit)
    for c in checks:
        print(c.report())
    n_fail = sum(not c.passed for c in checks)
    print(f"checks={len(checks)}\nfailed={n_fail}")
    return 0 if n_fail == 0 else 1


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="htsplat", description="Perspective-correct Gaussian splat renderer")
    p.add_argument("--threads", type=int, default=None, help=f"kernel threads (default: ${THREADS_ENV} or all)")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("render", help="render every camera of a camera file")
    _scene_source(r)
    r.add_argument("--cameras")
    r.add_argument("--out", required=True)
    r.add_argument("--format", default="ppm")
    r.add_argument("--size", type=int, default=256, help="image size for built-in cameras")
    add_render_flags(r)
    r.set_defaults(func=cmd_render)

    pr = sub.add_parser("path_render", aliases=["path-render"], help="render a camera path to frames")
    _scene_source(pr)
    pr.add_argument("--path", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--format", default="ppm", choices=["ppm", "png"])
    pr.add_argument("--ray-metric", action="store_true",
                    help="report each frame's ray-consistency against frame 0 (rotation-only paths)")
    add_render_flags(pr)
    pr.set_defaults(func=cmd_path_render)

    b = sub.add_parser("bench", help="time the render stages")
    _scene_source(b)
    b.add_argument("--cameras")
    b.add_argument("--repeats", type=int, default=100)
    b.add_argument("--size", type=int, default=128)
    add_render_flags(b)
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("compare", help="render with two modes and write difference images")
    _scene_source(c)
    c.add_argument("--cameras")
    c.add_argument("--against", default="full_sort_oracle")
    c.add_argument("--out", required=True)
    c.add_argument("--format", default="ppm", choices=["ppm", "png"])
    c.add_argument("--size", type=int, default=128)
    add_render_flags(c, precision="float64")
    c.set_defaults(func=cmd_compare)

    f = sub.add_parser("fit", help="fit splats to target views")
    f.add_argument("--toy", action="store_true", help="the built-in 32-to-16 splat problem")
    f.add_argument("--target-scene")
    f.add_argument("--cameras")
    f.add_argument("--init")
    f.add_argument("--iterations", type=int, default=2000)
    f.add_argument("--loss", default="l1", choices=["l1", "l1_plus_ssim"])
    f.add_argument("--opacity-decay", action="store_true")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--size", type=int, default=64)
    f.add_argument("--out", help="write the fitted scene here")
    f.add_argument("--loss-curve", help="write the loss curve here")
    add_render_flags(f, precision="float64")
    f.set_defaults(func=cmd_fit)

    g = sub.add_parser("gradcheck", help="analytic vs central-difference gradients")
    g.add_argument("--scene")
    g.add_argument("--cameras")
    g.add_argument("--splats", type=int, default=5)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tolerance", type=float, default=None)
    add_render_flags(g, precision="float64")
    g.set_defaults(func=cmd_gradcheck)

    v = sub.add_parser("verify", help="run the verification suites")
    v.add_argument("--quick", action="store_true", help="smaller samples, same thresholds")
    v.add_argument("--skip-fit", action="store_true")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            parser.error("--threads must be >= 1")
        os.environ[THREADS_ENV] = str(args.threads)
    set_threads()
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, scene_io.SchemaError, cm.InvalidSplatError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
