"""Verification suites: oracle equivalence, bounding, blending reductions,
ray consistency, gradients, fitting, performance and file round-trips.

Every ``check_*`` function returns a :class:`Check`; :func:`run_all` runs them
in order. Sizes default to the full acceptance settings and can be reduced
for quick runs.
"""
from __future__ import annotations

import io
import os
import struct
import tempfile
import time
from dataclasses import dataclass, field

import numba
import numpy as np

from . import core_math as cm
from . import oracle, scenes
from .fit import FitConfig, evaluate, fit
from .grad import gradcheck
from .raster.renderer import depth_complexity, render, render_points, set_threads
from .scene_io import SCENE_PROPERTIES, load_scene, save_scene


@dataclass
class Check:
    key: str
    name: str
    passed: bool
    values: dict = field(default_factory=dict)
    detail: str = ""

    def line(self) -> str:
        vals = " ".join(f"{k}={_fmt(v)}" for k, v in self.values.items())
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.key} {self.name}: {vals}" + (
            f" ({self.detail})" if self.detail else "")

    def report(self) -> str:
        lines = [f"{self.key}.passed={int(self.passed)}"]
        lines += [f"{self.key}.{k}={_fmt(v)}" for k, v in self.values.items()]
        return "\n".join(lines)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.4g}"
    return str(v)


# ---------------------------------------------------------------------------
# Random splat / camera generation
# ---------------------------------------------------------------------------


def random_splats_in_view(rng, n, cam: cm.Camera, z_range=(1.5, 20.0), log_scale_range=(-4.5, 0.0)):
    """Baked splats whose means project inside ``cam``'s image."""
    z = rng.uniform(*z_range, n)
    px = rng.uniform(0, cam.width, n)
    py = rng.uniform(0, cam.height, n)
    view = np.column_stack([(px - cam.cx) / cam.fx * z, (py - cam.cy) / cam.fy * z, z])
    world = (view - cam.world_to_view[:3, 3]) @ cam.rotation
    q = scenes.random_quats(rng, n)
    return cm.BakedSplat(
        mean=world,
        tangent_frame=cm.quat_to_rotmat(q),
        scales=np.exp(rng.uniform(*log_scale_range, (n, 3))),
        opacity=rng.uniform(0.05, cm.OPACITY_CLAMP, n),
        sh=np.zeros((n, cm.SH_COEFFS, 3)),
    )


def random_camera(rng, width=None, height=None) -> cm.Camera:
    width = int(rng.integers(32, 512)) if width is None else width
    height = int(rng.integers(32, 512)) if height is None else height
    eye = rng.normal(size=3) * 2.0
    target = eye + rng.normal(size=3)
    f = rng.uniform(0.6, 2.0) * width
    return cm.Camera.look_at(eye, target, up=rng.normal(size=3), width=width, height=height,
                             fx=f, fy=f * rng.uniform(0.9, 1.1),
                             cx=width * rng.uniform(0.4, 0.6), cy=height * rng.uniform(0.4, 0.6))


def plucker_rho2(splats: cm.BakedSplat, cam: cm.Camera, xs, ys):
    T_prime = cm.build_transforms(splats, cam).T_prime
    pi_x, pi_y = cm.pixel_planes(xs, ys)
    line = cm.pluecker_from_planes(cm.transport_planes(pi_x, T_prime), cm.transport_planes(pi_y, T_prime),
                                   check=False)
    return cm.rho_squared(line)


# ---------------------------------------------------------------------------
# Criteria
# ---------------------------------------------------------------------------


def check_rho_equivalence(n_pairs=100_000, seed=0, n_cameras=20, tol=1e-6, time_limit=30.0) -> Check:
    """Plücker rho^2 against the explicit-inverse oracle on random splat/pixel pairs."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = 0.0
    compared = skipped = 0
    per_cam = -(-n_pairs // n_cameras)
    for _ in range(n_cameras):
        cam = random_camera(rng)
        sp = random_splats_in_view(rng, per_cam, cam)
        xs = rng.uniform(0, cam.width, per_cam)
        ys = rng.uniform(0, cam.height, per_cam)
        fast = plucker_rho2(sp, cam, xs, ys)
        ref, unstable = oracle.rho2_by_inverse(sp, cam, xs, ys)
        ok = ~unstable
        err = np.abs(fast[ok] - ref[ok]) / np.maximum(1.0, np.abs(ref[ok]))
        if err.size:
            worst = max(worst, float(err.max()))
        compared += int(ok.sum())
        skipped += int((~ok).sum())
    elapsed = time.perf_counter() - t0
    return Check("1", "pluecker_inverse_equivalence", worst <= tol and elapsed < time_limit,
                 dict(max_err=worst, tol=tol, pairs=compared, unstable_skipped=skipped, seconds=elapsed,
                      time_limit=time_limit))


def check_degenerate(n_splats=10_000, seed=1, width=64, height=64, min_flagged=0.99) -> Check:
    """Splats with one or two zero scales: finite renders, oracle flags them unstable."""
    rng = np.random.default_rng(seed)
    half = n_splats // 2
    raw = cm.RawSplat.concat([
        scenes.random_scene(half, rng, spread=1.0, scale_range=(0.02, 0.3), degenerate=1),
        scenes.random_scene(n_splats - half, rng, spread=1.0, scale_range=(0.02, 0.3), degenerate=2),
    ])
    cam = scenes.default_camera(width, height)
    bad_pixels = 0
    for mode in (cm.BlendMode.HYBRID, cm.BlendMode.FULL_SORT):
        fb = render(raw, cam, cm.RenderConfig(mode=mode))
        bad_pixels += int((~np.isfinite(fb.image)).any(-1).sum() + (~np.isfinite(fb.transmittance)).sum())
    baked = cm.bake(raw)
    xs = rng.uniform(0, width, n_splats)
    ys = rng.uniform(0, height, n_splats)
    rho2 = plucker_rho2(baked, cam, xs, ys)
    nan_rho = int(np.isnan(rho2).sum())
    box = cm.screen_bbox(cm.build_transforms(baked, cam).T_prime,
                         cm.splat_cutoff(baked.opacity, 1 / 255))
    nan_box = int(np.isnan(box.b[box.valid]).sum() + np.isnan(box.t[box.valid]).sum())
    _, unstable = oracle.rho2_by_inverse(baked, cam, xs, ys)
    frac = float(unstable.mean())
    passed = bad_pixels == 0 and nan_rho == 0 and nan_box == 0 and frac >= min_flagged
    return Check("2", "degenerate_stability", passed,
                 dict(nonfinite_pixels=bad_pixels, nan_rho2=nan_rho, nan_bbox=nan_box,
                      flagged_unstable=frac, min_flagged=min_flagged))


def fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    r = np.sqrt(1 - z * z)
    phi = np.pi * (1 + np.sqrt(5.0)) * i
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def check_bbox(n_splats=1000, n_samples=10_000, seed=2, tight_tol=1e-3) -> Check:
    """Monte-Carlo soundness and per-face tightness of the screen-space box."""
    rng = np.random.default_rng(seed)
    base = fibonacci_sphere(n_samples)
    escapes = 0
    worst_gap = 0.0
    n_boxes = 0
    for _ in range(n_splats):
        cam = random_camera(rng, 256, 256)
        sp = random_splats_in_view(rng, 1, cam, z_range=(3.0, 30.0), log_scale_range=(-3.0, 0.0))
        rho_c = float(cm.splat_cutoff(sp.opacity[0], 1 / 255))
        stack = cm.build_transforms(sp.subset(0), cam)
        box = cm.screen_bbox(stack.T_prime, rho_c)
        if not box.valid:
            continue
        n_boxes += 1
        R = cm.quat_to_rotmat(scenes.random_quats(rng, 1)[0])
        pts = base @ R.T * np.sqrt(rho_c)
        h = np.column_stack([pts, np.ones(n_samples)]) @ stack.T_prime.T
        proj = h[:, :3] / h[:, 3:]
        extent = np.maximum(box.t - box.b, 1e-300)
        slack = 1e-9 * np.maximum(1.0, np.abs(box.t))
        escapes += int(np.sum(np.any((proj < box.b - slack) | (proj > box.t + slack), axis=1)))
        gap_hi = (box.t - proj.max(0)) / extent
        gap_lo = (proj.min(0) - box.b) / extent
        worst_gap = max(worst_gap, float(max(gap_hi.max(), gap_lo.max())))
    passed = escapes == 0 and worst_gap <= tight_tol and n_boxes == n_splats
    return Check("3", "bbox_sound_and_tight", passed,
                 dict(escapes=escapes, max_face_gap=worst_gap, tight_tol=tight_tol, boxes=n_boxes,
                      samples_per_splat=n_samples))


def check_reduction(n_scenes=100, seed=3, size=48, tol=1e-6) -> Check:
    """Hybrid with K >= N (and tau_K = tau_alpha) against the per-pixel full sort."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_default = 0.0
    cam = scenes.default_camera(size, size)
    for _ in range(n_scenes):
        n = int(rng.integers(2, 40))
        raw = scenes.random_scene(n, rng)
        exact = render(raw, cam, cm.RenderConfig(mode="full_sort_oracle")).image
        cfg = cm.RenderConfig(mode="hybrid", K=max(n, 1), tau_K=1 / 255)
        worst = max(worst, float(np.abs(render(raw, cam, cfg).image - exact).max()))
        dflt = render(raw, cam, cm.RenderConfig(mode="hybrid", K=max(n, 1))).image
        worst_default = max(worst_default, float(np.abs(dflt - exact).max()))
    return Check("4", "hybrid_reduces_to_exact", worst <= tol,
                 dict(max_diff=worst, tol=tol, scenes=n_scenes, max_diff_default_tauK=worst_default),
                 "tau_K = tau_alpha so every fragment is core-eligible")


def ray_consistency(raw, cam_a: cm.Camera, cam_b: cm.Camera, config: cm.RenderConfig):
    """Per-pixel color difference between ``cam_b``'s render and ``cam_a`` sampled along the same rays.

    The cameras must share a center. Returns ``(diff (H, W), matched mask)``.
    """
    img_b = render(raw, cam_b, config).image
    sy, sx = np.meshgrid(np.arange(cam_b.height) + 0.5, np.arange(cam_b.width) + 0.5, indexing="ij")
    origin, direction = cam_b.pixel_ray(sx, sy)
    xy, z = cam_a.project(origin + direction)
    matched = (z > 0) & (xy[..., 0] >= 0) & (xy[..., 0] <= cam_a.width) & (xy[..., 1] >= 0) & (
        xy[..., 1] <= cam_a.height)
    xs = np.where(matched, xy[..., 0], 0.5)
    ys = np.where(matched, xy[..., 1], 0.5)
    img_a = render_points(raw, cam_a, xs, ys, config)
    diff = np.where(matched, np.abs(img_a - img_b).max(-1), 0.0)
    return diff, matched


def check_ray_consistency(n_pairs=6, seed=4, size=64, tol=1e-4, flip_min=1e-2) -> Check:
    rng = np.random.default_rng(seed)
    hybrid = cm.RenderConfig(mode="hybrid")
    gms = cm.RenderConfig(mode="global_mean_sort")
    worst = 0.0
    for _ in range(n_pairs):
        raw = scenes.random_scene(int(rng.integers(10, 40)), rng)
        eye = np.array([0.0, 0.0, -4.0]) + rng.normal(size=3) * 0.3
        a = cm.Camera.look_at(eye, rng.normal(size=3) * 0.2, width=size, height=size)
        b = cm.Camera.look_at(eye, rng.normal(size=3) * 0.6, up=(rng.normal() * 0.3, 1.0, 0.0),
                              width=size, height=size)
        d, m = ray_consistency(raw, a, b, hybrid)
        worst = max(worst, float(d[m].max()) if m.any() else 0.0)
    cross = scenes.crossing_scene()
    cam_a = scenes.yaw_camera(0.0, size, size)
    cam_b = scenes.yaw_camera(-20.0, size, size)
    d_h, m_h = ray_consistency(cross, cam_a, cam_b, hybrid)
    d_g, m_g = ray_consistency(cross, cam_a, cam_b, gms)
    worst = max(worst, float(d_h[m_h].max()))
    flip = float(d_g[m_g].max())
    separation = flip / max(worst, 1e-300)
    passed = worst <= tol and flip > flip_min and flip >= 10 * tol
    return Check("5", "ray_consistency", passed,
                 dict(hybrid_max_diff=worst, tol=tol, gms_crossing_max_diff=flip, flip_min=flip_min,
                      separation=separation))


GRADCHECK_CONFIGS = (
    dict(mode="hybrid", K=16),
    dict(mode="hybrid", K=2),
    dict(mode="pure_oit"),
    dict(mode="full_sort_oracle"),
    dict(mode="hybrid", K=4),
)


def check_gradcheck(n_scenes=5, n_splats=6, size=64, seed=5, tol64=1e-6, tol32=1e-3, time_limit=300.0) -> Check:
    rng = np.random.default_rng(seed)
    cam = scenes.default_camera(size, size)
    t0 = time.perf_counter()
    worst = {"float64": 0.0, "float32": 0.0}
    unresolved = 0
    for i in range(n_scenes):
        raw = scenes.random_scene(n_splats, rng, spread=0.7, scale_range=(0.1, 0.4))
        base = cm.RenderConfig(**GRADCHECK_CONFIGS[i % len(GRADCHECK_CONFIGS)])
        for prec, tol in (("float64", tol64), ("float32", tol32)):
            rep = gradcheck(raw, cam, base.replace(precision=prec), tolerance=tol, seed=i)
            worst[prec] = max(worst[prec], rep.worst)
            unresolved += rep.n_unresolved
    elapsed = time.perf_counter() - t0
    passed = worst["float64"] <= tol64 and worst["float32"] <= tol32 and elapsed < time_limit
    return Check("6", "gradcheck", passed,
                 dict(max_rel_err_f64=worst["float64"], tol64=tol64, max_rel_err_f32=worst["float32"],
                      tol32=tol32, unresolved_params=unresolved, seconds=elapsed, time_limit=time_limit))


@dataclass
class ToyFit:
    cams: list
    targets: list
    with_tail: object
    without_tail: object


def toy_targets(size=64, n_views=8):
    ref = scenes.toy_reference()
    cams = scenes.orbit_cameras(n_views, width=size, image_height=size)
    return cams, [render(ref, c).image for c in cams]


def run_toy_fit(iterations=2000, size=64) -> ToyFit:
    """The paired toy fits: with the tail, and with the tail disabled during training."""
    cams, targets = toy_targets(size)
    init = scenes.toy_init()
    eval_cfg = cm.RenderConfig()
    with_tail = fit(targets, cams, init, FitConfig(iterations=iterations), eval_config=eval_cfg)
    without = fit(targets, cams, init, FitConfig(iterations=iterations, render=cm.RenderConfig(use_tail=False)),
                  eval_config=eval_cfg)
    return ToyFit(cams, targets, with_tail, without)


def check_toy_fit(toy: ToyFit, min_psnr=28.0, min_gap=3.0) -> Check:
    gap = toy.with_tail.psnr - toy.without_tail.psnr
    return Check("7", "toy_fit", toy.with_tail.psnr >= min_psnr and gap >= min_gap,
                 dict(psnr=toy.with_tail.psnr, min_psnr=min_psnr, psnr_train_wo_tail=toy.without_tail.psnr,
                      gap_db=gap, min_gap=min_gap, iterations=len(toy.with_tail.losses)))


def check_k_sweep(toy: ToyFit, ks=(0, 8, 16, 32), slack=0.05) -> Check:
    scores = [evaluate(toy.with_tail.scene, toy.cams, toy.targets, cm.RenderConfig(K=k)) for k in ks]
    ok = scores[0] < scores[1]
    for lo, hi in zip(scores[1:], scores[2:]):
        ok &= hi >= lo - slack
    return Check("8", "k_sweep_ordering", bool(ok),
                 {f"psnr_K{k}": s for k, s in zip(ks, scores)} | {"slack": slack})


def perf_camera(size=128):
    return cm.Camera.look_at([0.0, 0.0, 0.0], [0.0, 0.0, 1.0], up=(0.0, -1.0, 0.0), width=size, height=size)


def blending_ms(raw, cam, config, repeats):
    return min(render(raw, cam, config).timings["blending_ms"] for _ in range(repeats))


def check_performance(n_splats=200, size=128, repeats=7, min_speedup=1.5, min_scaling=1.3,
                      threads=(1, 4)) -> Check:
    """Hybrid vs full sort blending time, and thread scaling of the hybrid render."""
    raw = scenes.deep_overlap_scene(n_splats)
    cam = perf_camera(size)
    dc = float(depth_complexity(raw, cam).mean())
    hyb = cm.RenderConfig(mode="hybrid", K=16, precision="float32")
    full = cm.RenderConfig(mode="full_sort_oracle", precision="float32")
    render(raw, cam, hyb), render(raw, cam, full)  # compile
    t_h = t_f = np.inf
    for _ in range(repeats):  # interleaved so machine noise hits both alike
        t_h = min(t_h, blending_ms(raw, cam, hyb, 1))
        t_f = min(t_f, blending_ms(raw, cam, full, 1))
    speedup = t_f / t_h
    previous = numba.get_num_threads()
    times = {}
    try:
        for n in threads:
            used = set_threads(n)
            times[n] = (used, min(render(raw, cam, hyb).timings["total_ms"] for _ in range(repeats)))
    finally:
        numba.set_num_threads(previous)
    scaling = times[threads[0]][1] / times[threads[-1]][1]
    passed = dc >= 64 and speedup >= min_speedup and scaling >= min_scaling
    detail = "" if times[threads[-1]][0] == threads[-1] else (
        f"only {times[threads[-1]][0]} thread(s) available on this machine")
    return Check("9", "performance", passed,
                 dict(mean_depth_complexity=dc, blend_ms_hybrid=t_h, blend_ms_full_sort=t_f, speedup=speedup,
                      min_speedup=min_speedup, thread_scaling=scaling, min_scaling=min_scaling,
                      cpus=os.cpu_count()), detail)


# three hand-written splats; every property is a distinct, exactly representable float32
FIXTURE_VALUES = np.array([[(s + 1) * 0.5 + p * 0.03125 for p in range(len(SCENE_PROPERTIES))] for s in range(3)],
                          dtype="<f4")


def fixture_bytes() -> bytes:
    """A 3-splat scene file assembled byte by byte with :mod:`struct`."""
    head = "ply\nformat binary_little_endian 1.0\ncomment hand-written fixture\nelement vertex 3\n"
    head += "".join(f"property float {p}\n" for p in SCENE_PROPERTIES) + "end_header\n"
    body = b"".join(struct.pack("<" + "f" * len(SCENE_PROPERTIES), *row) for row in FIXTURE_VALUES.tolist())
    return head.encode("ascii") + body


def check_io(seed=6) -> Check:
    rng = np.random.default_rng(seed)
    raw = scenes.random_scene(25, rng)
    for name in ("mean", "rot", "log_scales", "opacity_logit", "sh"):
        setattr(raw, name, getattr(raw, name).astype(np.float32).astype(np.float64))
    with tempfile.TemporaryDirectory() as d:
        p1, p2, p3 = (os.path.join(d, f) for f in ("a.ply", "b.ply", "fixture.ply"))
        save_scene(raw, p1)
        back = load_scene(p1)
        save_scene(back, p2)
        fields_exact = all(np.array_equal(getattr(raw, k), getattr(back, k))
                           for k in ("mean", "rot", "log_scales", "opacity_logit", "sh"))
        with open(p1, "rb") as f1, open(p2, "rb") as f2:
            bytes_exact = f1.read() == f2.read()
        with open(p3, "wb") as f:
            f.write(fixture_bytes())
        fx = load_scene(p3)
    col = {p: FIXTURE_VALUES[:, i].astype(np.float64) for i, p in enumerate(SCENE_PROPERTIES)}
    want_sh = np.zeros((3, cm.SH_COEFFS, 3))
    for c in range(3):
        want_sh[:, 0, c] = col[f"f_dc_{c}"]
        for k in range(cm.SH_COEFFS - 1):
            want_sh[:, 1 + k, c] = col[f"f_rest_{c * 15 + k}"]
    fixture_ok = (np.array_equal(fx.mean, np.column_stack([col["x"], col["y"], col["z"]]))
                  and np.array_equal(fx.opacity_logit, col["opacity"])
                  and np.array_equal(fx.log_scales, np.column_stack([col[f"scale_{i}"] for i in range(3)]))
                  and np.array_equal(fx.rot, np.column_stack([col[f"rot_{i}"] for i in range(4)]))
                  and np.array_equal(fx.sh, want_sh))
    return Check("10", "io_round_trip", fields_exact and bytes_exact and fixture_ok,
                 dict(fields_exact=fields_exact, bytes_exact=bytes_exact, fixture_ok=fixture_ok))


def run_all(quick=False, out=None, include_fit=True):
    """Run every suite, printing one line per check; returns the list of checks."""
    out = out or io.StringIO()
    checks = []

    def emit(c):
        checks.append(c)
        print(c.line(), file=out, flush=True)

    if quick:
        emit(check_rho_equivalence(n_pairs=5000))
        emit(check_degenerate(n_splats=500))
        emit(check_bbox(n_splats=40))
        emit(check_reduction(n_scenes=10))
        emit(check_ray_consistency(n_pairs=2))
        emit(check_gradcheck(n_scenes=1, n_splats=3, size=32))
    else:
        emit(check_rho_equivalence())
        emit(check_degenerate())
        emit(check_bbox())
        emit(check_reduction())
        emit(check_ray_consistency())
        emit(check_gradcheck())
    if include_fit:
        toy = run_toy_fit(iterations=300 if quick else 2000)
        emit(check_toy_fit(toy))
        emit(check_k_sweep(toy))
    emit(check_performance(repeats=3 if quick else 7))
    emit(check_io())
    return checks
