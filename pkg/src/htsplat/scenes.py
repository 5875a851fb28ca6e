"""Procedural scenes and camera rigs used by tests, benchmarks and the toy fit."""
from __future__ import annotations

import numpy as np

from .core_math import SH_COEFFS, Camera, RawSplat, logit
from .sh import C0, SH_OFFSET


def default_camera(width=64, height=64, distance=4.0, **kw) -> Camera:
    return Camera.look_at([0.0, 0.0, -distance], [0.0, 0.0, 0.0], width=width, height=height, **kw)


def rgb_to_dc(rgb):
    """DC coefficients that evaluate to ``rgb`` (before any higher band)."""
    return (np.asarray(rgb, float) - SH_OFFSET) / C0


def random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def random_scene(n, rng=None, spread=0.8, scale_range=(0.05, 0.3), opacity_range=(0.2, 0.95),
                 sh_scale=0.3, degenerate=0) -> RawSplat:
    """``n`` random splats in a cube of half-width ``spread`` around the origin.

    ``degenerate`` in {0, 1, 2} forces that many zero scales per splat
    (``log_scales = -inf`` is avoided; the baked scale is set via a huge
    negative log, which underflows ``exp`` to exactly zero).
    """
    rng = np.random.default_rng(rng)
    log_s = np.log(rng.uniform(*scale_range, (n, 3)))
    for i in range(n):
        if degenerate:
            log_s[i, rng.choice(3, degenerate, replace=False)] = -1e4
    o = rng.uniform(*opacity_range, n)
    return RawSplat(
        mean=rng.uniform(-spread, spread, (n, 3)),
        rot=random_quats(rng, n),
        log_scales=log_s,
        opacity_logit=logit(o),
        sh=rng.normal(size=(n, SH_COEFFS, 3)) * sh_scale,
    )


def solid_scene(means, scales, colors, opacities, rots=None) -> RawSplat:
    """Splats with view-independent colors (DC band only)."""
    means = np.atleast_2d(np.asarray(means, float))
    n = len(means)
    sh = np.zeros((n, SH_COEFFS, 3))
    sh[:, 0, :] = rgb_to_dc(np.broadcast_to(colors, (n, 3)))
    rots = np.tile([1.0, 0, 0, 0], (n, 1)) if rots is None else np.asarray(rots, float)
    return RawSplat(means, rots, np.log(np.broadcast_to(scales, (n, 3))),
                    logit(np.broadcast_to(opacities, (n,))), sh)


def crossing_scene() -> RawSplat:
    """Two elongated, side-by-side splats whose mean-depth order flips under camera yaw.

    Seen from the origin looking down +z, the red splat (mean z = 5) is in
    front of the green one (mean z = 5.3) along every shared ray, yet yawing
    the camera by -20 degrees puts the green mean closer.
    """
    return solid_scene(
        means=[[-0.9, 0.0, 5.0], [0.9, 0.0, 5.3]],
        scales=[1.0, 0.35, 0.08],
        colors=[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        opacities=0.8,
    )


def yaw_camera(angle_deg, width=64, height=64, fx=None, position=(0.0, 0.0, 0.0)) -> Camera:
    """Camera at ``position`` looking down +z, yawed by ``angle_deg`` about the y axis."""
    a = np.radians(angle_deg)
    fwd = np.array([np.sin(a), 0.0, np.cos(a)])
    pos = np.asarray(position, float)
    return Camera.look_at(pos, pos + fwd, up=(0.0, -1.0, 0.0), width=width, height=height, fx=fx)


def deep_overlap_scene(n=600, rng=0, depth_range=(3.0, 9.0), extent=1.0, scale=0.9,
                       opacity=0.15) -> RawSplat:
    """Many broad, faint, flat splats stacked in depth in front of an origin camera.

    Default settings give a mean depth complexity well above 64 fragments
    per pixel at ``alpha >= 1/255`` for a camera at the origin with
    ``fx = width``.
    """
    rng = np.random.default_rng(rng)
    z = rng.uniform(*depth_range, n)
    xy = rng.uniform(-extent, extent, (n, 2)) * z[:, None] / depth_range[1]
    means = np.column_stack([xy, z])
    scales = np.column_stack([rng.uniform(0.6, 1.2, (n, 2)) * scale * z[:, None] / depth_range[0],
                              np.full(n, 0.02)])
    colors = rng.uniform(0.0, 1.0, (n, 3))
    raw = solid_scene(means, 1.0, colors, opacity)
    raw.log_scales = np.log(scales)
    raw.rot = random_quats(rng, n) * 0.2 + np.array([1.0, 0, 0, 0])
    return raw


def orbit_cameras(n_views=8, radius=4.0, height=1.0, width=64, image_height=64, fx=None):
    """Cameras on a ring around the origin, all looking at it."""
    cams = []
    for k in range(n_views):
        a = 2 * np.pi * k / n_views
        eye = [radius * np.sin(a), height * (1 if k % 2 else -1) * 0.5, -radius * np.cos(a)]
        cams.append(Camera.look_at(eye, [0.0, 0.0, 0.0], width=width, height=image_height, fx=fx))
    return cams


def toy_reference(rng=7) -> RawSplat:
    """The 16-splat reference scene of the toy fit: saturated colors, mid opacity."""
    rng = np.random.default_rng(rng)
    n = 16
    colors = rng.uniform(0.05, 0.95, (n, 3))
    raw = solid_scene(rng.uniform(-0.6, 0.6, (n, 3)), 1.0, colors, rng.uniform(0.5, 0.9, n),
                      rots=random_quats(rng, n))
    raw.log_scales = np.log(rng.uniform(0.15, 0.45, (n, 3)))
    raw.sh[:, 1:4, :] = rng.normal(size=(n, 3, 3)) * 0.05
    return raw


def toy_init(n=32, rng=11) -> RawSplat:
    """Random 32-splat starting point for the toy fit."""
    rng = np.random.default_rng(rng)
    raw = solid_scene(rng.uniform(-0.6, 0.6, (n, 3)), 1.0, np.full((n, 3), 0.5), 0.3,
                      rots=random_quats(rng, n))
    raw.log_scales = np.log(np.full((n, 3), 0.12))
    return raw
