"""Tile-based forward renderer: preprocess, tiling and per-tile blending."""
from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numba
import numpy as np

from .. import core_math as cm
from .. import oracle
from ..sh import splat_colors
from . import kernels
from .tiling import TileList, build_tiles, pixel_range

THREADS_ENV = "HTSPLAT_THREADS"


def set_threads(n=None) -> int:
    """Set the kernel thread count (``None`` reads ``HTSPLAT_THREADS``)."""
    if n is None:
        n = os.environ.get(THREADS_ENV)
    if n is None:
        return numba.get_num_threads()
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


@dataclass
class Preprocessed:
    """Per-splat setup for one view. ``ids`` maps compacted rows to scene indices."""

    n_total: int
    keep: np.ndarray
    ids: np.ndarray
    T_prime: np.ndarray
    MT: np.ndarray
    rgb: np.ndarray
    opacity: np.ndarray
    mean_z: np.ndarray
    rho_c: np.ndarray
    bbox_b: np.ndarray
    bbox_t: np.ndarray
    cull_reason: np.ndarray = field(repr=False)
    mean2d: np.ndarray | None = None
    conic: np.ndarray | None = None


CULL_NONE, CULL_OPACITY, CULL_NEAR, CULL_BBOX, CULL_VIEWPORT = range(5)


def preprocess(splats: cm.BakedSplat, cam: cm.Camera, config: cm.RenderConfig,
               cover_centers: bool = True) -> Preprocessed:
    """Transforms, bounding boxes and colors; culls splats that cannot be seen.

    A splat is culled when its opacity does not exceed ``tau_alpha``, its
    support reaches the near plane, its box is not boundable, or the box
    covers no pixel center of the viewport (or lies beyond the far plane).
    """
    if np.ndim(splats.mean) == 1:
        splats = splats.subset(np.newaxis)
    n = splats.mean.shape[0]
    reason = np.zeros(n, dtype=np.int8)
    rho_c = np.atleast_1d(cm.splat_cutoff(splats.opacity, config.tau_alpha)) if n else np.zeros(0)
    reason[rho_c <= 0] = CULL_OPACITY

    stack = cm.build_transforms(splats, cam)
    mean_view = splats.mean @ cam.rotation.T + cam.world_to_view[:3, 3] if n else np.zeros((0, 3))
    mean_z = mean_view[:, 2]
    reach = np.sqrt(np.maximum(rho_c, 0.0)) * np.max(splats.scales, axis=-1) if n else np.zeros(0)
    near_bad = (mean_z - reach <= cam.near) & (reason == CULL_NONE)
    reason[near_bad] = CULL_NEAR

    mean2d = conic = None
    if config.mode is cm.BlendMode.AFFINE_3DGS:
        m2, c2, _, valid = oracle.project_affine(splats, cam)
        det = c2[:, 0, 0] * c2[:, 1, 1] - c2[:, 0, 1] ** 2
        ok = valid & (det > 0) & np.all(np.isfinite(c2.reshape(n, 4)), -1)
        hx = np.sqrt(np.maximum(rho_c * c2[:, 0, 0], 0.0))
        hy = np.sqrt(np.maximum(rho_c * c2[:, 1, 1], 0.0))
        bb = np.stack([m2[:, 0] - hx, m2[:, 1] - hy, np.zeros(n)], -1)
        tt = np.stack([m2[:, 0] + hx, m2[:, 1] + hy, np.zeros(n)], -1)
        dets = np.where(det > 0, det, 1.0)
        conic = np.stack([c2[:, 1, 1] / dets, -c2[:, 0, 1] / dets, c2[:, 0, 0] / dets], -1)
        mean2d = m2
    else:
        box = cm.screen_bbox(stack.T_prime, rho_c)
        ok = box.valid
        bb, tt = box.b, box.t
    reason[(~ok) & (reason == CULL_NONE)] = CULL_BBOX

    if cover_centers:
        x_lo, x_hi = pixel_range(bb[:, 0], tt[:, 0], cam.width)
        y_lo, y_hi = pixel_range(bb[:, 1], tt[:, 1], cam.height)
        off = (x_lo > x_hi) | (y_lo > y_hi)
    else:
        off = (tt[:, 0] < 0) | (bb[:, 0] > cam.width) | (tt[:, 1] < 0) | (bb[:, 1] > cam.height)
    if config.mode is not cm.BlendMode.AFFINE_3DGS:
        off |= bb[:, 2] > 1.0
    reason[off & (reason == CULL_NONE)] = CULL_VIEWPORT

    keep = reason == CULL_NONE
    ids = np.flatnonzero(keep)
    sub = splats.subset(ids)
    rgb = splat_colors(sub, cam) if len(ids) else np.zeros((0, 3))
    return Preprocessed(
        n_total=n, keep=keep, ids=ids,
        T_prime=stack.T_prime[ids], MT=stack.MT[ids], rgb=rgb,
        opacity=np.asarray(splats.opacity)[ids], mean_z=mean_z[ids], rho_c=rho_c[ids],
        bbox_b=bb[ids], bbox_t=tt[ids], cull_reason=reason,
        mean2d=None if mean2d is None else mean2d[ids],
        conic=None if conic is None else conic[ids],
    )


@dataclass
class Framebuffer:
    image: np.ndarray  # (H, W, 3) linear RGB
    transmittance: np.ndarray  # (H, W)
    timings: dict = field(default_factory=dict)

    @property
    def height(self):
        return self.image.shape[0]

    @property
    def width(self):
        return self.image.shape[1]

    def timing_report(self) -> str:
        return "\n".join(f"{k}={v:.4f}" for k, v in self.timings.items())


@dataclass
class RenderContext:
    """Everything the blending kernels (and their backward passes) consume."""

    cam: cm.Camera
    config: cm.RenderConfig
    pre: Preprocessed
    tiles: TileList
    sx: np.ndarray
    sy: np.ndarray
    arrays: dict

    def kernel_args(self):
        a = self.arrays
        return a["lin"], a["mtz"], a["rgb"], a["opac"], a["keyz"]


def pixel_centers(cam: cm.Camera, dtype=np.float64):
    sy, sx = np.meshgrid(np.arange(cam.height) + 0.5, np.arange(cam.width) + 0.5, indexing="ij")
    return sx.astype(dtype), sy.astype(dtype)


def _as_baked(scene):
    return cm.bake(scene) if isinstance(scene, cm.RawSplat) else scene


def prepare(scene, cam: cm.Camera, config: cm.RenderConfig, points=None, _timings=None) -> RenderContext:
    """Preprocess and tile a scene. ``points=(sx, sy)`` samples arbitrary screen positions."""
    t0 = time.perf_counter()
    pre = preprocess(_as_baked(scene), cam, config, cover_centers=points is None)
    t1 = time.perf_counter()
    if points is None:
        tiles = build_tiles(pre.bbox_b, pre.bbox_t, cam.width, cam.height, config.tile_size, config.tiling)
        sx, sy = pixel_centers(cam, config.dtype)
    else:
        sx, sy = (np.atleast_2d(np.asarray(p, dtype=config.dtype)) for p in points)
        tiles = build_tiles(np.full((len(pre.ids), 2), -np.inf), np.full((len(pre.ids), 2), np.inf),
                            sx.shape[1], sx.shape[0], config.tile_size, tiling=False)
    dt = config.dtype
    arrays = dict(
        tp=np.ascontiguousarray(pre.T_prime, dtype=dt).reshape(-1, 4, 4),
        lin=np.ascontiguousarray(cm.pixel_line_coefficients(pre.T_prime), dtype=dt).reshape(-1, 18),
        mtz=np.ascontiguousarray(pre.MT[:, 2, :], dtype=dt).reshape(-1, 4),
        rgb=np.ascontiguousarray(pre.rgb, dtype=dt).reshape(-1, 3),
        opac=np.ascontiguousarray(pre.opacity, dtype=dt).reshape(-1),
        keyz=np.ascontiguousarray(pre.mean_z, dtype=dt).reshape(-1),
        bg=np.asarray(config.background, dtype=dt),
        cst=kernels.make_constants(dt, config.tau_alpha, config.tau_K),
    )
    if pre.mean2d is not None:
        arrays["mean2d"] = np.ascontiguousarray(pre.mean2d, dtype=dt).reshape(-1, 2)
        arrays["conic"] = np.ascontiguousarray(pre.conic, dtype=dt).reshape(-1, 3)
    t2 = time.perf_counter()
    if _timings is not None:
        _timings["preprocess_ms"] = (t1 - t0) * 1e3
        _timings["tiling_ms"] = (t2 - t1) * 1e3
    return RenderContext(cam, config, pre, tiles, sx, sy, arrays)


def blend(ctx: RenderContext):
    """Run the blending kernel for the context's mode; returns ``(image, transmittance)``."""
    cfg, tl, a = ctx.config, ctx.tiles, ctx.arrays
    H, W = ctx.sx.shape
    out = np.zeros((H, W, 3), dtype=cfg.dtype)
    trans = np.ones((H, W), dtype=cfg.dtype)
    common = (tl.tile_start, tl.tile_idx, tl.tiles_x, tl.tile_size, ctx.sx, ctx.sy)
    mode = cfg.mode
    if mode in (cm.BlendMode.HYBRID, cm.BlendMode.PURE_OIT):
        use_keyz = cfg.depth_sort_key is cm.DepthKey.MEAN_VIEW_Z
        kernels.hybrid_forward(*ctx.kernel_args(), use_keyz, *common, cfg.effective_K, cfg.use_tail,
                               cfg.early_stop, a["bg"], a["cst"], out, trans)
    elif mode in (cm.BlendMode.FULL_SORT, cm.BlendMode.GLOBAL_MEAN_SORT):
        per_pixel = mode is cm.BlendMode.FULL_SORT and cfg.depth_sort_key is cm.DepthKey.MAX_CONTRIBUTION
        kernels.sorted_forward(*ctx.kernel_args(), per_pixel, *common, cfg.early_stop, a["bg"], a["cst"],
                               out, trans)
    elif mode is cm.BlendMode.AFFINE_3DGS:
        kernels.affine_forward(a["mean2d"], a["conic"], a["rgb"], a["opac"], a["keyz"], *common,
                               cfg.early_stop, a["bg"], a["cst"], out, trans)
    else:  # pragma: no cover
        raise cm.ConfigError(f"unsupported mode {mode}")
    return out, trans


def render(scene, cam: cm.Camera, config: cm.RenderConfig | None = None) -> Framebuffer:
    """Render a (raw or baked) scene; timings in ms are attached to the result."""
    config = config or cm.RenderConfig()
    timings = {}
    t0 = time.perf_counter()
    ctx = prepare(scene, cam, config, _timings=timings)
    t1 = time.perf_counter()
    img, trans = blend(ctx)
    t2 = time.perf_counter()
    timings["blending_ms"] = (t2 - t1) * 1e3
    timings["total_ms"] = (t2 - t0) * 1e3
    return Framebuffer(img.astype(np.float64), trans.astype(np.float64), timings)


def render_points(scene, cam: cm.Camera, xs, ys, config: cm.RenderConfig | None = None):
    """Colors of the rays through arbitrary screen positions ``(xs, ys)`` of ``cam``."""
    config = config or cm.RenderConfig()
    xs, ys = np.broadcast_arrays(np.asarray(xs, float), np.asarray(ys, float))
    shape = xs.shape
    ctx = prepare(scene, cam, config, points=(xs.reshape(1, -1), ys.reshape(1, -1)))
    img, _ = blend(ctx)
    return img.reshape(shape + (3,)).astype(np.float64)


def depth_complexity(scene, cam: cm.Camera, config: cm.RenderConfig | None = None):
    """Per-pixel count of fragments with ``alpha >= tau_alpha``."""
    config = config or cm.RenderConfig()
    ctx = prepare(scene, cam, config)
    counts = np.zeros(ctx.sx.shape, dtype=np.int64)
    tl = ctx.tiles
    kernels.count_fragments(ctx.arrays["lin"], ctx.arrays["opac"], tl.tile_start, tl.tile_idx, tl.tiles_x,
                            tl.tile_size, ctx.sx, ctx.sy, ctx.arrays["cst"], counts)
    return counts
