"""Analytic backward pass from an image-space gradient to raw splat parameters,
plus a central-difference gradient checker.

Core/tail/skip membership and the core ordering are frozen from the forward
pass; depth receives no gradient. Kernels produce per tile-instance rows of
``dL/dT'``, ``dL/drgb`` and ``dL/dopacity`` that are reduced to splats in
index order, so results do not depend on the thread count.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import core_math as cm
from .raster import kernels
from .raster.pixel import PixelState
from .raster.renderer import RenderContext, blend, pixel_centers, prepare, preprocess, render
from .sh import SH_OFFSET, sh_basis, splat_colors_backward, view_dirs

GROUPS = ("mean", "rot", "log_scales", "opacity_logit", "sh")


@dataclass
class SplatGrads:
    d_mean: np.ndarray  # (N, 3)
    d_rot: np.ndarray  # (N, 4)
    d_log_scales: np.ndarray  # (N, 3)
    d_opacity_logit: np.ndarray  # (N,)
    d_sh: np.ndarray  # (N, 16, 3)

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n),
                   np.zeros((n, cm.SH_COEFFS, 3)))

    def group(self, name) -> np.ndarray:
        return getattr(self, "d_" + name)

    def __iadd__(self, other: "SplatGrads"):
        for name in GROUPS:
            self.group(name)[...] += other.group(name)
        return self

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(self.group(g))) for g in GROUPS)


# ---------------------------------------------------------------------------
# Per-pixel reference
# ---------------------------------------------------------------------------


@dataclass
class PixelTape:
    """What one pixel's forward pass leaves behind for its backward pass."""

    core_ids: list
    core_alpha: np.ndarray
    core_depth: np.ndarray
    core_color: np.ndarray  # (n, 3)
    tail_sum_ac: np.ndarray
    tail_sum_a: float
    tail_trans: float
    d_color: np.ndarray  # dL/dC
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def from_state(cls, state: PixelState, d_color, background=(0.0, 0.0, 0.0)):
        core = state.core
        return cls(
            core_ids=[e.splat_id for e in core],
            core_alpha=np.array([e.alpha for e in core], float),
            core_depth=np.array([e.depth for e in core], float),
            core_color=np.array([e.color for e in core], float).reshape(-1, 3),
            tail_sum_ac=np.asarray(state.tail_sum_ac, float).copy(),
            tail_sum_a=float(state.tail_sum_a),
            tail_trans=float(state.tail_trans),
            d_color=np.asarray(d_color, float),
            background=np.asarray(background, float),
        )

    @property
    def has_tail(self) -> bool:
        return self.tail_sum_a > 0

    def tail_weights(self):
        """``(w_c, w_bg)``: the per-pixel factors shared by every tail fragment.

        A tail fragment with ``(alpha, c)`` gets ``dL/dc = w_c * alpha`` and
        ``dL/dalpha = w_c . (c - c_tail) - w_bg / (1 - alpha)``.
        """
        if not self.has_tail:
            return np.zeros(3), 0.0
        T_core = float(np.prod(1.0 - self.core_alpha))
        c_tail = self.tail_sum_ac / self.tail_sum_a
        w_c = self.d_color * T_core * (1.0 - self.tail_trans) / self.tail_sum_a
        w_bg = T_core * self.tail_trans * float(self.d_color @ (self.background - c_tail))
        return w_c, w_bg


def backward_pixel(tape: PixelTape, tail_alphas=(), tail_colors=()):
    """Per-fragment ``(dL/dalpha, dL/dcolor)`` for one pixel.

    Returns ``(core, tail)``: arrays for the core entries in blend order and
    for the given tail fragments (whose individual ``alpha``/color come from
    the fragment stream; everything else comes from the tape aggregates).
    """
    a = tape.core_alpha
    n = len(a)
    T = np.concatenate([[1.0], np.cumprod(1.0 - a)])
    if tape.has_tail:
        f = (1.0 - tape.tail_trans) / tape.tail_sum_a
        behind = f * tape.tail_sum_ac + tape.tail_trans * tape.background
    else:
        behind = tape.background
    S = T[n] * behind
    d_alpha = np.zeros(n)
    d_col = np.zeros((n, 3))
    for i in range(n - 1, -1, -1):
        d_col[i] = tape.d_color * a[i] * T[i]
        d_alpha[i] = tape.d_color @ (T[i] * tape.core_color[i] - S / (1.0 - a[i]))
        S = S + a[i] * T[i] * tape.core_color[i]
    ta = np.asarray(tail_alphas, float).reshape(-1)
    tc = np.asarray(tail_colors, float).reshape(-1, 3)
    w_c, w_bg = tape.tail_weights()
    if tape.has_tail:
        c_tail = tape.tail_sum_ac / tape.tail_sum_a
        t_da = (tc - c_tail) @ w_c - w_bg / (1.0 - ta)
    else:
        t_da = np.zeros(len(ta))
    t_dc = ta[:, None] * w_c[None, :]
    return (d_alpha, d_col), (t_da, t_dc)


# ---------------------------------------------------------------------------
# Image gradient -> splat parameters
# ---------------------------------------------------------------------------


def quat_backward(q, d_R):
    """Gradient w.r.t. a raw (unnormalized) quaternion from ``dL/dR``."""
    q = np.asarray(q, float)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / norm
    w, x, y, z = u[..., 0], u[..., 1], u[..., 2], u[..., 3]
    G = d_R
    dw = 2 * (-z * G[..., 0, 1] + y * G[..., 0, 2] + z * G[..., 1, 0] - x * G[..., 1, 2]
              - y * G[..., 2, 0] + x * G[..., 2, 1])
    dx = 2 * (y * G[..., 0, 1] + z * G[..., 0, 2] + y * G[..., 1, 0] - 2 * x * G[..., 1, 1]
              - w * G[..., 1, 2] + z * G[..., 2, 0] + w * G[..., 2, 1] - 2 * x * G[..., 2, 2])
    dy = 2 * (-2 * y * G[..., 0, 0] + x * G[..., 0, 1] + w * G[..., 0, 2] + x * G[..., 1, 0]
              + z * G[..., 1, 2] - w * G[..., 2, 0] + z * G[..., 2, 1] - 2 * y * G[..., 2, 2])
    dz = 2 * (-2 * z * G[..., 0, 0] - w * G[..., 0, 1] + x * G[..., 0, 2] + w * G[..., 1, 0]
              - 2 * z * G[..., 1, 1] + y * G[..., 1, 2] + x * G[..., 2, 0] + y * G[..., 2, 1])
    du = np.stack([dw, dx, dy, dz], -1)
    return (du - u * np.sum(du * u, -1, keepdims=True)) / norm


def backward_splat(raw: cm.RawSplat, baked: cm.BakedSplat, cam: cm.Camera,
                   d_T_prime, d_rgb, d_opacity) -> SplatGrads:
    """Chain per-splat ``dL/dT'``, ``dL/drgb`` and ``dL/dopacity`` to raw parameters."""
    A = cam.full_projection()
    dT = np.einsum("ji,njk->nik", A, d_T_prime)  # A^T dT'
    R = baked.tangent_frame
    s = baked.scales
    d_s = np.einsum("nik,nik->nk", dT[:, :3, :3], R)
    d_R = dT[:, :3, :3] * s[:, None, :]
    d_sh, d_mean_dir = splat_colors_backward(baked, cam, d_rgb)
    sig = cm.sigmoid(raw.opacity_logit)
    d_logit = np.where(sig < cm.OPACITY_CLAMP, d_opacity * sig * (1.0 - sig), 0.0)
    return SplatGrads(
        d_mean=dT[:, :3, 3] + d_mean_dir,
        d_rot=quat_backward(raw.rot, d_R),
        d_log_scales=d_s * s,
        d_opacity_logit=d_logit,
        d_sh=d_sh,
    )


def backward_context(ctx: RenderContext, raw: cm.RawSplat, baked: cm.BakedSplat, d_image) -> SplatGrads:
    """Gradients of ``sum(d_image * image)`` for a prepared render."""
    cfg, tl, a = ctx.config, ctx.tiles, ctx.arrays
    n_inst = len(tl.tile_idx)
    g = np.zeros((n_inst, kernels.GRAD_W), dtype=cfg.dtype)
    dimg = np.ascontiguousarray(d_image, dtype=cfg.dtype).reshape(ctx.sx.shape + (3,))
    common = (tl.tile_start, tl.tile_idx, tl.tiles_x, tl.tile_size, ctx.sx, ctx.sy)
    mode = cfg.mode
    if mode in (cm.BlendMode.HYBRID, cm.BlendMode.PURE_OIT):
        use_keyz = cfg.depth_sort_key is cm.DepthKey.MEAN_VIEW_Z
        kernels.hybrid_backward(a["tp"], *ctx.kernel_args(), use_keyz, *common, cfg.effective_K, cfg.use_tail,
                                cfg.early_stop, a["bg"], a["cst"], dimg, g)
    elif mode in (cm.BlendMode.FULL_SORT, cm.BlendMode.GLOBAL_MEAN_SORT):
        if cfg.early_stop:
            raise cm.ConfigError("early_stop has no backward pass in sorted modes")
        per_pixel = mode is cm.BlendMode.FULL_SORT and cfg.depth_sort_key is cm.DepthKey.MAX_CONTRIBUTION
        kernels.sorted_backward(a["tp"], *ctx.kernel_args(), per_pixel, *common, a["bg"], a["cst"], dimg, g)
    else:
        raise cm.ConfigError(f"no backward pass for mode {mode.value}")

    n_kept = len(ctx.pre.ids)
    per_splat = np.zeros((n_kept, kernels.GRAD_W))
    np.add.at(per_splat, tl.tile_idx, g.astype(np.float64))
    out = SplatGrads.zeros(ctx.pre.n_total)
    if n_kept == 0:
        return out
    ids = ctx.pre.ids
    part = backward_splat(raw.subset(ids), baked.subset(ids), ctx.cam,
                          per_splat[:, :16].reshape(-1, 4, 4), per_splat[:, 16:19], per_splat[:, 19])
    for name in GROUPS:
        out.group(name)[ids] = part.group(name)
    return out


def render_and_backward(raw: cm.RawSplat, cam: cm.Camera, config: cm.RenderConfig, loss_fn):
    """Render, evaluate ``loss_fn(image) -> (loss, d_image)`` and backpropagate.

    Returns ``(loss, image, grads)``.
    """
    baked = cm.bake(raw)
    ctx = prepare(baked, cam, config)
    img, _ = blend(ctx)
    img = img.astype(np.float64)
    loss, d_image = loss_fn(img)
    return loss, img, backward_context(ctx, raw, baked, d_image)


def backward(raw: cm.RawSplat, cam: cm.Camera, config: cm.RenderConfig, d_image) -> SplatGrads:
    """Gradients of ``sum(d_image * render(raw))`` w.r.t. every raw parameter."""
    baked = cm.bake(raw)
    return backward_context(prepare(baked, cam, config), raw, baked, d_image)


# ---------------------------------------------------------------------------
# Finite-difference check
# ---------------------------------------------------------------------------


def membership(raw: cm.RawSplat, cam: cm.Camera, config: cm.RenderConfig):
    """Discrete state of a render: everything the analytic gradient holds fixed.

    Per pixel and kept splat: skip / tail-eligible / core-eligible / clamped
    class and the depth rank among core-eligible fragments; per splat: the
    cull set and the color and opacity clamps.
    """
    baked = cm.bake(raw)
    pre = preprocess(baked, cam, config)
    sx, sy = pixel_centers(cam)
    xs, ys = sx.ravel(), sy.ravel()
    tp = pre.T_prime
    a = tp[:, None, 0, :] - xs[None, :, None] * tp[:, None, 3, :]
    b = tp[:, None, 1, :] - ys[None, :, None] * tp[:, None, 3, :]
    line = cm.pluecker_from_planes(a, b, check=False)
    rho2 = cm.rho_squared(line)
    alpha = np.where(np.isfinite(rho2), pre.opacity[:, None] * np.exp(-0.5 * np.where(np.isfinite(rho2), rho2, 0.0)), 0.0)
    cls = (alpha >= config.tau_alpha).astype(np.int8)
    cls += alpha >= config.tau_K
    cls += alpha >= cm.OPACITY_CLAMP
    if config.depth_sort_key is cm.DepthKey.MEAN_VIEW_Z:
        depth = np.broadcast_to(pre.mean_z[:, None], alpha.shape)
    else:
        _, depth = cm.max_contribution_depth(line, pre.MT[:, None])
    depth = np.where(cls >= 1, depth, np.inf)
    rank = np.argsort(depth, axis=0, kind="stable")
    raw_rgb = np.einsum("nk,nkc->nc", sh_basis(view_dirs(baked.mean, cam.position)), baked.sh) + SH_OFFSET
    return (pre.keep.tobytes() + cls.tobytes() + rank.tobytes()
            + (raw_rgb > 0).tobytes() + (cm.sigmoid(raw.opacity_logit) < cm.OPACITY_CLAMP).tobytes())


@dataclass
class GradcheckReport:
    max_rel_err: dict  # group -> max relative error
    n_params: int
    n_jittered: int
    n_unresolved: int
    tolerance: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values()) if self.max_rel_err else 0.0

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance

    def to_text(self) -> str:
        lines = [f"max_rel_err.{k}={v:.3e}" for k, v in self.max_rel_err.items()]
        lines += [f"n_params={self.n_params}", f"n_jittered={self.n_jittered}",
                  f"n_unresolved={self.n_unresolved}", f"tolerance={self.tolerance:g}",
                  f"passed={int(self.passed)}"]
        return "\n".join(lines)


def relative_errors(analytic, numeric, floor_frac=1e-3):
    """``|a - n| / max(|a|, |n|, floor)``, floor a fraction of the group's largest gradient."""
    analytic = np.asarray(analytic, float).ravel()
    numeric = np.asarray(numeric, float).ravel()
    if analytic.size == 0:
        return analytic
    floor = floor_frac * max(np.max(np.abs(numeric)), np.max(np.abs(analytic))) + 1e-300
    den = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / den


_JITTER = (1.0, 0.37, 2.3, 0.13, 0.051)


def gradcheck(raw: cm.RawSplat, cam: cm.Camera, config: cm.RenderConfig | None = None,
              tolerance=None, eps=1e-6, seed=0, groups=GROUPS, floor_frac=1e-3) -> GradcheckReport:
    """Compare analytic gradients of a random linear image loss with central differences.

    The analytic pass runs at the config's precision; the differences are
    always taken with the 64-bit renderer. A step whose ``+eps`` or ``-eps``
    evaluation changes :func:`membership` is retried with a jittered step;
    parameters that never yield a clean step are left out and counted.
    """
    config = config or cm.RenderConfig()
    if tolerance is None:
        tolerance = 1e-6 if config.precision == "float64" else 1e-3
    rng = np.random.default_rng(seed)
    weights = rng.uniform(-1.0, 1.0, (cam.height, cam.width, 3))
    analytic = backward(raw, cam, config, weights)
    cfg64 = config.replace(precision="float64")

    def image(r):
        return render(r, cam, cfg64).image

    base_sig = membership(raw, cam, cfg64)
    errors = {}
    n_params = n_jit = n_bad = 0
    for name in groups:
        values = getattr(raw, name)
        grad_a = analytic.group(name)
        num = []
        ana = []
        for idx in np.ndindex(values.shape):
            n_params += 1
            h0 = eps * max(1.0, abs(float(values[idx])))
            for tries, jit in enumerate(_JITTER):
                h = h0 * jit
                plus, minus = raw.copy(), raw.copy()
                getattr(plus, name)[idx] += h
                getattr(minus, name)[idx] -= h
                if membership(plus, cam, cfg64) == base_sig and membership(minus, cam, cfg64) == base_sig:
                    # differencing the images first keeps the summation round-off out
                    num.append(float(np.sum(weights * (image(plus) - image(minus)))) / (2 * h))
                    ana.append(grad_a[idx])
                    n_jit += tries > 0
                    break
            else:
                n_bad += 1
        errors[name] = float(np.max(relative_errors(ana, num, floor_frac))) if num else 0.0
    return GradcheckReport(errors, n_params, n_jit, n_bad, float(tolerance))
