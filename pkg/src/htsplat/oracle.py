"""Reference implementations used to cross-check the renderer and to reproduce
baseline behaviour.

Each oracle takes a different algorithmic route from the production path:
explicit matrix inversion instead of plane transport, line search instead of
the closed-form closest point, full sorts instead of the K-core, and the
affine (EWA) projection of 3DGS instead of per-ray evaluation.
"""
from __future__ import annotations

import enum
import math

import numpy as np

from . import core_math as cm

COND_LIMIT = 1e6
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class OracleMode(str, enum.Enum):
    INVERSE_TRANSFORM_RHO = "inverse_transform_rho"
    RAY_SEARCH_MAX = "ray_search_max"
    FULL_SORT_BLEND = "full_sort_blend"
    GLOBAL_MEAN_SORT_BLEND = "global_mean_sort_blend"
    PURE_OIT_BLEND = "pure_oit_blend"
    AFFINE_PROJECTION = "affine_projection"


# ---------------------------------------------------------------------------
# Ray evaluation by explicit inversion
# ---------------------------------------------------------------------------


def splat_condition(splat: cm.BakedSplat):
    """2-norm condition number of each splat's ``T`` (inf for singular)."""
    T = cm.splat_matrix(splat)
    sv = np.linalg.svd(T, compute_uv=False)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(sv[..., -1] > 0, sv[..., 0] / sv[..., -1], np.inf)


def rho2_by_inverse(splat: cm.BakedSplat, cam: cm.Camera, xs, ys):
    """Squared splat-space distance of the pixel ray, via ``inv(V P M T)``.

    Two screen points on the ray (screen depth 0 and 1) are mapped back into
    splat space and the origin's distance to the line through them is taken.
    Returns ``(rho2, unstable)``; unstable entries (``cond(T) >= 1e6``) are NaN.
    """
    T = cm.splat_matrix(splat)
    cond = splat_condition(splat)
    unstable = ~(cond < COND_LIMIT)
    Tp = cam.full_projection() @ T
    xs, ys = np.broadcast_arrays(np.asarray(xs, float), np.asarray(ys, float))
    shape = np.broadcast_shapes(Tp.shape[:-2], xs.shape)
    Tp = np.broadcast_to(Tp, shape + (4, 4)).copy()
    unstable = np.broadcast_to(unstable, shape).copy()
    xs, ys = np.broadcast_to(xs, shape), np.broadcast_to(ys, shape)
    Tp[unstable] = np.eye(4)
    inv = np.linalg.inv(Tp)
    p0 = np.stack([xs, ys, np.zeros(shape), np.ones(shape)], -1)
    p1 = np.stack([xs, ys, np.ones(shape), np.ones(shape)], -1)
    q0 = np.einsum("...ij,...j->...i", inv, p0)
    q1 = np.einsum("...ij,...j->...i", inv, p1)
    q0 = q0[..., :3] / q0[..., 3:]
    q1 = q1[..., :3] / q1[..., 3:]
    u = q1 - q0
    t = -np.sum(q0 * u, -1) / np.sum(u * u, -1)
    foot = q0 + t[..., None] * u
    rho2 = np.sum(foot * foot, -1)
    rho2 = np.where(unstable, np.nan, rho2)
    return rho2, unstable


# ---------------------------------------------------------------------------
# Brute-force search along a world ray
# ---------------------------------------------------------------------------


def mahalanobis2(splat: cm.BakedSplat, x):
    """``(x - mu)^T Sigma^{-1} (x - mu)`` for a single non-degenerate splat."""
    R = np.asarray(splat.tangent_frame)
    local = (np.asarray(x) - splat.mean) @ R  # coordinates along t_u, t_v, t_w
    return np.sum((local / splat.scales) ** 2, -1)


def golden_section_max(f, lo, hi, tol=1e-12, max_iter=400):
    """Maximizer of a unimodal ``f`` on ``[lo, hi]``."""
    a, b = float(lo), float(hi)
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if abs(b - a) <= tol * max(1.0, abs(hi - lo)):
            break
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def search_bracket(splat: cm.BakedSplat, origin, direction, tau_alpha=1 / 255):
    """Ray-parameter interval covering the splat's support ellipsoid."""
    rho_c = max(cm.splat_cutoff(float(splat.opacity), tau_alpha), 9.0)
    r = math.sqrt(rho_c) * float(np.max(splat.scales)) * 1.5 + 1e-9
    tc = float(np.dot(np.asarray(splat.mean) - origin, direction))
    return tc - r, tc + r


def max_alpha_by_search(splat: cm.BakedSplat, origin, direction, bracket=None):
    """``(t*, alpha*)`` maximizing the Gaussian along ``origin + t * direction``.

    Maximizes ``-rho^2 / 2`` (the log of alpha) so the search stays well posed
    even where alpha underflows.
    """
    origin = np.asarray(origin, float)
    direction = np.asarray(direction, float)
    lo, hi = bracket if bracket is not None else search_bracket(splat, origin, direction)
    t = golden_section_max(lambda t: -mahalanobis2(splat, origin + t * direction), lo, hi)
    rho2 = mahalanobis2(splat, origin + t * direction)
    return t, min(float(splat.opacity) * math.exp(-0.5 * rho2), cm.OPACITY_CLAMP)


# ---------------------------------------------------------------------------
# Blending oracles
# ---------------------------------------------------------------------------


def _composite(alphas, colors, bg):
    color = np.zeros(3)
    T = 1.0
    for a, c in zip(alphas, colors):
        color += a * T * np.asarray(c, float)
        T *= 1.0 - a
    return color + T * np.asarray(bg, float)


def blend_exact(depths, alphas, colors, bg=(0.0, 0.0, 0.0)):
    """Standard alpha blending after a full per-pixel sort by fragment depth."""
    order = np.argsort(np.asarray(depths, float), kind="stable")
    return _composite(np.asarray(alphas, float)[order], np.asarray(colors, float).reshape(-1, 3)[order], bg)


def blend_3dgs(mean_z, alphas, colors, bg=(0.0, 0.0, 0.0)):
    """Alpha blending ordered by one key per splat (the mean's view z)."""
    return blend_exact(mean_z, alphas, colors, bg)


def blend_oit(alphas, colors, bg=(0.0, 0.0, 0.0)):
    """Fully order-independent blend: weighted-average color over ``prod(1 - alpha)``."""
    a = np.asarray(alphas, float)
    if a.size == 0 or a.sum() == 0:
        return np.asarray(bg, float).copy()
    c = np.asarray(colors, float).reshape(-1, 3)
    trans = np.prod(1.0 - a)
    return (1.0 - trans) * (a @ c) / a.sum() + trans * np.asarray(bg, float)


# ---------------------------------------------------------------------------
# Affine (EWA) projection as in 3DGS
# ---------------------------------------------------------------------------


def project_affine(splat: cm.BakedSplat, cam: cm.Camera):
    """Screen-space mean and 2x2 covariance from the local affine approximation.

    Returns ``(mean2d, cov2d, view_z, valid)``; splats at or behind the near
    plane are invalid. No low-pass dilation is added.
    """
    R = np.asarray(splat.tangent_frame)
    L = R * np.asarray(splat.scales)[..., None, :]
    cov3 = L @ np.swapaxes(L, -1, -2)
    W = cam.rotation
    pv = np.asarray(splat.mean) @ W.T + cam.world_to_view[:3, 3]
    x, y, z = pv[..., 0], pv[..., 1], pv[..., 2]
    valid = z > cam.near
    zs = np.where(valid, z, 1.0)
    J = np.zeros(pv.shape[:-1] + (2, 3))
    J[..., 0, 0] = cam.fx / zs
    J[..., 0, 2] = -cam.fx * x / zs ** 2
    J[..., 1, 1] = cam.fy / zs
    J[..., 1, 2] = -cam.fy * y / zs ** 2
    JW = J @ W
    cov2 = JW @ cov3 @ np.swapaxes(JW, -1, -2)
    mean2 = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], -1)
    return mean2, cov2, z, valid


def affine_alpha(mean2d, cov2d, opacity, xs, ys):
    """Alpha of the projected 2D Gaussian at screen point(s)."""
    d = np.stack(np.broadcast_arrays(np.asarray(xs, float) - mean2d[..., 0],
                                     np.asarray(ys, float) - mean2d[..., 1]), -1)
    inv = np.linalg.inv(cov2d)
    q = np.einsum("...i,...ij,...j->...", d, inv, d)
    return np.minimum(np.asarray(opacity) * np.exp(-0.5 * q), cm.OPACITY_CLAMP)
