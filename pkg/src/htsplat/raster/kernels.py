"""Compiled tile kernels (numba) for the forward and backward passes.

All kernels are dtype-generic: every floating constant comes from the ``cst``
array built by :func:`make_constants`, so passing float32 inputs keeps the
arithmetic in float32. Parallelism is over tiles only; each pixel walks its
tile list sequentially, so results are identical for any thread count.

Per-splat inputs are compacted arrays of surviving splats:

* ``lin``  ``(n, 18)``   pixel-line coefficients (see ``pixel_line_coefficients``)
* ``tp``   ``(n, 4, 4)`` splat-to-screen matrix ``T'`` (backward only)
* ``mtz``  ``(n, 4)``    third row of ``M T`` (view-space z)
* ``rgb``  ``(n, 3)``    view-dependent color
* ``opac`` ``(n,)``      opacity
* ``keyz`` ``(n,)``      view z of the mean (global sort key)

Tiles are a CSR list: tile ``t`` owns ``tile_idx[tile_start[t]:tile_start[t+1]]``.
``sx``/``sy`` ``(H, W)`` hold the screen position each output pixel samples
(pixel centers for ordinary renders).
Backward kernels write per *instance* (tile list entry) gradient rows of
width ``GRAD_W``: ``dT'`` (16, row-major), ``drgb`` (3), ``dopacity`` (1).
"""
from __future__ import annotations

import os

import numba
import numpy as np
from numba import njit, prange

from ..core_math import EPS_DEN, OPACITY_CLAMP

# skip numba's TBB probe (and its warning) unless a layer was chosen explicitly
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "omp"

GRAD_W = 20
EARLY_STOP_T = 1e-4

# indices into the constants array
_HALF, _ONE, _CLAMP, _TAU_A, _TAU_K, _EPS, _ESTOP, _ZERO, _TWO = range(9)


def make_constants(dtype, tau_alpha, tau_K):
    return np.array([0.5, 1.0, OPACITY_CLAMP, tau_alpha, tau_K, EPS_DEN, EARLY_STOP_T, 0.0, 2.0],
                    dtype=dtype)


@njit(cache=True)
def _planes(tp, s, xs, ys):
    a0 = tp[s, 0, 0] - xs * tp[s, 3, 0]
    a1 = tp[s, 0, 1] - xs * tp[s, 3, 1]
    a2 = tp[s, 0, 2] - xs * tp[s, 3, 2]
    aw = tp[s, 0, 3] - xs * tp[s, 3, 3]
    b0 = tp[s, 1, 0] - ys * tp[s, 3, 0]
    b1 = tp[s, 1, 1] - ys * tp[s, 3, 1]
    b2 = tp[s, 1, 2] - ys * tp[s, 3, 2]
    bw = tp[s, 1, 3] - ys * tp[s, 3, 3]
    return a0, a1, a2, aw, b0, b1, b2, bw


@njit(cache=True)
def _line_lin(lin, s, xs, ys):
    d0 = lin[s, 0] + xs * lin[s, 3] + ys * lin[s, 6]
    d1 = lin[s, 1] + xs * lin[s, 4] + ys * lin[s, 7]
    d2 = lin[s, 2] + xs * lin[s, 5] + ys * lin[s, 8]
    m0 = lin[s, 9] + xs * lin[s, 12] + ys * lin[s, 15]
    m1 = lin[s, 10] + xs * lin[s, 13] + ys * lin[s, 16]
    m2 = lin[s, 11] + xs * lin[s, 14] + ys * lin[s, 17]
    return d0, d1, d2, m0, m1, m2


@njit(cache=True)
def _alpha_depth(lin, mtz, opac, s, xs, ys, cst, depth_from):
    """Alpha and, when ``alpha >= depth_from``, the depth, sharing one line setup."""
    d0, d1, d2, m0, m1, m2 = _line_lin(lin, s, xs, ys)
    dd = d0 * d0 + d1 * d1 + d2 * d2
    if dd < cst[_EPS]:
        return cst[_ZERO], cst[_ZERO]
    inv = cst[_ONE] / dd
    rho2 = (m0 * m0 + m1 * m1 + m2 * m2) * inv
    a = opac[s] * np.exp(-cst[_HALF] * rho2)
    if a > cst[_CLAMP]:
        a = cst[_CLAMP]
    if a < depth_from:
        return a, cst[_ZERO]
    x0 = (d1 * m2 - d2 * m1) * inv
    x1 = (d2 * m0 - d0 * m2) * inv
    x2 = (d0 * m1 - d1 * m0) * inv
    return a, mtz[s, 0] * x0 + mtz[s, 1] * x1 + mtz[s, 2] * x2 + mtz[s, 3]


@njit(cache=True)
def _alpha(lin, opac, s, xs, ys, cst):
    """Alpha of splat ``s`` at screen point ``(xs, ys)``; 0 on a miss (bitwise equal to ``_alpha_depth``)."""
    return _alpha_depth(lin, lin, opac, s, xs, ys, cst, cst[_TWO])[0]


@njit(cache=True)
def _alpha_backward(g, j, tp, lin, opac, s, xs, ys, dalpha, cst):
    """Chain ``dL/dalpha`` of one fragment into ``dL/dT'`` and ``dL/dopacity``."""
    a0, a1, a2, aw, b0, b1, b2, bw = _planes(tp, s, xs, ys)
    d0, d1, d2, m0, m1, m2 = _line_lin(lin, s, xs, ys)
    dd = d0 * d0 + d1 * d1 + d2 * d2
    if dd < cst[_EPS]:
        return
    rho2 = (m0 * m0 + m1 * m1 + m2 * m2) / dd
    E = np.exp(-cst[_HALF] * rho2)
    alpha = opac[s] * E
    if alpha > cst[_CLAMP]:
        return
    g[j, 19] += dalpha * E
    drho2 = -cst[_HALF] * alpha * dalpha
    # rho2 = |m|^2 / |d|^2
    km = cst[_TWO] * drho2 / dd
    kd = -km * rho2
    gm0, gm1, gm2 = km * m0, km * m1, km * m2
    gd0, gd1, gd2 = kd * d0, kd * d1, kd * d2
    # d = n_a x n_b ; m = a_w n_b - b_w n_a
    ga0 = b1 * gd2 - b2 * gd1 - bw * gm0
    ga1 = b2 * gd0 - b0 * gd2 - bw * gm1
    ga2 = b0 * gd1 - b1 * gd0 - bw * gm2
    gaw = gm0 * b0 + gm1 * b1 + gm2 * b2
    gb0 = gd1 * a2 - gd2 * a1 + aw * gm0
    gb1 = gd2 * a0 - gd0 * a2 + aw * gm1
    gb2 = gd0 * a1 - gd1 * a0 + aw * gm2
    gbw = -(gm0 * a0 + gm1 * a1 + gm2 * a2)
    # a_k = T'[0,k] - xs T'[3,k] ; b_k = T'[1,k] - ys T'[3,k]
    g[j, 0] += ga0
    g[j, 1] += ga1
    g[j, 2] += ga2
    g[j, 3] += gaw
    g[j, 4] += gb0
    g[j, 5] += gb1
    g[j, 6] += gb2
    g[j, 7] += gbw
    g[j, 12] -= xs * ga0 + ys * gb0
    g[j, 13] -= xs * ga1 + ys * gb1
    g[j, 14] -= xs * ga2 + ys * gb2
    g[j, 15] -= xs * gaw + ys * gbw


@njit(cache=True)
def _core_before(da, sa, db, sb):
    """True if core key ``(da, sa)`` sorts strictly before ``(db, sb)``."""
    return da < db or (da == db and sa < sb)


@njit(parallel=True, cache=True)
def hybrid_forward(lin, mtz, rgb, opac, keyz, use_keyz, tile_start, tile_idx, tiles_x, ts,
                   sx, sy, K, use_tail, early_stop, bg, cst, out, trans_out):
    H = sx.shape[0]
    W = sx.shape[1]
    n_tiles = tile_start.shape[0] - 1
    zero = cst[_ZERO]
    one = cst[_ONE]
    depth_from = cst[_TAU_K] if (K > 0 and not use_keyz) else cst[_TWO]
    for t in prange(n_tiles):
        Kc = max(K, 1)
        core_d = np.zeros(Kc, dtype=sx.dtype)
        core_a = np.zeros(Kc, dtype=sx.dtype)
        core_s = np.zeros(Kc, dtype=np.int64)
        x0 = (t % tiles_x) * ts
        y0 = (t // tiles_x) * ts
        lo = tile_start[t]
        hi = tile_start[t + 1]
        for py in range(y0, min(y0 + ts, H)):
            for px in range(x0, min(x0 + ts, W)):
                xs = sx[py, px]
                ys = sy[py, px]
                n = 0
                t_r = zero
                t_g = zero
                t_b = zero
                t_a = zero
                t_tr = one
                for j in range(lo, hi):
                    s = tile_idx[j]
                    alpha, depth = _alpha_depth(lin, mtz, opac, s, xs, ys, cst, depth_from)
                    if alpha < cst[_TAU_A]:
                        continue
                    to_tail = -1
                    if K > 0 and alpha >= cst[_TAU_K]:
                        if use_keyz:
                            depth = keyz[s]
                        if n == K and not _core_before(depth, s, core_d[n - 1], core_s[n - 1]):
                            to_tail = s
                            ta = alpha
                        else:
                            if n == K:
                                to_tail = core_s[n - 1]
                                ta = core_a[n - 1]
                                n -= 1
                            pos = n
                            while pos > 0 and _core_before(depth, s, core_d[pos - 1], core_s[pos - 1]):
                                core_d[pos] = core_d[pos - 1]
                                core_a[pos] = core_a[pos - 1]
                                core_s[pos] = core_s[pos - 1]
                                pos -= 1
                            core_d[pos] = depth
                            core_a[pos] = alpha
                            core_s[pos] = s
                            n += 1
                    else:
                        to_tail = s
                        ta = alpha
                    if to_tail >= 0 and use_tail:
                        t_r += ta * rgb[to_tail, 0]
                        t_g += ta * rgb[to_tail, 1]
                        t_b += ta * rgb[to_tail, 2]
                        t_a += ta
                        t_tr *= one - ta
                    if early_stop and n == K and K > 0:
                        tc = one
                        for i in range(n):
                            tc *= one - core_a[i]
                        if tc < cst[_ESTOP]:
                            break
                c_r = zero
                c_g = zero
                c_b = zero
                T = one
                for i in range(n):
                    w = core_a[i] * T
                    s = core_s[i]
                    c_r += w * rgb[s, 0]
                    c_g += w * rgb[s, 1]
                    c_b += w * rgb[s, 2]
                    T *= one - core_a[i]
                if use_tail and t_a > zero:
                    f = (one - t_tr) / t_a
                    c_r += T * (f * t_r + t_tr * bg[0])
                    c_g += T * (f * t_g + t_tr * bg[1])
                    c_b += T * (f * t_b + t_tr * bg[2])
                    trans_out[py, px] = T * t_tr
                else:
                    c_r += T * bg[0]
                    c_g += T * bg[1]
                    c_b += T * bg[2]
                    trans_out[py, px] = T
                out[py, px, 0] = c_r
                out[py, px, 1] = c_g
                out[py, px, 2] = c_b


@njit(parallel=True, cache=True)
def hybrid_backward(tp, lin, mtz, rgb, opac, keyz, use_keyz, tile_start, tile_idx, tiles_x, ts,
                    sx, sy, K, use_tail, early_stop, bg, cst, dimg, g):
    """Gradients of ``sum(dimg * image)`` for the hybrid blend.

    Each pixel replays its forward pass to rebuild the core (tracking tile-list
    instances) and the tail aggregates, then walks the tile list again to hand
    out per-fragment ``dL/dalpha`` and ``dL/dcolor``. Core/tail membership is
    frozen from the forward pass.
    """
    H = sx.shape[0]
    W = sx.shape[1]
    n_tiles = tile_start.shape[0] - 1
    zero = cst[_ZERO]
    one = cst[_ONE]
    depth_from = cst[_TAU_K] if (K > 0 and not use_keyz) else cst[_TWO]
    for t in prange(n_tiles):
        Kc = max(K, 1)
        core_d = np.zeros(Kc, dtype=sx.dtype)
        core_a = np.zeros(Kc, dtype=sx.dtype)
        core_s = np.zeros(Kc, dtype=np.int64)
        core_j = np.zeros(Kc, dtype=np.int64)
        core_ga = np.zeros(Kc, dtype=sx.dtype)
        core_T = np.zeros(Kc, dtype=sx.dtype)
        core_in = np.zeros(tile_start[t + 1] - tile_start[t] + 1, dtype=np.bool_)
        x0 = (t % tiles_x) * ts
        y0 = (t // tiles_x) * ts
        lo = tile_start[t]
        hi = tile_start[t + 1]
        for py in range(y0, min(y0 + ts, H)):
            for px in range(x0, min(x0 + ts, W)):
                xs = sx[py, px]
                ys = sy[py, px]
                gr = dimg[py, px, 0]
                gg = dimg[py, px, 1]
                gb = dimg[py, px, 2]
                n = 0
                t_r = zero
                t_g = zero
                t_b = zero
                t_a = zero
                t_tr = one
                last = hi
                for j in range(lo, hi):
                    s = tile_idx[j]
                    alpha, depth = _alpha_depth(lin, mtz, opac, s, xs, ys, cst, depth_from)
                    if alpha < cst[_TAU_A]:
                        continue
                    to_tail = -1
                    if K > 0 and alpha >= cst[_TAU_K]:
                        if use_keyz:
                            depth = keyz[s]
                        if n == K and not _core_before(depth, s, core_d[n - 1], core_s[n - 1]):
                            to_tail = s
                            ta = alpha
                        else:
                            if n == K:
                                to_tail = core_s[n - 1]
                                ta = core_a[n - 1]
                                n -= 1
                            pos = n
                            while pos > 0 and _core_before(depth, s, core_d[pos - 1], core_s[pos - 1]):
                                core_d[pos] = core_d[pos - 1]
                                core_a[pos] = core_a[pos - 1]
                                core_s[pos] = core_s[pos - 1]
                                core_j[pos] = core_j[pos - 1]
                                pos -= 1
                            core_d[pos] = depth
                            core_a[pos] = alpha
                            core_s[pos] = s
                            core_j[pos] = j
                            n += 1
                    else:
                        to_tail = s
                        ta = alpha
                    if to_tail >= 0 and use_tail:
                        t_r += ta * rgb[to_tail, 0]
                        t_g += ta * rgb[to_tail, 1]
                        t_b += ta * rgb[to_tail, 2]
                        t_a += ta
                        t_tr *= one - ta
                    if early_stop and n == K and K > 0:
                        tc = one
                        for i in range(n):
                            tc *= one - core_a[i]
                        if tc < cst[_ESTOP]:
                            last = j + 1
                            break
                # T_{K+1} and the color behind the core
                T = one
                for i in range(n):
                    core_T[i] = T
                    T *= one - core_a[i]
                has_tail = use_tail and t_a > zero
                if has_tail:
                    f = (one - t_tr) / t_a
                    ct_r = t_r / t_a
                    ct_g = t_g / t_a
                    ct_b = t_b / t_a
                    R_r = f * t_r + t_tr * bg[0]
                    R_g = f * t_g + t_tr * bg[1]
                    R_b = f * t_b + t_tr * bg[2]
                else:
                    R_r = bg[0]
                    R_g = bg[1]
                    R_b = bg[2]
                # core: back-to-front, S = color composited behind entry i
                S_r = T * R_r
                S_g = T * R_g
                S_b = T * R_b
                for i in range(n - 1, -1, -1):
                    a = core_a[i]
                    Ti = core_T[i]
                    s = core_s[i]
                    j = core_j[i]
                    w = a * Ti
                    g[j, 16] += gr * w
                    g[j, 17] += gg * w
                    g[j, 18] += gb * w
                    inv = one / (one - a)
                    core_ga[i] = (gr * (Ti * rgb[s, 0] - S_r * inv)
                                  + gg * (Ti * rgb[s, 1] - S_g * inv)
                                  + gb * (Ti * rgb[s, 2] - S_b * inv))
                    S_r += w * rgb[s, 0]
                    S_g += w * rgb[s, 1]
                    S_b += w * rgb[s, 2]
                for i in range(n):
                    core_in[core_j[i] - lo] = True
                    _alpha_backward(g, core_j[i], tp, lin, opac, core_s[i], xs, ys, core_ga[i], cst)
                if has_tail:
                    w1r = gr * T * (one - t_tr) / t_a
                    w1g = gg * T * (one - t_tr) / t_a
                    w1b = gb * T * (one - t_tr) / t_a
                    wbg = T * t_tr * (gr * (bg[0] - ct_r) + gg * (bg[1] - ct_g) + gb * (bg[2] - ct_b))
                    for j in range(lo, last):
                        if core_in[j - lo]:
                            continue
                        s = tile_idx[j]
                        alpha = _alpha(lin, opac, s, xs, ys, cst)
                        if alpha < cst[_TAU_A]:
                            continue
                        g[j, 16] += w1r * alpha
                        g[j, 17] += w1g * alpha
                        g[j, 18] += w1b * alpha
                        ga = (w1r * (rgb[s, 0] - ct_r) + w1g * (rgb[s, 1] - ct_g)
                              + w1b * (rgb[s, 2] - ct_b) - wbg / (one - alpha))
                        _alpha_backward(g, j, tp, lin, opac, s, xs, ys, ga, cst)
                for i in range(n):
                    core_in[core_j[i] - lo] = False


@njit(cache=True)
def _blend_sorted(order, cnt, buf_a, buf_s, rgb, bg, cst, early_stop):
    zero = cst[_ZERO]
    one = cst[_ONE]
    c_r = zero
    c_g = zero
    c_b = zero
    T = one
    for q in range(cnt):
        i = order[q]
        a = buf_a[i]
        s = buf_s[i]
        w = a * T
        c_r += w * rgb[s, 0]
        c_g += w * rgb[s, 1]
        c_b += w * rgb[s, 2]
        T *= one - a
        if early_stop and T < cst[_ESTOP]:
            break
    return c_r + T * bg[0], c_g + T * bg[1], c_b + T * bg[2], T


@njit(parallel=True, cache=True)
def sorted_forward(lin, mtz, rgb, opac, keyz, per_pixel_sort, tile_start, tile_idx, tiles_x, ts,
                   sx, sy, early_stop, bg, cst, out, trans_out):
    """Exact alpha blending of every fragment in depth order.

    ``per_pixel_sort`` sorts each pixel's fragments by their own
    maximum-contribution depth; otherwise every tile list is ordered once by
    the per-splat key ``keyz`` (global mean-depth sort).
    """
    H = sx.shape[0]
    W = sx.shape[1]
    n_tiles = tile_start.shape[0] - 1
    depth_from = cst[_TAU_A] if per_pixel_sort else cst[_TWO]
    for t in prange(n_tiles):
        lo = tile_start[t]
        hi = tile_start[t + 1]
        cnt_t = hi - lo
        buf_d = np.zeros(cnt_t + 1, dtype=sx.dtype)
        buf_a = np.zeros(cnt_t + 1, dtype=sx.dtype)
        buf_s = np.zeros(cnt_t + 1, dtype=np.int64)
        tile_keys = np.zeros(cnt_t, dtype=sx.dtype)
        for j in range(lo, hi):
            tile_keys[j - lo] = keyz[tile_idx[j]]
        tile_order = np.argsort(tile_keys, kind="mergesort")
        x0 = (t % tiles_x) * ts
        y0 = (t // tiles_x) * ts
        for py in range(y0, min(y0 + ts, H)):
            for px in range(x0, min(x0 + ts, W)):
                xs = sx[py, px]
                ys = sy[py, px]
                cnt = 0
                for q in range(cnt_t):
                    j = lo + (q if per_pixel_sort else tile_order[q])
                    s = tile_idx[j]
                    alpha, depth = _alpha_depth(lin, mtz, opac, s, xs, ys, cst, depth_from)
                    if alpha < cst[_TAU_A]:
                        continue
                    buf_a[cnt] = alpha
                    buf_s[cnt] = s
                    if per_pixel_sort:
                        buf_d[cnt] = depth
                    cnt += 1
                if per_pixel_sort:
                    order = np.argsort(buf_d[:cnt], kind="mergesort")
                else:
                    order = np.arange(cnt)
                r, gcol, b, T = _blend_sorted(order, cnt, buf_a, buf_s, rgb, bg, cst, early_stop)
                out[py, px, 0] = r
                out[py, px, 1] = gcol
                out[py, px, 2] = b
                trans_out[py, px] = T


@njit(parallel=True, cache=True)
def sorted_backward(tp, lin, mtz, rgb, opac, keyz, per_pixel_sort, tile_start, tile_idx, tiles_x, ts,
                    sx, sy, bg, cst, dimg, g):
    H = sx.shape[0]
    W = sx.shape[1]
    n_tiles = tile_start.shape[0] - 1
    one = cst[_ONE]
    depth_from = cst[_TAU_A] if per_pixel_sort else cst[_TWO]
    for t in prange(n_tiles):
        lo = tile_start[t]
        hi = tile_start[t + 1]
        cnt_t = hi - lo
        buf_d = np.zeros(cnt_t + 1, dtype=sx.dtype)
        buf_a = np.zeros(cnt_t + 1, dtype=sx.dtype)
        buf_j = np.zeros(cnt_t + 1, dtype=np.int64)
        buf_T = np.zeros(cnt_t + 1, dtype=sx.dtype)
        tile_keys = np.zeros(cnt_t, dtype=sx.dtype)
        for j in range(lo, hi):
            tile_keys[j - lo] = keyz[tile_idx[j]]
        tile_order = np.argsort(tile_keys, kind="mergesort")
        x0 = (t % tiles_x) * ts
        y0 = (t // tiles_x) * ts
        for py in range(y0, min(y0 + ts, H)):
            for px in range(x0, min(x0 + ts, W)):
                xs = sx[py, px]
                ys = sy[py, px]
                gr = dimg[py, px, 0]
                gg = dimg[py, px, 1]
                gb = dimg[py, px, 2]
                cnt = 0
                for q in range(cnt_t):
                    j = lo + (q if per_pixel_sort else tile_order[q])
                    s = tile_idx[j]
                    alpha, depth = _alpha_depth(lin, mtz, opac, s, xs, ys, cst, depth_from)
                    if alpha < cst[_TAU_A]:
                        continue
                    buf_a[cnt] = alpha
                    buf_j[cnt] = j
                    if per_pixel_sort:
                        buf_d[cnt] = depth
                    cnt += 1
                if per_pixel_sort:
                    order = np.argsort(buf_d[:cnt], kind="mergesort")
                else:
                    order = np.arange(cnt)
                T = one
                for q in range(cnt):
                    buf_T[order[q]] = T
                    T *= one - buf_a[order[q]]
                S_r = T * bg[0]
                S_g = T * bg[1]
                S_b = T * bg[2]
                for q in range(cnt - 1, -1, -1):
                    i = order[q]
                    a = buf_a[i]
                    j = buf_j[i]
                    s = tile_idx[j]
                    Ti = buf_T[i]
                    w = a * Ti
                    g[j, 16] += gr * w
                    g[j, 17] += gg * w
                    g[j, 18] += gb * w
                    inv = one / (one - a)
                    ga = (gr * (Ti * rgb[s, 0] - S_r * inv) + gg * (Ti * rgb[s, 1] - S_g * inv)
                          + gb * (Ti * rgb[s, 2] - S_b * inv))
                    S_r += w * rgb[s, 0]
                    S_g += w * rgb[s, 1]
                    S_b += w * rgb[s, 2]
                    _alpha_backward(g, j, tp, lin, opac, s, xs, ys, ga, cst)


@njit(parallel=True, cache=True)
def affine_forward(mean2d, conic, rgb, opac, keyz, tile_start, tile_idx, tiles_x, ts,
                   sx, sy, early_stop, bg, cst, out, trans_out):
    """3DGS-style blending of projected 2D Gaussians, ordered by mean view z."""
    H = sx.shape[0]
    W = sx.shape[1]
    n_tiles = tile_start.shape[0] - 1
    for t in prange(n_tiles):
        lo = tile_start[t]
        hi = tile_start[t + 1]
        cnt_t = hi - lo
        buf_a = np.zeros(cnt_t + 1, dtype=sx.dtype)
        buf_s = np.zeros(cnt_t + 1, dtype=np.int64)
        tile_keys = np.zeros(cnt_t, dtype=sx.dtype)
        for j in range(lo, hi):
            tile_keys[j - lo] = keyz[tile_idx[j]]
        tile_order = np.argsort(tile_keys, kind="mergesort")
        x0 = (t % tiles_x) * ts
        y0 = (t // tiles_x) * ts
        for py in range(y0, min(y0 + ts, H)):
            for px in range(x0, min(x0 + ts, W)):
                xs = sx[py, px]
                ys = sy[py, px]
                cnt = 0
                for q in range(cnt_t):
                    s = tile_idx[lo + tile_order[q]]
                    dx = xs - mean2d[s, 0]
                    dy = ys - mean2d[s, 1]
                    power = -cst[_HALF] * (conic[s, 0] * dx * dx + conic[s, 2] * dy * dy) - conic[s, 1] * dx * dy
                    alpha = opac[s] * np.exp(power)
                    if alpha > cst[_CLAMP]:
                        alpha = cst[_CLAMP]
                    if alpha < cst[_TAU_A]:
                        continue
                    buf_a[cnt] = alpha
                    buf_s[cnt] = s
                    cnt += 1
                r, gcol, b, T = _blend_sorted(np.arange(cnt), cnt, buf_a, buf_s, rgb, bg, cst, early_stop)
                out[py, px, 0] = r
                out[py, px, 1] = gcol
                out[py, px, 2] = b
                trans_out[py, px] = T


@njit(parallel=True, cache=True)
def count_fragments(lin, opac, tile_start, tile_idx, tiles_x, ts, sx, sy, cst, counts):
    """Per-pixel number of fragments with ``alpha >= tau_alpha`` (depth complexity)."""
    H = sx.shape[0]
    W = sx.shape[1]
    n_tiles = tile_start.shape[0] - 1
    for t in prange(n_tiles):
        x0 = (t % tiles_x) * ts
        y0 = (t // tiles_x) * ts
        for py in range(y0, min(y0 + ts, H)):
            for px in range(x0, min(x0 + ts, W)):
                c = 0
                for j in range(tile_start[t], tile_start[t + 1]):
                    if _alpha(lin, opac, tile_idx[j], sx[py, px], sy[py, px], cst) >= cst[_TAU_A]:
                        c += 1
                counts[py, px] = c
