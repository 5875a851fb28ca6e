"""Degree-3 real spherical harmonics for view-dependent color.

Basis ordering and signs follow the 3DGS convention (band ``l`` then
``m = -l..l``, Condon-Shortley phase), so coefficients from externally trained
scenes evaluate to the same colors.
"""
from __future__ import annotations

import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
      0.3731763325901154, -0.4570457994644658, 1.445305721320277,
      -0.5900435899266435)

SH_OFFSET = 0.5


def sh_basis(dirs):
    """All 16 basis functions at unit direction(s) ``(..., 3)`` -> ``(..., 16)``."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    return np.stack([
        np.full_like(x, C0),
        -C1 * y,
        C1 * z,
        -C1 * x,
        C2[0] * x * y,
        C2[1] * y * z,
        C2[2] * (2 * zz - xx - yy),
        C2[3] * x * z,
        C2[4] * (xx - yy),
        C3[0] * y * (3 * xx - yy),
        C3[1] * x * y * z,
        C3[2] * y * (4 * zz - xx - yy),
        C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
        C3[4] * x * (4 * zz - xx - yy),
        C3[5] * z * (xx - yy),
        C3[6] * x * (xx - 3 * yy),
    ], axis=-1)


def sh_basis_jacobian(dirs):
    """Partial derivatives of each basis polynomial, ``(..., 16, 3)`` (d/dx, d/dy, d/dz)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    zero = np.zeros_like(x)
    rows = [
        (zero, zero, zero),
        (zero, np.full_like(x, -C1), zero),
        (zero, zero, np.full_like(x, C1)),
        (np.full_like(x, -C1), zero, zero),
        (C2[0] * y, C2[0] * x, zero),
        (zero, C2[1] * z, C2[1] * y),
        (-2 * C2[2] * x, -2 * C2[2] * y, 4 * C2[2] * z),
        (C2[3] * z, zero, C2[3] * x),
        (2 * C2[4] * x, -2 * C2[4] * y, zero),
        (6 * C3[0] * x * y, C3[0] * (3 * xx - 3 * yy), zero),
        (C3[1] * y * z, C3[1] * x * z, C3[1] * x * y),
        (-2 * C3[2] * x * y, C3[2] * (4 * zz - xx - 3 * yy), 8 * C3[2] * y * z),
        (-6 * C3[3] * x * z, -6 * C3[3] * y * z, C3[3] * (6 * zz - 3 * xx - 3 * yy)),
        (C3[4] * (4 * zz - 3 * xx - yy), -2 * C3[4] * x * y, 8 * C3[4] * x * z),
        (2 * C3[5] * x * z, -2 * C3[5] * y * z, C3[5] * (xx - yy)),
        (C3[6] * (3 * xx - 3 * yy), -6 * C3[6] * x * y, zero),
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def eval_sh(coeffs, dirs):
    """RGB color ``max(sum_k coeffs_k Y_k(dir) + 0.5, 0)``.

    ``coeffs`` is ``(..., 16, 3)`` (or flat 48), ``dirs`` unit vectors ``(..., 3)``.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape[-1] == 48:
        coeffs = coeffs.reshape(coeffs.shape[:-1] + (16, 3))
    raw = np.einsum("...k,...kc->...c", sh_basis(dirs), coeffs) + SH_OFFSET
    return np.maximum(raw, 0.0)


def view_dirs(means, cam_pos):
    """Unit directions from the camera center to each splat mean."""
    v = np.asarray(means, dtype=np.float64) - np.asarray(cam_pos, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


def splat_colors(baked, cam):
    """Per-splat RGB for one camera view."""
    return eval_sh(baked.sh, view_dirs(baked.mean, cam.position))


def splat_colors_backward(baked, cam, d_rgb):
    """Gradients of the per-splat colors w.r.t. SH coefficients and means.

    Returns ``(d_sh (N,16,3), d_mean (N,3))``; channels clamped at zero get
    no gradient.
    """
    v = np.asarray(baked.mean, np.float64) - cam.position
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    n = np.where(n > 0, n, 1.0)
    dirs = v / n
    Y = sh_basis(dirs)
    raw = np.einsum("nk,nkc->nc", Y, baked.sh) + SH_OFFSET
    g = np.where(raw > 0, d_rgb, 0.0)
    d_sh = Y[:, :, None] * g[:, None, :]
    dY = np.einsum("nkc,nc->nk", baked.sh, g)
    d_dir = np.einsum("nk,nkj->nj", dY, sh_basis_jacobian(dirs))
    # d(v/|v|)/dv = (I - dir dir^T)/|v|
    d_mean = (d_dir - dirs * np.sum(d_dir * dirs, -1, keepdims=True)) / n
    return d_sh, d_mean
