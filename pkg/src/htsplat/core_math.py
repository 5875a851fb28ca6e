"""Splat and camera types plus the closed-form per-splat / per-pixel math.

Everything here is plain numpy and broadcasts over leading batch dimensions,
so a ``RawSplat`` may hold one splat or a whole scene in struct-of-arrays
form. Nothing in this module inverts a matrix: the screen-space bounds come
from the dual quadric, and ray evaluation transports two pixel planes into
splat space and intersects them as a Pluecker line.

Conventions
-----------
* View space is right-handed, x right, y down, looking down +z.
* ``P`` maps the view frustum to NDC ``[-1, 1]^3`` (near -> -1, far -> +1).
* ``V`` maps NDC x/y to pixels and NDC z to ``[0, 1]``. Pixel ``i`` spans
  ``[i, i + 1)`` and is sampled at its center ``i + 0.5``.
* Quaternions are ``(w, x, y, z)``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

SH_COEFFS = 16
OPACITY_CLAMP = 0.999
EPS_DEN = 1e-24
K_HARD_CAP = 64
MISS = math.inf


class InvalidSplatError(ValueError):
    """Raised for splat parameters that cannot be baked (non-finite, zero quaternion)."""


class RayUndefinedError(ValueError):
    """Raised when two planes are parallel and do not define a line."""


class ConfigError(ValueError):
    """Invalid render or camera configuration."""


# ---------------------------------------------------------------------------
# Splats
# ---------------------------------------------------------------------------


@dataclass
class RawSplat:
    """Learnable, pre-activation splat parameters.

    Arrays carry an optional leading batch axis: ``mean`` is ``(..., 3)``,
    ``rot`` ``(..., 4)``, ``log_scales`` ``(..., 3)``, ``opacity_logit``
    ``(...)`` and ``sh`` ``(..., 16, 3)``.
    """

    mean: np.ndarray
    rot: np.ndarray
    log_scales: np.ndarray
    opacity_logit: np.ndarray
    sh: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.rot = np.asarray(self.rot, dtype=np.float64)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64)
        self.opacity_logit = np.asarray(self.opacity_logit, dtype=np.float64)
        sh = np.asarray(self.sh, dtype=np.float64)
        if sh.shape[-1] == 3 * SH_COEFFS and (sh.ndim < 2 or sh.shape[-2:] != (SH_COEFFS, 3)):
            sh = sh.reshape(sh.shape[:-1] + (SH_COEFFS, 3))
        if sh.shape[-2:] != (SH_COEFFS, 3):
            raise InvalidSplatError(f"sh must hold 48 entries per splat, got shape {sh.shape}")
        self.sh = sh

    def __len__(self):
        return 1 if self.mean.ndim == 1 else self.mean.shape[0]

    def copy(self) -> "RawSplat":
        return RawSplat(self.mean.copy(), self.rot.copy(), self.log_scales.copy(),
                        self.opacity_logit.copy(), self.sh.copy())

    def subset(self, idx) -> "RawSplat":
        return RawSplat(self.mean[idx], self.rot[idx], self.log_scales[idx],
                        self.opacity_logit[idx], self.sh[idx])

    @staticmethod
    def concat(parts) -> "RawSplat":
        parts = [p if p.mean.ndim == 2 else p.subset(np.newaxis) for p in parts]
        return RawSplat(*(np.concatenate([getattr(p, f) for p in parts])
                          for f in ("mean", "rot", "log_scales", "opacity_logit", "sh")))


@dataclass
class BakedSplat:
    """Render-ready splat: activations already applied.

    ``tangent_frame[..., :, j]`` is the tangential axis ``t_j`` (columns of a
    rotation matrix).
    """

    mean: np.ndarray
    tangent_frame: np.ndarray
    scales: np.ndarray
    opacity: np.ndarray
    sh: np.ndarray

    def __len__(self):
        return 1 if self.mean.ndim == 1 else self.mean.shape[0]

    def subset(self, idx) -> "BakedSplat":
        return BakedSplat(self.mean[idx], self.tangent_frame[idx], self.scales[idx],
                          self.opacity[idx], self.sh[idx])


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quat_to_rotmat(q):
    """Rotation matrix of a *normalized* quaternion ``(w, x, y, z)``; batched."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def bake(raw: RawSplat) -> BakedSplat:
    """Apply sigmoid / exp / quaternion normalization to raw parameters."""
    for name in ("mean", "rot", "log_scales", "opacity_logit", "sh"):
        if not np.all(np.isfinite(getattr(raw, name))):
            raise InvalidSplatError(f"non-finite values in {name}")
    qn = np.linalg.norm(raw.rot, axis=-1, keepdims=True)
    if np.any(qn == 0.0):
        raise InvalidSplatError("zero-length rotation quaternion")
    opacity = np.clip(sigmoid(raw.opacity_logit), 0.0, OPACITY_CLAMP)
    return BakedSplat(
        mean=raw.mean.copy(),
        tangent_frame=quat_to_rotmat(raw.rot / qn),
        scales=np.exp(raw.log_scales),
        opacity=opacity,
        sh=raw.sh.copy(),
    )


# ---------------------------------------------------------------------------
# Camera and transforms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_view: np.ndarray = field(default_factory=lambda: np.eye(4))
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        w2v = np.array(self.world_to_view, dtype=np.float64)
        if w2v.shape == (3, 4):
            w2v = np.vstack([w2v, [0.0, 0.0, 0.0, 1.0]])
        if w2v.shape != (4, 4):
            raise ConfigError(f"world_to_view must be 4x4, got {w2v.shape}")
        object.__setattr__(self, "world_to_view", w2v)
        if self.width < 1 or self.height < 1:
            raise ConfigError("camera width/height must be >= 1")
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ConfigError("need 0 < near < far")

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), *, width=64, height=64,
                fx=None, fy=None, cx=None, cy=None, near=0.01, far=100.0) -> "Camera":
        """Camera at ``eye`` looking at ``target``; ``up`` points to the image top."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        down = -np.asarray(up, dtype=np.float64)
        right = np.cross(down, fwd)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        w2v = np.eye(4)
        w2v[:3, :3] = R
        w2v[:3, 3] = -R @ eye
        fx = float(width) if fx is None else fx
        return cls(width, height, fx, fx if fy is None else fy,
                   width / 2.0 if cx is None else cx, height / 2.0 if cy is None else cy,
                   w2v, near, far)

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_view[:3, :3]

    @property
    def position(self) -> np.ndarray:
        R, t = self.world_to_view[:3, :3], self.world_to_view[:3, 3]
        return -R.T @ t

    def view_matrix(self) -> np.ndarray:
        return self.world_to_view.copy()

    def projection_matrix(self) -> np.ndarray:
        W, H, n, f = self.width, self.height, self.near, self.far
        P = np.zeros((4, 4))
        P[0, 0] = 2 * self.fx / W
        P[0, 2] = 2 * self.cx / W - 1
        P[1, 1] = 2 * self.fy / H
        P[1, 2] = 2 * self.cy / H - 1
        P[2, 2] = (f + n) / (f - n)
        P[2, 3] = -2 * f * n / (f - n)
        P[3, 2] = 1.0
        return P

    def viewport_matrix(self) -> np.ndarray:
        W, H = self.width, self.height
        return np.array([
            [W / 2, 0, 0, W / 2],
            [0, H / 2, 0, H / 2],
            [0, 0, 0.5, 0.5],
            [0, 0, 0, 1.0],
        ])

    def full_projection(self) -> np.ndarray:
        """``V @ P @ M``: world space to screen space (homogeneous)."""
        return self.viewport_matrix() @ self.projection_matrix() @ self.world_to_view

    def pixel_ray(self, xs, ys):
        """World-space origin and unit direction of the ray through screen point(s)."""
        xs, ys = np.broadcast_arrays(np.asarray(xs, float), np.asarray(ys, float))
        dv = np.stack([(xs - self.cx) / self.fx, (ys - self.cy) / self.fy, np.ones_like(xs)], -1)
        dw = dv @ self.rotation  # R^T dv, row-vector form
        dw /= np.linalg.norm(dw, axis=-1, keepdims=True)
        return np.broadcast_to(self.position, dw.shape).copy(), dw

    def project(self, pts):
        """World points ``(..., 3)`` to screen ``(x_px, y_px)`` and view z."""
        pts = np.asarray(pts, dtype=np.float64)
        pv = pts @ self.rotation.T + self.world_to_view[:3, 3]
        z = pv[..., 2]
        return np.stack([self.fx * pv[..., 0] / z + self.cx, self.fy * pv[..., 1] / z + self.cy], -1), z


@dataclass
class TransformStack:
    M: np.ndarray
    P: np.ndarray
    V: np.ndarray
    T: np.ndarray
    T_prime: np.ndarray
    MT: np.ndarray


def splat_matrix(splat: BakedSplat) -> np.ndarray:
    """``T``: normalized splat space to world space, columns ``(s_u t_u, s_v t_v, s_w t_w, mu)``."""
    frame = np.asarray(splat.tangent_frame)
    T = np.zeros(frame.shape[:-2] + (4, 4))
    T[..., :3, :3] = frame * np.asarray(splat.scales)[..., None, :]
    T[..., :3, 3] = splat.mean
    T[..., 3, 3] = 1.0
    return T


def build_transforms(splat: BakedSplat, cam: Camera) -> TransformStack:
    M, P, V = cam.view_matrix(), cam.projection_matrix(), cam.viewport_matrix()
    T = splat_matrix(splat)
    MT = M @ T
    return TransformStack(M=M, P=P, V=V, T=T, T_prime=(V @ P) @ MT, MT=MT)


# ---------------------------------------------------------------------------
# Bounding
# ---------------------------------------------------------------------------


def splat_cutoff(opacity, tau_alpha):
    """Squared Mahalanobis radius at which ``alpha`` drops to ``tau_alpha``.

    Returns 0 when ``opacity <= tau_alpha``; callers treat ``rho_c <= 0`` as
    "cull the whole splat".
    """
    if not (0.0 < tau_alpha < 1.0):
        raise ConfigError("tau_alpha must lie in (0, 1)")
    o = np.asarray(opacity, dtype=np.float64)
    with np.errstate(divide="ignore"):
        rho_c = 2.0 * np.log(o / tau_alpha)
    rho_c = np.where(o > tau_alpha, rho_c, 0.0)
    return float(rho_c) if rho_c.ndim == 0 else rho_c


@dataclass
class ScreenBBox:
    """Screen-space box. ``b``/``t`` are ``(..., 3)``; ``valid`` is False for culled splats."""

    b: np.ndarray
    t: np.ndarray
    valid: np.ndarray

    @property
    def empty(self):
        return ~np.asarray(self.valid)


def screen_bbox(T_prime, rho_c) -> ScreenBBox:
    """Tight screen-space box of the ellipsoid ``rho^2 <= rho_c`` under ``T_prime``.

    Dual quadric ``diag(rho_c, rho_c, rho_c, -1)`` pushed through ``T_prime``;
    each axis extent is the root pair of a 1D quadratic. Splats whose radicands
    go negative, or whose weight ``s`` is not negative (support crosses the
    eye plane), come back flagged invalid with zero-width boxes.
    """
    Tp = np.asarray(T_prime, dtype=np.float64)
    rho_c = np.asarray(rho_c, dtype=np.float64)
    diag = np.stack(np.broadcast_arrays(rho_c, rho_c, rho_c, -np.ones_like(rho_c)), -1)
    row4 = Tp[..., 3, :]
    s = np.sum(diag * row4 * row4, axis=-1)
    ok = (rho_c > 0) & (s < 0) & np.isfinite(s)
    s_safe = np.where(ok, s, -1.0)
    f = diag / s_safe[..., None]
    rows = Tp[..., :3, :]
    p = np.sum(f[..., None, :] * rows * row4[..., None, :], axis=-1)
    q = np.sum(f[..., None, :] * rows * rows, axis=-1)
    rad = p * p - q
    ok &= np.all(rad >= 0, axis=-1) & np.all(np.isfinite(rad), axis=-1)
    h = np.sqrt(np.where(ok[..., None], np.maximum(rad, 0.0), 0.0))
    p = np.where(ok[..., None], p, 0.0)
    return ScreenBBox(b=p - h, t=p + h, valid=ok)


# ---------------------------------------------------------------------------
# Ray evaluation
# ---------------------------------------------------------------------------


def pixel_planes(xs, ys):
    """The two screen-space planes ``x = xs`` and ``y = ys`` as homogeneous 4-vectors."""
    xs, ys = np.broadcast_arrays(np.asarray(xs, np.float64), np.asarray(ys, np.float64))
    one, zero = np.ones_like(xs), np.zeros_like(xs)
    return np.stack([one, zero, zero, -xs], -1), np.stack([zero, one, zero, -ys], -1)


def pixel_planes_for_index(ix, iy):
    """Planes through the center of integer pixel ``(ix, iy)``."""
    return pixel_planes(np.asarray(ix) + 0.5, np.asarray(iy) + 0.5)


def transport_planes(pi, T_prime):
    """Map screen-space plane(s) into splat space: ``T_prime^T @ pi``."""
    return np.einsum("...rk,...r->...k", np.asarray(T_prime, np.float64), np.asarray(pi, np.float64))


@dataclass
class PlueckerLine:
    """Line with direction ``d`` and moment ``m = p x d`` about the origin."""

    d: np.ndarray
    m: np.ndarray


def pluecker_from_planes(a, b, check: bool = True) -> PlueckerLine:
    """Intersection line of planes ``a`` and ``b`` (coefficients ``(x, y, z, w)``).

    ``d`` is the cross product of the plane normals and
    ``m = a_w * n_b - b_w * n_a``. With ``check`` set, parallel planes raise
    :class:`RayUndefinedError`; otherwise degenerate lines pass through with
    ``d = 0`` and evaluate as a miss.
    """
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    na, nb = a[..., :3], b[..., :3]
    d = np.cross(na, nb)
    m = a[..., 3:4] * nb - b[..., 3:4] * na
    if check and np.any(np.sum(d * d, axis=-1) < EPS_DEN):
        raise RayUndefinedError("planes are parallel; no intersection line")
    return PlueckerLine(d=d, m=m)


def pixel_line_coefficients(T_prime):
    """Per-splat coefficients of the pixel line as an affine function of screen position.

    With the planes of ``(xs, ys)`` transported by ``T_prime``, the line's
    ``d`` and ``m`` are affine in ``(xs, ys)`` (the bilinear terms cancel):
    ``d = dC + xs dX + ys dY`` and ``m = mC + xs mX + ys mY``. Returns
    ``(..., 18)`` laid out as ``dC, dX, dY, mC, mX, mY``.
    """
    Tp = np.asarray(T_prime, np.float64)
    r0, r1, r3 = Tp[..., 0, :3], Tp[..., 1, :3], Tp[..., 3, :3]
    w0, w1, w3 = Tp[..., 0, 3:4], Tp[..., 1, 3:4], Tp[..., 3, 3:4]
    return np.concatenate([
        np.cross(r0, r1), np.cross(r1, r3), np.cross(r3, r0),
        w0 * r1 - w1 * r0, w1 * r3 - w3 * r1, w3 * r0 - w0 * r3,
    ], -1)


def pixel_line(coeffs, xs, ys) -> PlueckerLine:
    """Evaluate :func:`pixel_line_coefficients` at screen position(s)."""
    c = np.asarray(coeffs, np.float64)
    xs = np.asarray(xs, np.float64)[..., None]
    ys = np.asarray(ys, np.float64)[..., None]
    return PlueckerLine(d=c[..., 0:3] + xs * c[..., 3:6] + ys * c[..., 6:9],
                        m=c[..., 9:12] + xs * c[..., 12:15] + ys * c[..., 15:18])


def rho_squared(line: PlueckerLine):
    """Squared distance of the line to the origin, ``|m|^2 / |d|^2``; ``MISS`` (inf) if ``|d|^2 < EPS_DEN``."""
    dd = np.sum(line.d * line.d, axis=-1)
    mm = np.sum(line.m * line.m, axis=-1)
    hit = dd >= EPS_DEN
    out = np.where(hit, mm / np.where(hit, dd, 1.0), MISS)
    return float(out) if out.ndim == 0 else out


def alpha_from_rho2(opacity, rho2):
    a = np.asarray(opacity, np.float64) * np.exp(-0.5 * np.asarray(rho2, np.float64))
    a = np.minimum(a, OPACITY_CLAMP)
    return float(a) if a.ndim == 0 else a


def closest_point_to_origin(line: PlueckerLine):
    """Point of the line nearest the origin, ``(d x m) / |d|^2``; inf for misses."""
    dd = np.sum(line.d * line.d, axis=-1)
    hit = dd >= EPS_DEN
    x = np.cross(line.d, line.m) / np.where(hit, dd, 1.0)[..., None]
    return np.where(hit[..., None], x, MISS)


def max_contribution_depth(line: PlueckerLine, stack) -> tuple:
    """View-space point of maximum Gaussian value on the ray, and its view z.

    ``stack`` is a :class:`TransformStack` or an ``M @ T`` matrix. Misses give
    ``inf`` for both outputs.
    """
    MT = stack.MT if isinstance(stack, TransformStack) else np.asarray(stack, np.float64)
    x = closest_point_to_origin(line)
    hit = np.all(np.isfinite(x), axis=-1)
    xs = np.where(hit[..., None], x, 0.0)
    xh = np.concatenate([xs, np.ones(xs.shape[:-1] + (1,))], -1)
    xv = np.einsum("...rk,...k->...r", MT, xh)[..., :3]
    xv = np.where(hit[..., None], xv, MISS)
    depth = xv[..., 2]
    return xv, (float(depth) if np.ndim(depth) == 0 else depth)


# ---------------------------------------------------------------------------
# Render configuration
# ---------------------------------------------------------------------------


class BlendMode(str, enum.Enum):
    HYBRID = "hybrid"
    FULL_SORT = "full_sort_oracle"
    GLOBAL_MEAN_SORT = "global_mean_sort"
    PURE_OIT = "pure_oit"
    AFFINE_3DGS = "affine_3dgs"


class DepthKey(str, enum.Enum):
    MAX_CONTRIBUTION = "max_contribution_depth"
    MEAN_VIEW_Z = "mean_view_z"


_MODE_ALIASES = {"full-sort": "full_sort_oracle", "full_sort": "full_sort_oracle",
                 "global-mean-sort": "global_mean_sort", "pure-oit": "pure_oit",
                 "oit": "pure_oit", "affine": "affine_3dgs", "3dgs": "affine_3dgs"}


def parse_mode(mode) -> BlendMode:
    if isinstance(mode, BlendMode):
        return mode
    return BlendMode(_MODE_ALIASES.get(str(mode), str(mode)))


@dataclass(frozen=True)
class RenderConfig:
    """Blending mode, thresholds and tiling for one render.

    ``use_tail=False`` drops every non-core fragment (the "without tail"
    ablation). ``early_stop`` stops core insertion once the core transmittance
    falls below 1e-4; it breaks order independence and is off by default.
    ``tiling=False`` renders the whole image as a single tile.
    """

    mode: BlendMode = BlendMode.HYBRID
    K: int = 16
    tau_alpha: float = 1.0 / 255.0
    tau_K: float = 0.05
    tile_size: int = 8
    background: tuple = (0.0, 0.0, 0.0)
    depth_sort_key: DepthKey | None = None
    use_tail: bool = True
    early_stop: bool = False
    tiling: bool = True
    precision: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "mode", parse_mode(self.mode))
        if self.depth_sort_key is None:
            key = (DepthKey.MEAN_VIEW_Z if self.mode in (BlendMode.GLOBAL_MEAN_SORT, BlendMode.AFFINE_3DGS)
                   else DepthKey.MAX_CONTRIBUTION)
            object.__setattr__(self, "depth_sort_key", key)
        else:
            object.__setattr__(self, "depth_sort_key", DepthKey(self.depth_sort_key))
        bg = tuple(float(c) for c in self.background)
        if len(bg) != 3:
            raise ConfigError("background must be RGB")
        object.__setattr__(self, "background", bg)
        if not (0 <= self.K <= K_HARD_CAP):
            raise ConfigError(f"K must lie in [0, {K_HARD_CAP}]")
        if not (0 < self.tau_alpha <= self.tau_K < 1):
            raise ConfigError("need 0 < tau_alpha <= tau_K < 1")
        if self.tile_size not in (8, 16):
            raise ConfigError("tile_size must be 8 or 16")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be float32 or float64")

    @property
    def effective_K(self) -> int:
        return 0 if self.mode is BlendMode.PURE_OIT else self.K

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def replace(self, **kw) -> "RenderConfig":
        from dataclasses import replace
        return replace(self, **kw)
