"""Toy inverse rendering: fit a fixed number of splats to target views with Adam."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from . import core_math as cm
from .grad import GROUPS, render_and_backward
from .raster.renderer import render

PSNR_CAP = 99.0
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


class Loss(str, enum.Enum):
    L1 = "l1"
    L1_PLUS_SSIM = "l1_plus_ssim"


class FitDivergedError(RuntimeError):
    pass


DEFAULT_LR = {"mean": 2e-3, "rot": 5e-3, "log_scales": 1e-2, "opacity_logit": 2.5e-2,
              "sh_dc": 1e-2, "sh_rest": 5e-4}


@dataclass
class FitConfig:
    iterations: int = 2000
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    loss: Loss = Loss.L1
    ssim_weight: float = 0.2
    opacity_decay: bool = False
    decay_lambda: float = 0.9995
    decay_period: int = 50
    seed: int = 0
    views_per_step: int | None = None  # None: every view each step
    render: cm.RenderConfig = field(default_factory=cm.RenderConfig)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-15
    divergence_factor: float = 10.0
    divergence_patience: int = 100

    def __post_init__(self):
        self.loss = Loss(self.loss)
        if not 0.0 < self.decay_lambda <= 1.0:
            raise cm.ConfigError("decay_lambda must lie in (0, 1]")
        if self.decay_period < 1:
            raise cm.ConfigError("decay_period must be >= 1")
        lr = dict(DEFAULT_LR)
        lr.update(self.lr)
        self.lr = lr


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _check_pair(a, b):
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for images in [0, 1], capped at 99 dB."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window():
    r = SSIM_WINDOW // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return w / w.sum()


_WIN = _gaussian_window()


def _blur(x):
    # separable, zero-padded; symmetric taps make this filter its own adjoint
    return correlate1d(correlate1d(x, _WIN, axis=0, mode="constant"), _WIN, axis=1, mode="constant")


def _as_hwc(x):
    return x[..., None] if x.ndim == 2 else x


def ssim(a, b, return_grad=False):
    """Mean SSIM over pixels and channels (11x11 Gaussian window, sigma 1.5).

    With ``return_grad`` also returns ``d ssim / d a``.
    """
    a, b = _check_pair(a, b)
    shape = a.shape
    a, b = _as_hwc(a), _as_hwc(b)
    mu_a = np.stack([_blur(a[..., c]) for c in range(a.shape[-1])], -1)
    mu_b = np.stack([_blur(b[..., c]) for c in range(b.shape[-1])], -1)
    m_aa = np.stack([_blur(a[..., c] ** 2) for c in range(a.shape[-1])], -1)
    m_bb = np.stack([_blur(b[..., c] ** 2) for c in range(b.shape[-1])], -1)
    m_ab = np.stack([_blur(a[..., c] * b[..., c]) for c in range(a.shape[-1])], -1)
    var_a = m_aa - mu_a ** 2
    var_b = m_bb - mu_b ** 2
    cov = m_ab - mu_a * mu_b
    A1 = 2 * mu_a * mu_b + SSIM_C1
    A2 = 2 * cov + SSIM_C2
    B1 = mu_a ** 2 + mu_b ** 2 + SSIM_C1
    B2 = var_a + var_b + SSIM_C2
    L = A1 / B1  # luminance term
    Cs = A2 / B2  # contrast-structure term
    S = L * Cs
    value = float(S.mean())
    if not return_grad:
        return value
    g = 1.0 / S.size
    # factored so that every term cancels exactly when a == b
    g_mu = g * (2 * Cs * (mu_b - mu_a * L) / B1 + 2 * L * (mu_a * Cs - mu_b) / B2)
    g_maa = g * (-L * Cs / B2)
    g_mab = g * (2 * L / B2)
    grad = np.empty_like(a)
    for c in range(a.shape[-1]):
        grad[..., c] = (_blur(g_mu[..., c]) + 2 * a[..., c] * _blur(g_maa[..., c])
                        + b[..., c] * _blur(g_mab[..., c]))
    return value, grad.reshape(shape)


def image_loss(img, target, kind=Loss.L1, ssim_weight=0.2):
    """``(loss, d loss / d img)``; L1 is the mean absolute error."""
    diff = img - target
    l1 = float(np.mean(np.abs(diff)))
    d = np.sign(diff) / diff.size
    if Loss(kind) is Loss.L1:
        return l1, d
    s, ds = ssim(img, target, return_grad=True)
    return (1 - ssim_weight) * l1 + ssim_weight * (1 - s), (1 - ssim_weight) * d - ssim_weight * ds


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adam with one learning rate per parameter group."""

    def __init__(self, params: cm.RawSplat, lr: dict, beta1=0.9, beta2=0.999, eps=1e-15):
        self.lr = lr
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {g: np.zeros_like(getattr(params, g)) for g in GROUPS}
        self.v = {g: np.zeros_like(getattr(params, g)) for g in GROUPS}

    def _rate(self, group, shape):
        if group != "sh":
            return self.lr[group]
        rate = np.full(shape, self.lr["sh_rest"])
        rate[..., 0, :] = self.lr["sh_dc"]
        return rate

    def step(self, params: cm.RawSplat, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for g in GROUPS:
            grad = grads.group(g)
            self.m[g] = self.b1 * self.m[g] + (1 - self.b1) * grad
            self.v[g] = self.b2 * self.v[g] + (1 - self.b2) * grad * grad
            step = self._rate(g, grad.shape) * (self.m[g] / c1) / (np.sqrt(self.v[g] / c2) + self.eps)
            value = getattr(params, g)
            value -= step


def decay_opacity(raw: cm.RawSplat, lam):
    """Multiply the activated opacity by ``lam`` and pull it back through the sigmoid."""
    raw.opacity_logit = cm.logit(cm.sigmoid(raw.opacity_logit) * lam)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    scene: cm.RawSplat
    losses: list
    psnr: float

    def loss_curve_text(self) -> str:
        return "\n".join(f"iter={i} loss={v:.8e}" for i, v in enumerate(self.losses))


def evaluate(scene, cams, targets, config: cm.RenderConfig) -> float:
    """Mean PSNR over the views."""
    return float(np.mean([psnr(render(scene, c, config).image, t) for c, t in zip(cams, targets)]))


def fit(targets, cams, init: cm.RawSplat, cfg: FitConfig | None = None, eval_config=None,
        callback=None) -> FitResult:
    """Fit ``init`` (copied, never modified) to the target images seen from ``cams``.

    ``losses[i]`` is the mean loss over the views used at iteration ``i``.
    Raises :class:`FitDivergedError` when the loss stays above
    ``divergence_factor`` times the first loss for ``divergence_patience``
    consecutive iterations.
    """
    cfg = cfg or FitConfig()
    if len(targets) < 1 or len(targets) != len(cams):
        raise ValueError("need one target image per camera, and at least one")
    rng = np.random.default_rng(cfg.seed)
    scene = init.copy()
    opt = Adam(scene, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    losses = []
    bad = 0
    n_views = len(cams)
    per_step = n_views if cfg.views_per_step is None else min(cfg.views_per_step, n_views)
    for it in range(cfg.iterations):
        views = np.arange(n_views) if per_step == n_views else rng.choice(n_views, per_step, replace=False)
        total = None
        loss_sum = 0.0
        for v in views:
            loss, _, grads = render_and_backward(
                scene, cams[v], cfg.render,
                lambda img, t=targets[v]: image_loss(img, t, cfg.loss, cfg.ssim_weight))
            loss_sum += loss
            if total is None:
                total = grads
            else:
                total += grads
        for g in GROUPS:
            total.group(g)[...] /= len(views)
        losses.append(loss_sum / len(views))
        if losses[-1] > cfg.divergence_factor * losses[0]:
            bad += 1
            if bad >= cfg.divergence_patience:
                raise FitDivergedError(
                    f"loss {losses[-1]:.4g} above {cfg.divergence_factor}x initial {losses[0]:.4g} "
                    f"for {bad} iterations (iteration {it})")
        else:
            bad = 0
        opt.step(scene, total)
        if cfg.opacity_decay and (it + 1) % cfg.decay_period == 0:
            decay_opacity(scene, cfg.decay_lambda)
        if callback is not None:
            callback(it, scene, losses[-1])
    score = evaluate(scene, cams, targets, eval_config or cfg.render)
    return FitResult(scene, losses, score)
