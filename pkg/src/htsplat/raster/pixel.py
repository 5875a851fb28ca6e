"""Reference per-pixel hybrid transparency: a sorted core of K fragments plus
an order-independent tail.

These are straightforward Python implementations of the per-pixel state
machine. The tile kernels in :mod:`htsplat.raster.kernels` implement the same
logic compiled; tests check one against the other.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import core_math as cm


@dataclass
class CoreEntry:
    depth: float
    alpha: float
    color: np.ndarray
    splat_id: int

    def key(self):
        return (self.depth, self.splat_id)


@dataclass
class PixelState:
    K: int
    core: list = field(default_factory=list)
    tail_sum_ac: np.ndarray = field(default_factory=lambda: np.zeros(3))
    tail_sum_a: float = 0.0
    tail_trans: float = 1.0
    tail_count: int = 0
    # per-fragment tail records, kept only for the reference backward pass
    tail_ids: list = field(default_factory=list)
    tail_alphas: list = field(default_factory=list)
    tail_colors: list = field(default_factory=list)

    def add_to_tail(self, alpha, color, splat_id=-1):
        color = np.asarray(color, float)
        self.tail_sum_ac = self.tail_sum_ac + alpha * color
        self.tail_sum_a += alpha
        self.tail_trans *= (1.0 - alpha)
        self.tail_count += 1
        self.tail_ids.append(splat_id)
        self.tail_alphas.append(float(alpha))
        self.tail_colors.append(color)

    @property
    def core_trans(self) -> float:
        """``T_{K+1}``: transmittance behind the last core entry."""
        t = 1.0
        for e in self.core:
            t *= 1.0 - e.alpha
        return t


def insert_fragment(state: PixelState, depth, alpha, color, splat_id, tau_alpha=1 / 255,
                    tau_K=0.05, use_tail=True):
    """Route one evaluated fragment into the core or the tail.

    Core entries stay sorted by ``(depth, splat_id)``; when a closer fragment
    arrives at a full core, the farthest entry is demoted to the tail so no
    contribution is lost.
    """
    if alpha < tau_alpha:
        return
    entry = CoreEntry(float(depth), float(alpha), np.asarray(color, float), int(splat_id))
    if alpha < tau_K or state.K == 0:
        if use_tail:
            state.add_to_tail(entry.alpha, entry.color, entry.splat_id)
        return
    core = state.core
    if len(core) == state.K and entry.key() >= core[-1].key():
        if use_tail:
            state.add_to_tail(entry.alpha, entry.color, entry.splat_id)
        return
    pos = len(core)
    while pos > 0 and core[pos - 1].key() > entry.key():
        pos -= 1
    core.insert(pos, entry)
    if len(core) > state.K:
        evicted = core.pop()
        if use_tail:
            state.add_to_tail(evicted.alpha, evicted.color, evicted.splat_id)


@dataclass
class Fragment:
    """One splat as seen by the per-pixel shader."""

    splat_id: int
    T_prime: np.ndarray
    MT: np.ndarray
    rgb: np.ndarray
    opacity: float


def evaluate_fragment(frag: Fragment, xs, ys):
    """``(alpha, depth)`` of a splat along the ray through screen point ``(xs, ys)``."""
    pi_x, pi_y = cm.pixel_planes(xs, ys)
    line = cm.pluecker_from_planes(cm.transport_planes(pi_x, frag.T_prime),
                                   cm.transport_planes(pi_y, frag.T_prime), check=False)
    rho2 = cm.rho_squared(line)
    if rho2 == cm.MISS:
        return 0.0, cm.MISS
    alpha = cm.alpha_from_rho2(frag.opacity, rho2)
    _, depth = cm.max_contribution_depth(line, frag.MT)
    return alpha, depth


def shade_pixel(fragments, pixel, config: cm.RenderConfig) -> PixelState:
    """Stream a tile's fragments through one pixel (integer index ``(ix, iy)``)."""
    xs, ys = pixel[0] + 0.5, pixel[1] + 0.5
    state = PixelState(K=config.effective_K)
    for frag in fragments:
        alpha, depth = evaluate_fragment(frag, xs, ys)
        insert_fragment(state, depth, alpha, frag.rgb, frag.splat_id, config.tau_alpha,
                        config.tau_K, config.use_tail)
    return state


def finalize_pixel(state: PixelState, background=(0.0, 0.0, 0.0), use_tail=True):
    """Composite the sorted core front to back, then the tail over the background."""
    bg = np.asarray(background, dtype=np.float64)
    color = np.zeros(3)
    T = 1.0
    for e in state.core:
        color += e.alpha * T * e.color
        T *= 1.0 - e.alpha
    if use_tail and state.tail_sum_a > 0:
        c_tail = state.tail_sum_ac / state.tail_sum_a
        color += T * ((1.0 - state.tail_trans) * c_tail + state.tail_trans * bg)
    else:
        color += T * bg
    return color


def final_transmittance(state: PixelState) -> float:
    return state.core_trans * state.tail_trans
