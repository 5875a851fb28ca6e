import numpy as np
import pytest

from htsplat import core_math as cm
from htsplat import grad, scenes
from htsplat.raster import pixel as px
from htsplat.raster.renderer import render, set_threads


def pixel_stream(rng, n=30):
    depth = rng.permutation(n).astype(float) + rng.uniform(0, 0.5, n)
    alpha = np.where(rng.uniform(size=n) < 0.3, rng.uniform(0.01, 0.04, n), rng.uniform(0.1, 0.6, n))
    colors = rng.uniform(0, 1, (n, 3))
    return depth, alpha, colors


def shade(depth, alpha, colors, K, bg):
    st = px.PixelState(K=K)
    for i in range(len(depth)):
        px.insert_fragment(st, depth[i], alpha[i], colors[i], i)
    return st, px.finalize_pixel(st, bg)


# --- per-pixel backward -----------------------------------------------------


@pytest.mark.parametrize("channel", [0, 1, 2])
def test_single_core_fragment_gradients(channel):
    c = np.array([0.9, 0.4, 0.1])
    bg = np.array([0.2, 0.3, 0.5])
    d_color = np.eye(3)[channel]
    st = px.PixelState(K=4)
    px.insert_fragment(st, 1.0, 0.6, c, 0)
    (da, dc), (tda, tdc) = grad.backward_pixel(grad.PixelTape.from_state(st, d_color, bg))
    np.testing.assert_allclose(dc[0], 0.6 * d_color)
    assert da[0] == pytest.approx(c[channel] - bg[channel])
    assert len(tda) == 0 and tdc.shape == (0, 3)


def test_empty_tail_gives_zero_tail_weights():
    st = px.PixelState(K=4)
    px.insert_fragment(st, 1.0, 0.6, [1, 0, 0], 0)
    w_c, w_bg = grad.PixelTape.from_state(st, np.ones(3)).tail_weights()
    assert np.all(w_c == 0) and w_bg == 0


def test_backward_pixel_matches_differences(rng):
    depth, alpha, colors = pixel_stream(rng)
    bg = rng.uniform(0, 1, 3)
    d_color = rng.normal(size=3)
    st, _ = shade(depth, alpha, colors, 16, bg)
    assert len(st.core) == 16 and st.tail_count > 5
    (da, dc), (tda, tdc) = grad.backward_pixel(grad.PixelTape.from_state(st, d_color, bg),
                                               st.tail_alphas, st.tail_colors)
    core_ids = [e.splat_id for e in st.core]
    ana_a = dict(zip(core_ids + st.tail_ids, np.concatenate([da, tda])))
    ana_c = dict(zip(core_ids + st.tail_ids, np.concatenate([dc, tdc])))
    h = 1e-6
    for i in range(len(depth)):
        if i not in ana_a:
            continue
        ap, am = alpha.copy(), alpha.copy()
        ap[i] += h
        am[i] -= h
        fd = d_color @ (shade(depth, ap, colors, 16, bg)[1] - shade(depth, am, colors, 16, bg)[1]) / (2 * h)
        assert abs(ana_a[i] - fd) <= 1e-6 * max(abs(fd), 1e-3)
        for ch in range(3):
            cp, cmn = colors.copy(), colors.copy()
            cp[i, ch] += h
            cmn[i, ch] -= h
            fd = d_color @ (shade(depth, alpha, cp, 16, bg)[1] - shade(depth, alpha, cmn, 16, bg)[1]) / (2 * h)
            assert abs(ana_c[i][ch] - fd) <= 1e-6 * max(abs(fd), 1e-3)


def test_tail_color_change_is_local(rng):
    depth, alpha, colors = pixel_stream(rng)
    st, base = shade(depth, alpha, colors, 8, np.zeros(3))
    i = st.tail_ids[0]
    delta = np.array([0.05, -0.02, 0.01])
    colors2 = colors.copy()
    colors2[i] += delta
    _, moved = shade(depth, alpha, colors2, 8, np.zeros(3))
    expect = st.core_trans * (1 - st.tail_trans) * alpha[i] * delta / st.tail_sum_a
    np.testing.assert_allclose(moved - base, expect, atol=1e-14)


# --- image backward ---------------------------------------------------------


def lone_splat():
    raw = scenes.solid_scene([[0.1, -0.05, 0.0]], [0.3, 0.2, 0.25], [0.8, 0.4, 0.2], 0.7,
                             rots=[[0.9, 0.1, 0.2, 0.3]])
    raw.sh[0, 1:4] = 0.05
    return raw


@pytest.mark.parametrize("precision, tol", [("float64", 1e-6), ("float32", 1e-3)])
def test_lone_splat_mean_x(cam64, precision, tol):
    raw = lone_splat()
    w = np.random.default_rng(0).uniform(-1, 1, (64, 64, 3))
    cfg = cm.RenderConfig(precision=precision)
    g = grad.backward(raw, cam64, cfg, w).d_mean[0, 0]
    eps = 1e-6
    p, m = raw.copy(), raw.copy()
    p.mean[0, 0] += eps
    m.mean[0, 0] -= eps
    cfg64 = cfg.replace(precision="float64")
    fd = np.sum(w * (render(p, cam64, cfg64).image - render(m, cam64, cfg64).image)) / (2 * eps)
    assert abs(g - fd) <= tol * abs(fd)


def test_culled_splat_has_zero_gradient(cam64):
    raw = cm.RawSplat.concat([lone_splat(), scenes.solid_scene([[0, 0, -6.0]], 0.3, [1, 1, 1], 0.8)])
    g = grad.backward(raw, cam64, cm.RenderConfig(), np.ones((64, 64, 3)))
    for name in grad.GROUPS:
        assert np.all(g.group(name)[1] == 0)
        assert np.any(g.group(name)[0] != 0)


def test_degenerate_splat_gradients(cam64):
    raw = lone_splat()
    raw.log_scales[0, 2] = -1e4
    w = np.random.default_rng(1).uniform(-1, 1, (64, 64, 3))
    g = grad.backward(raw, cam64, cm.RenderConfig(), w)
    assert g.all_finite()
    rep = grad.gradcheck(raw, cam64, groups=("mean", "opacity_logit", "sh"))
    assert rep.passed, rep.to_text()
    # remaining scale directions
    for j in (0, 1):
        p, m = raw.copy(), raw.copy()
        p.log_scales[0, j] += 1e-6
        m.log_scales[0, j] -= 1e-6
        fd = np.sum(w * (render(p, cam64).image - render(m, cam64).image)) / 2e-6
        assert abs(g.d_log_scales[0, j] - fd) <= 1e-6 * abs(fd)


def test_gradcheck_faint_splat_is_zero(cam64):
    raw = lone_splat()
    raw.opacity_logit[:] = -20.0
    rep = grad.gradcheck(raw, cam64)
    assert rep.passed and rep.worst == 0.0
    g = grad.backward(raw, cam64, cm.RenderConfig(), np.ones((64, 64, 3)))
    assert all(np.all(g.group(n) == 0) for n in grad.GROUPS)


@pytest.mark.parametrize("kw", [dict(K=0), dict(mode="pure_oit"), dict(K=16), dict(K=2),
                                dict(mode="full_sort_oracle"), dict(mode="global_mean_sort"),
                                dict(K=3, use_tail=False), dict(K=4, background=(0.3, 0.1, 0.6))])
def test_gradcheck_modes(kw):
    cam = scenes.default_camera(24, 24)
    raw = scenes.random_scene(4, 21, spread=0.6, scale_range=(0.15, 0.45))
    rep = grad.gradcheck(raw, cam, cm.RenderConfig(**kw))
    assert rep.passed, rep.to_text()
    assert rep.n_params == 4 * (3 + 4 + 3 + 1 + 48)


def test_gradcheck_float32():
    cam = scenes.default_camera(24, 24)
    raw = scenes.random_scene(4, 22, spread=0.6, scale_range=(0.15, 0.45))
    rep = grad.gradcheck(raw, cam, cm.RenderConfig(precision="float32"))
    assert rep.tolerance == 1e-3 and rep.passed, rep.to_text()


def test_gradcheck_report_text():
    rep = grad.GradcheckReport({"mean": 1e-8, "rot": 2e-7}, 10, 1, 0, 1e-6)
    text = rep.to_text()
    assert "max_rel_err.rot=2.000e-07" in text and "passed=1" in text
    assert grad.GradcheckReport({"mean": 1e-5}, 1, 0, 0, 1e-6).passed is False


def test_relative_error_floor():
    e = grad.relative_errors([1.0, 1e-9], [1.0, 2e-9], floor_frac=1e-3)
    assert e[0] == 0 and e[1] == pytest.approx(1e-9 / 1e-3)


def test_gradients_thread_invariant(small_scene, cam64):
    w = np.random.default_rng(3).uniform(-1, 1, (64, 64, 3))
    n0 = set_threads()
    try:
        a = grad.backward(small_scene, cam64, cm.RenderConfig(), w)
        set_threads(1)
        b = grad.backward(small_scene, cam64, cm.RenderConfig(), w)
    finally:
        set_threads(n0)
    for name in grad.GROUPS:
        np.testing.assert_allclose(a.group(name), b.group(name), atol=1e-7)


def test_membership_stable_under_tiny_step(small_scene, cam64):
    cfg = cm.RenderConfig()
    sig = grad.membership(small_scene, cam64, cfg)
    moved = small_scene.copy()
    moved.mean[0, 0] += 1e-9
    assert grad.membership(moved, cam64, cfg) == sig
    moved.mean[0, 0] += 0.3
    assert grad.membership(moved, cam64, cfg) != sig


def test_render_and_backward_returns_loss(small_scene, cam64):
    loss, img, g = grad.render_and_backward(small_scene, cam64, cm.RenderConfig(),
                                            lambda im: (float(np.sum(im)), np.ones_like(im)))
    assert loss == pytest.approx(img.sum())
    assert g.all_finite() and g.d_mean.shape == (len(small_scene), 3)


@pytest.mark.parametrize("kw", [dict(mode="affine"), dict(mode="full_sort_oracle", early_stop=True)])
def test_backward_unsupported(small_scene, cam64, kw):
    with pytest.raises(cm.ConfigError):
        grad.backward(small_scene, cam64, cm.RenderConfig(**kw), np.ones((64, 64, 3)))


def test_quat_backward_matches_differences(rng):
    q = rng.normal(size=4)
    G = rng.normal(size=(3, 3))
    ana = grad.quat_backward(q, G)
    h = 1e-7
    for k in range(4):
        e = np.zeros(4)
        e[k] = h
        fd = np.sum(G * (cm.quat_to_rotmat((q + e) / np.linalg.norm(q + e))
                         - cm.quat_to_rotmat((q - e) / np.linalg.norm(q - e)))) / (2 * h)
        assert ana[k] == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_splat_grads_accumulate():
    a = grad.SplatGrads.zeros(2)
    b = grad.SplatGrads.zeros(2)
    b.d_mean[:] = 1.0
    a += b
    a += b
    assert np.all(a.d_mean == 2.0) and a.all_finite()
