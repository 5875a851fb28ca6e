import numpy as np
import pytest

from htsplat import core_math as cm
from htsplat import fit as ft
from htsplat import scenes
from htsplat.raster.renderer import render


@pytest.fixture(scope="module")
def toy_views():
    cams = scenes.orbit_cameras(2, width=24, image_height=24)
    ref = scenes.toy_reference()
    return cams, ref


def targets_for(ref, cams, cfg=None):
    return [render(ref, c, cfg or cm.RenderConfig()).image for c in cams]


# --- metrics ----------------------------------------------------------------


def test_psnr_identical_is_capped():
    a = np.random.default_rng(0).uniform(size=(8, 8, 3))
    assert ft.psnr(a, a) == 99.0


def test_psnr_zero_vs_one():
    assert ft.psnr(np.zeros((4, 4, 3)), np.ones((4, 4, 3))) == pytest.approx(0.0)


def test_psnr_known_mse():
    assert ft.psnr(np.zeros(100), np.full(100, 0.1)) == pytest.approx(20.0)


def test_ssim_identical_is_one(rng):
    a = rng.uniform(size=(20, 20, 3))
    assert ft.ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_checkerboard_inverse_negative():
    board = (np.indices((32, 32)).sum(0) % 2).astype(float)
    s = ft.ssim(board, 1.0 - board)
    assert -1.0 <= s < 0.0


def test_metrics_reject_mismatched_shapes():
    with pytest.raises(ValueError):
        ft.psnr(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError):
        ft.ssim(np.zeros((4, 4, 3)), np.zeros((4, 4)))


def test_ssim_gradient_matches_differences(rng):
    a = rng.uniform(size=(12, 13, 3))
    b = rng.uniform(size=(12, 13, 3))
    _, g = ft.ssim(a, b, return_grad=True)
    h = 1e-6
    for idx in [(0, 0, 0), (5, 6, 1), (11, 12, 2), (3, 9, 0)]:
        p, m = a.copy(), a.copy()
        p[idx] += h
        m[idx] -= h
        fd = (ft.ssim(p, b) - ft.ssim(m, b)) / (2 * h)
        assert g[idx] == pytest.approx(fd, rel=1e-5, abs=1e-10)


def test_l1_ssim_loss_gradient(rng):
    a = rng.uniform(size=(10, 10, 3))
    b = rng.uniform(size=(10, 10, 3))
    loss, g = ft.image_loss(a, b, ft.Loss.L1_PLUS_SSIM, 0.2)
    assert loss == pytest.approx(0.8 * np.mean(np.abs(a - b)) + 0.2 * (1 - ft.ssim(a, b)))
    h = 1e-6
    p, m = a.copy(), a.copy()
    p[4, 4, 1] += h
    m[4, 4, 1] -= h
    fd = (ft.image_loss(p, b, "l1_plus_ssim")[0] - ft.image_loss(m, b, "l1_plus_ssim")[0]) / (2 * h)
    assert g[4, 4, 1] == pytest.approx(fd, rel=1e-5)


# --- config -----------------------------------------------------------------


@pytest.mark.parametrize("kw", [dict(decay_lambda=0.0), dict(decay_lambda=1.5), dict(decay_period=0)])
def test_fit_config_rejects(kw):
    with pytest.raises(cm.ConfigError):
        ft.FitConfig(**kw)


def test_fit_config_defaults():
    cfg = ft.FitConfig(lr={"mean": 1.0})
    assert cfg.lr["mean"] == 1.0 and cfg.lr["rot"] == ft.DEFAULT_LR["rot"]
    assert (cfg.decay_lambda, cfg.decay_period, cfg.loss) == (0.9995, 50, ft.Loss.L1)
    assert cfg.render.K == 16


# --- fitting ----------------------------------------------------------------


@pytest.mark.parametrize("mode", ["hybrid", "pure_oit", "full_sort_oracle", "global_mean_sort"])
@pytest.mark.parametrize("loss", ["l1", "l1_plus_ssim"])
def test_self_fit_fixed_point(toy_views, mode, loss):
    cams, ref = toy_views
    rcfg = cm.RenderConfig(mode=mode)
    res = ft.fit(targets_for(ref, cams, rcfg), cams, ref, ft.FitConfig(iterations=5, loss=loss, render=rcfg))
    assert max(abs(v - res.losses[0]) for v in res.losses) <= 1e-6


def test_init_is_not_modified(toy_views):
    cams, ref = toy_views
    init = scenes.toy_init()
    before = init.copy()
    ft.fit(targets_for(ref, cams), cams, init, ft.FitConfig(iterations=2))
    np.testing.assert_array_equal(init.mean, before.mean)


def test_opacity_decay_schedule(toy_views):
    cams, ref = toy_views
    lr = {k: 0.0 for k in ft.DEFAULT_LR}
    init = scenes.toy_init()
    cfg = ft.FitConfig(iterations=12, lr=lr, opacity_decay=True, decay_lambda=0.9, decay_period=4)
    res = ft.fit(targets_for(ref, cams), cams, init, cfg)
    expect = cm.sigmoid(init.opacity_logit) * 0.9 ** 3
    np.testing.assert_allclose(cm.sigmoid(res.scene.opacity_logit), expect, rtol=1e-6, atol=1e-12)


def test_decay_opacity_in_activated_space():
    raw = scenes.toy_init(4)
    o = cm.sigmoid(raw.opacity_logit)
    ft.decay_opacity(raw, 0.5)
    np.testing.assert_allclose(cm.sigmoid(raw.opacity_logit), o * 0.5, rtol=1e-12)


def test_seeded_determinism(toy_views):
    cams, ref = toy_views
    t = targets_for(ref, cams)
    cfg = ft.FitConfig(iterations=6, views_per_step=1, seed=3)
    a = ft.fit(t, cams, scenes.toy_init(), cfg)
    b = ft.fit(t, cams, scenes.toy_init(), cfg)
    assert a.losses == b.losses
    assert a.loss_curve_text() == b.loss_curve_text()
    assert a.loss_curve_text().splitlines()[0].startswith("iter=0 loss=")


def test_loss_decreases(toy_views):
    cams, ref = toy_views
    res = ft.fit(targets_for(ref, cams), cams, scenes.toy_init(), ft.FitConfig(iterations=60))
    assert np.mean(res.losses[-10:]) < 0.7 * np.mean(res.losses[:10])
    assert res.psnr == pytest.approx(ft.evaluate(res.scene, cams, targets_for(ref, cams), cm.RenderConfig()))


def test_divergence_raises(toy_views):
    cams, ref = toy_views
    start = ref.copy()
    start.sh[:, 0] += 0.02
    lr = dict(ft.DEFAULT_LR, sh_dc=-0.5)  # gradient ascent on color
    cfg = ft.FitConfig(iterations=200, lr=lr, divergence_patience=5)
    with pytest.raises(ft.FitDivergedError, match="initial"):
        ft.fit(targets_for(ref, cams), cams, start, cfg)


def test_fit_input_validation(toy_views):
    cams, ref = toy_views
    with pytest.raises(ValueError):
        ft.fit([], [], ref)
    with pytest.raises(ValueError):
        ft.fit(targets_for(ref, cams)[:1], cams, ref)


def test_adam_step_direction():
    raw = scenes.toy_init(2)
    from htsplat.grad import SplatGrads
    g = SplatGrads.zeros(2)
    g.d_mean[:] = 1.0
    opt = ft.Adam(raw, dict(ft.DEFAULT_LR))
    before = raw.mean.copy()
    opt.step(raw, g)
    np.testing.assert_allclose(raw.mean, before - ft.DEFAULT_LR["mean"], rtol=1e-9)
