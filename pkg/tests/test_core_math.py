import math

import numpy as np
import pytest

from htsplat import core_math as cm
from htsplat import oracle, scenes
from htsplat.verify import fibonacci_sphere, random_camera, random_splats_in_view

from conftest import unit_baked


def one_raw(**kw):
    base = dict(mean=np.zeros(3), rot=[1.0, 0, 0, 0], log_scales=np.zeros(3), opacity_logit=0.0,
                sh=np.zeros((16, 3)))
    base.update(kw)
    return cm.RawSplat(**base)


# --- bake -------------------------------------------------------------------


def test_bake_opacity_logit_zero_is_half():
    assert float(cm.bake(one_raw()).opacity) == 0.5


def test_bake_unit_splat():
    b = cm.bake(one_raw())
    np.testing.assert_array_equal(b.scales, [1.0, 1.0, 1.0])
    np.testing.assert_allclose(b.tangent_frame, np.eye(3), atol=1e-15)


def test_bake_matches_scripted_reference(rng):
    raw = scenes.random_scene(50, rng)
    b = cm.bake(raw)
    np.testing.assert_allclose(b.opacity, np.minimum(1 / (1 + np.exp(-raw.opacity_logit)), 0.999), rtol=1e-14)
    np.testing.assert_allclose(b.scales, np.exp(raw.log_scales), rtol=1e-15)
    for q, R in zip(raw.rot, b.tangent_frame):
        w, x, y, z = q / math.sqrt(q @ q)
        ref = np.array([[w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
                        [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
                        [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z]])
        np.testing.assert_allclose(R, ref, atol=1e-14)
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)


def test_bake_clamps_opacity():
    assert float(cm.bake(one_raw(opacity_logit=50.0)).opacity) == 0.999


@pytest.mark.parametrize("field", ["mean", "rot", "log_scales", "sh"])
def test_bake_rejects_non_finite(field):
    raw = one_raw()
    getattr(raw, field).flat[0] = np.nan
    with pytest.raises(cm.InvalidSplatError):
        cm.bake(raw)


def test_raw_splat_requires_48_sh_entries():
    with pytest.raises(cm.InvalidSplatError):
        one_raw(sh=np.zeros(47))
    assert one_raw(sh=np.zeros(48)).sh.shape == (16, 3)


# --- transforms -------------------------------------------------------------


def test_identity_stack_gives_identity_T_prime():
    T = cm.splat_matrix(unit_baked())
    np.testing.assert_array_equal(np.eye(4) @ np.eye(4) @ np.eye(4) @ T, np.eye(4))


def test_splat_matrix_columns():
    T = cm.splat_matrix(unit_baked(mean=(0, 0, 5), scales=(2, 1, 1)))
    np.testing.assert_array_equal(T[:, 0], [2, 0, 0, 0])
    np.testing.assert_array_equal(T[:, 3], [0, 0, 5, 1])


def test_build_transforms_matches_explicit_product(rng):
    for _ in range(10):
        cam = random_camera(rng)
        splat = random_splats_in_view(rng, 1, cam).subset(0)
        st = cm.build_transforms(splat, cam)
        T = np.eye(4)
        T[:3, :3] = splat.tangent_frame @ np.diag(splat.scales)
        T[:3, 3] = splat.mean
        ref = np.linalg.multi_dot([cam.viewport_matrix(), cam.projection_matrix(), cam.world_to_view, T])
        np.testing.assert_allclose(st.T_prime, ref, rtol=1e-12, atol=1e-12)
        np.testing.assert_array_equal(st.T[3], [0, 0, 0, 1])


def test_projection_conventions():
    cam = cm.Camera(64, 48, 50.0, 50.0, 32.0, 24.0, near=1.0, far=10.0)
    VP = cam.viewport_matrix() @ cam.projection_matrix()
    for z in (1.0, 10.0):
        h = VP @ [0.0, 0.0, z, 1.0]
        assert h[2] / h[3] == pytest.approx(0.0 if z == 1.0 else 1.0)
    # a view point maps to its pinhole pixel
    h = VP @ [0.3, -0.2, 2.0, 1.0]
    np.testing.assert_allclose(h[:2] / h[3], [32 + 50 * 0.15, 24 - 50 * 0.1])


@pytest.mark.parametrize("kw", [dict(width=0), dict(fx=0.0), dict(near=5.0, far=1.0)])
def test_camera_rejects_invalid(kw):
    args = dict(width=8, height=8, fx=8.0, fy=8.0, cx=4.0, cy=4.0, near=0.1, far=10.0)
    args.update(kw)
    with pytest.raises(cm.ConfigError):
        cm.Camera(**args)


# --- cutoff and bbox --------------------------------------------------------


@pytest.mark.parametrize("o, tau, expected", [
    (1.0, math.exp(-4.5), 9.0),
    (0.5, 1 / 255, 2 * math.log(127.5)),
])
def test_splat_cutoff(o, tau, expected):
    assert cm.splat_cutoff(o, tau) == pytest.approx(expected, rel=1e-12)


def test_splat_cutoff_culls_at_threshold():
    assert cm.splat_cutoff(1 / 255, 1 / 255) == 0.0
    assert cm.splat_cutoff(0.5 / 255, 1 / 255) == 0.0


def test_splat_cutoff_example_value():
    assert cm.splat_cutoff(0.5, 1 / 255) == pytest.approx(9.696, abs=5e-4)


@pytest.mark.parametrize("rho_c, half", [(9.0, 3.0), (4.0, 2.0)])
def test_bbox_identity(rho_c, half):
    box = cm.screen_bbox(np.eye(4), rho_c)
    assert bool(box.valid)
    np.testing.assert_allclose(box.b, [-half] * 3, rtol=1e-14)
    np.testing.assert_allclose(box.t, [half] * 3, rtol=1e-14)


def test_bbox_contains_sampled_surface(rng):
    sphere = fibonacci_sphere(10_000)
    cam = scenes.default_camera(64, 64)
    splats = random_splats_in_view(rng, 20, cam)
    rho_c = cm.splat_cutoff(splats.opacity, 1 / 255)
    Tp = cm.build_transforms(splats, cam).T_prime
    box = cm.screen_bbox(Tp, rho_c)
    for i in np.flatnonzero(box.valid):
        pts = np.concatenate([sphere * math.sqrt(rho_c[i]), np.ones((len(sphere), 1))], 1) @ Tp[i].T
        scr = pts[:, :3] / pts[:, 3:]
        span = box.t[i] - box.b[i]
        assert np.all(scr >= box.b[i] - 1e-9 * span) and np.all(scr <= box.t[i] + 1e-9 * span)
        # tight: the extreme samples reach every face
        np.testing.assert_allclose(scr.min(0), box.b[i], atol=1e-3 * np.abs(span).max())
        np.testing.assert_allclose(scr.max(0), box.t[i], atol=1e-3 * np.abs(span).max())


def test_bbox_flags_splat_straddling_eye_plane():
    cam = scenes.default_camera(64, 64)
    splat = unit_baked(mean=(0, 0, -4.0), scales=(1, 1, 1))
    box = cm.screen_bbox(cm.build_transforms(splat, cam).T_prime, 9.0)
    assert not bool(box.valid)
    assert np.all(np.isfinite(box.b)) and np.all(np.isfinite(box.t))


def test_bbox_degenerate_is_finite(rng):
    cam = scenes.default_camera(64, 64)
    for degenerate in (1, 2):
        raw = scenes.random_scene(50, rng, degenerate=degenerate)
        baked = cm.bake(raw)
        box = cm.screen_bbox(cm.build_transforms(baked, cam).T_prime, cm.splat_cutoff(baked.opacity, 1 / 255))
        assert np.all(np.isfinite(box.b)) and np.all(np.isfinite(box.t))


# --- planes and lines -------------------------------------------------------


def test_pixel_planes_center_convention():
    px, py = cm.pixel_planes_for_index(0, 0)
    np.testing.assert_array_equal(px, [1, 0, 0, -0.5])
    np.testing.assert_array_equal(py, [0, 1, 0, -0.5])
    np.testing.assert_array_equal(cm.pixel_planes(10.5, 0.0)[0], [1, 0, 0, -10.5])


def test_pixel_planes_contain_ray_points(rng):
    xs, ys = rng.uniform(0, 64, 2)
    px, py = cm.pixel_planes(xs, ys)
    for z in rng.uniform(-2, 2, 5):
        for w in (1.0, 2.5):
            X = np.array([xs * w, ys * w, z * w, w])
            assert px @ X == pytest.approx(0, abs=1e-12) and py @ X == pytest.approx(0, abs=1e-12)


def test_transport_planes_examples():
    np.testing.assert_array_equal(cm.transport_planes([1, 2, 3, 4], np.eye(4)), [1, 2, 3, 4])
    np.testing.assert_array_equal(cm.transport_planes([1, 0, 0, -4], np.diag([2.0, 1, 1, 1])), [2, 0, 0, -4])


def test_transport_planes_preimage_identity(rng):
    for _ in range(20):
        Tp = rng.normal(size=(4, 4))
        pi = rng.normal(size=4)
        X = rng.normal(size=4)
        lhs = cm.transport_planes(pi, Tp) @ X
        assert lhs == pytest.approx(pi @ (Tp @ X), abs=1e-12)
        # explicit inverse: points of the original plane map back onto the transported plane
        Y = X - (pi @ X) / (pi @ pi) * pi
        assert cm.transport_planes(pi, Tp) @ (np.linalg.inv(Tp) @ Y) == pytest.approx(0, abs=1e-9)


@pytest.mark.parametrize("a, b, d, m", [
    ([1, 0, 0, -2], [0, 1, 0, 0], [0, 0, 1], [0, -2, 0]),
    ([1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1], [0, 0, 0]),
])
def test_pluecker_examples(a, b, d, m):
    line = cm.pluecker_from_planes(a, b)
    np.testing.assert_array_equal(line.d, d)
    np.testing.assert_array_equal(line.m, m)


def test_pluecker_parallel_planes_raise():
    with pytest.raises(cm.RayUndefinedError):
        cm.pluecker_from_planes([1, 0, 0, 0], [2, 0, 0, 1])


def test_pluecker_incidence(rng):
    for _ in range(50):
        a, b = rng.normal(size=(2, 4))
        line = cm.pluecker_from_planes(a, b)
        # a point on both planes: least-norm solution plus multiples of d
        A = np.stack([a[:3], b[:3]])
        p0 = np.linalg.lstsq(A, -np.array([a[3], b[3]]), rcond=None)[0]
        for t in (-1.0, 0.0, 2.0):
            X = p0 + t * line.d
            np.testing.assert_allclose(np.cross(X, line.d), line.m, atol=1e-10)
        assert abs(line.d @ line.m) <= 1e-10 * np.linalg.norm(line.d) * np.linalg.norm(line.m) + 1e-14


def test_pixel_line_coefficients_match_planes(rng):
    cam = scenes.default_camera(64, 64)
    Tp = cm.build_transforms(random_splats_in_view(rng, 30, cam), cam).T_prime
    coeffs = cm.pixel_line_coefficients(Tp)
    xs, ys = rng.uniform(0, 64, (2, 30))
    px, py = cm.pixel_planes(xs, ys)
    ref = cm.pluecker_from_planes(cm.transport_planes(px, Tp), cm.transport_planes(py, Tp), check=False)
    line = cm.pixel_line(coeffs, xs, ys)
    scale = np.abs(ref.d).max() + np.abs(ref.m).max()
    np.testing.assert_allclose(line.d, ref.d, atol=1e-12 * scale)
    np.testing.assert_allclose(line.m, ref.m, atol=1e-12 * scale)


# --- rho, alpha, depth ------------------------------------------------------


def test_rho_squared_examples():
    assert cm.rho_squared(cm.PlueckerLine(np.array([0, 0, 1.0]), np.array([0, -2, 0.0]))) == 4.0
    assert cm.rho_squared(cm.PlueckerLine(np.array([0, 0, 1.0]), np.zeros(3))) == 0.0


def test_rho_squared_miss():
    assert cm.rho_squared(cm.PlueckerLine(np.zeros(3), np.ones(3))) == cm.MISS
    assert cm.rho_squared(cm.PlueckerLine(np.full(3, 1e-13), np.ones(3))) == cm.MISS


def test_rho_squared_matches_inverse_oracle(rng):
    cam = scenes.default_camera(64, 64)
    splats = random_splats_in_view(rng, 500, cam)
    xs, ys = rng.uniform(0, 64, (2, 500))
    Tp = cm.build_transforms(splats, cam).T_prime
    px, py = cm.pixel_planes(xs, ys)
    rho2 = cm.rho_squared(cm.pluecker_from_planes(cm.transport_planes(px, Tp), cm.transport_planes(py, Tp)))
    ref, unstable = oracle.rho2_by_inverse(splats, cam, xs, ys)
    ok = ~unstable
    assert ok.mean() > 0.9
    assert np.all(np.abs(rho2[ok] - ref[ok]) <= 1e-6 * np.maximum(1.0, ref[ok]))


@pytest.mark.parametrize("o, rho2, expected", [
    (0.7, 0.0, 0.7),
    (1.0, 9.0, math.exp(-4.5)),
    (0.5, 4.0, 0.5 * math.exp(-2.0)),
])
def test_alpha_from_rho2(o, rho2, expected):
    assert cm.alpha_from_rho2(o, rho2) == pytest.approx(min(expected, 0.999), rel=1e-14)


def test_alpha_example_values():
    assert cm.alpha_from_rho2(1.0, 9.0) == pytest.approx(0.0111, abs=1e-4)
    assert cm.alpha_from_rho2(0.5, 4.0) == pytest.approx(0.06767, abs=1e-5)


def test_alpha_strictly_decreasing():
    r = np.linspace(0, 30, 200)
    a = cm.alpha_from_rho2(0.9, r)
    assert a[0] == 0.9 and np.all(np.diff(a) < 0)


def test_max_contribution_depth_example():
    x, depth = cm.max_contribution_depth(cm.PlueckerLine(np.array([0, 0, 1.0]), np.array([0, -2, 0.0])), np.eye(4))
    np.testing.assert_allclose(x, [2, 0, 0], atol=1e-15)
    assert depth == 0.0


def test_max_contribution_depth_through_center():
    cam = scenes.default_camera(64, 64)
    splat = unit_baked(mean=(0.3, -0.2, 1.0), scales=(0.5, 0.2, 0.3))
    st = cm.build_transforms(splat, cam)
    xy, _ = cam.project(splat.mean)
    px, py = cm.pixel_planes(*xy)
    line = cm.pluecker_from_planes(cm.transport_planes(px, st.T_prime), cm.transport_planes(py, st.T_prime))
    x_view, _ = cm.max_contribution_depth(line, st)
    expected = cam.world_to_view @ np.append(splat.mean, 1.0)
    np.testing.assert_allclose(x_view, expected[:3], atol=1e-9)


def test_max_contribution_depth_matches_line_search(rng):
    cam = scenes.default_camera(64, 64)
    splats = random_splats_in_view(rng, 40, cam, z_range=(2.0, 8.0), log_scale_range=(-2.0, 0.0))
    # rays through the support of each splat (near its projected mean)
    xy, _ = cam.project(splats.mean)
    xs, ys = (xy + rng.uniform(-2, 2, xy.shape)).T
    st = cm.build_transforms(splats, cam)
    px, py = cm.pixel_planes(xs, ys)
    line = cm.pluecker_from_planes(cm.transport_planes(px, st.T_prime), cm.transport_planes(py, st.T_prime))
    x_view, _ = cm.max_contribution_depth(line, st)
    origin, dirs = cam.pixel_ray(xs, ys)
    rho2 = cm.rho_squared(line)
    assert np.mean(rho2 < 9.0) > 0.5
    for i in np.flatnonzero(rho2 < 9.0):
        s = splats.subset(i)
        t, _ = oracle.max_alpha_by_search(s, origin[i], dirs[i])
        world = origin[i] + t * dirs[i]
        view = cam.world_to_view @ np.append(world, 1.0)
        assert np.linalg.norm(view[:3] - x_view[i]) <= 1e-5


def test_degenerate_math_is_finite_or_miss(rng):
    cam = scenes.default_camera(64, 64)
    for degenerate in (1, 2):
        splats = cm.bake(scenes.random_scene(200, rng, degenerate=degenerate))
        st = cm.build_transforms(splats, cam)
        xs, ys = rng.uniform(0, 64, (2, 200))
        px, py = cm.pixel_planes(xs, ys)
        line = cm.pluecker_from_planes(cm.transport_planes(px, st.T_prime), cm.transport_planes(py, st.T_prime),
                                       check=False)
        rho2 = cm.rho_squared(line)
        assert not np.any(np.isnan(rho2))
        _, depth = cm.max_contribution_depth(line, st)
        hit = np.isfinite(rho2)
        assert np.all(np.isfinite(depth[hit]))


# --- config -----------------------------------------------------------------


@pytest.mark.parametrize("kw", [dict(K=65), dict(K=-1), dict(tau_alpha=0.1, tau_K=0.05), dict(tile_size=12),
                                dict(precision="float16"), dict(tau_alpha=0.0)])
def test_render_config_rejects(kw):
    with pytest.raises(cm.ConfigError):
        cm.RenderConfig(**kw)


@pytest.mark.parametrize("alias, mode", [("full-sort", cm.BlendMode.FULL_SORT), ("oit", cm.BlendMode.PURE_OIT),
                                         ("hybrid", cm.BlendMode.HYBRID), ("affine", cm.BlendMode.AFFINE_3DGS)])
def test_mode_aliases(alias, mode):
    assert cm.RenderConfig(mode=alias).mode is mode


def test_render_config_defaults():
    cfg = cm.RenderConfig()
    assert (cfg.K, cfg.tau_K, cfg.tile_size, cfg.background) == (16, 0.05, 8, (0.0, 0.0, 0.0))
    assert cfg.tau_alpha == pytest.approx(1 / 255)
    assert cfg.depth_sort_key is cm.DepthKey.MAX_CONTRIBUTION
    assert cm.RenderConfig(mode="global_mean_sort").depth_sort_key is cm.DepthKey.MEAN_VIEW_Z
    assert cm.RenderConfig(mode="pure_oit").effective_K == 0
