import os
import tempfile

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from htsplat import core_math as cm
from htsplat import oracle, scene_io, sh, verify
from htsplat.raster import pixel
from htsplat.raster.tiling import build_tiles

finite = st.floats(-10.0, 10.0, allow_nan=False, allow_infinity=False)
vec4 = hnp.arrays(np.float64, 4, elements=finite)
seeds = st.integers(0, 2 ** 32 - 1)
alphas = st.floats(1 / 255, 0.99)
fragments = st.lists(st.tuples(st.floats(0.1, 50.0), alphas, st.tuples(*[st.floats(0, 1)] * 3)),
                     min_size=0, max_size=12)


def random_view(seed):
    rng = np.random.default_rng(seed)
    cam = verify.random_camera(rng, 48, 40)
    return cam, verify.random_splats_in_view(rng, 1, cam)


@given(vec4, vec4)
def test_pluecker_moment_orthogonal_to_direction(a, b):
    line = cm.pluecker_from_planes(a, b, check=False)
    scale = (np.linalg.norm(a) * np.linalg.norm(b)) ** 2 + 1.0
    assert abs(np.dot(line.d, line.m)) <= 1e-12 * scale


@given(seeds, vec4, hnp.arrays(np.float64, 3, elements=finite))
def test_transported_plane_incidence(seed, pi, x):
    cam, splat = random_view(seed)
    Tp = cm.build_transforms(splat, cam).T_prime[0]
    X = np.append(x, 1.0)
    lhs = cm.transport_planes(pi, Tp) @ np.linalg.solve(Tp, X)
    assert abs(lhs - pi @ X) <= 1e-7 * (np.abs(pi).sum() * np.abs(X).sum() + 1.0)


@given(st.floats(0.01, 1.0), st.floats(0.0, 50.0), st.floats(0.0, 50.0))
def test_alpha_monotone_in_distance(o, r1, r2):
    lo, hi = sorted((r1, r2))
    a_lo, a_hi = cm.alpha_from_rho2(o, lo), cm.alpha_from_rho2(o, hi)
    assert a_hi <= a_lo <= cm.OPACITY_CLAMP


@settings(max_examples=25)
@given(seeds)
def test_bbox_contains_support(seed):
    cam, splat = random_view(seed)
    stack = cm.build_transforms(splat, cam)
    rho_c = cm.splat_cutoff(splat.opacity, 1 / 255)
    box = cm.screen_bbox(stack.T_prime, rho_c)
    if not box.valid[0]:
        return
    u = verify.fibonacci_sphere(500) * np.sqrt(rho_c[0])
    p = np.column_stack([u, np.ones(len(u))]) @ stack.T_prime[0].T
    xy = p[:, :2] / p[:, 3:4]
    span = box.t[0, :2] - box.b[0, :2]
    slack = 1e-6 * (1.0 + span)
    assert np.all(xy >= box.b[0, :2] - slack) and np.all(xy <= box.t[0, :2] + slack)


def stream(frags, K, tau_K):
    state = pixel.PixelState(K=K)
    for i, (z, a, c) in enumerate(frags):
        pixel.insert_fragment(state, z, a, c, i, tau_K=tau_K)
    return state


@given(fragments, st.randoms(use_true_random=False))
def test_finalize_independent_of_arrival_order(frags, r):
    other = list(frags)
    r.shuffle(other)
    for K, tau_K in ((4, 0.3), (0, 0.05)):
        a = pixel.finalize_pixel(stream(frags, K, tau_K))
        b = pixel.finalize_pixel(stream(other, K, tau_K))
        np.testing.assert_allclose(a, b, atol=1e-12)


@given(fragments)
def test_large_core_equals_exact_blend(frags):
    state = stream(frags, len(frags) + 1, 1 / 255)
    want = oracle.blend_exact([f[0] for f in frags], [f[1] for f in frags],
                              [f[2] for f in frags] if frags else np.zeros((0, 3)), (0.2, 0.3, 0.4))
    np.testing.assert_allclose(pixel.finalize_pixel(state, (0.2, 0.3, 0.4)), want, atol=1e-12)


@given(fragments, st.integers(0, 8), st.floats(1 / 255, 1.0))
def test_transmittance_in_unit_interval(frags, K, tau_K):
    T = pixel.final_transmittance(stream(frags, K, tau_K))
    assert 0.0 < T <= 1.0


@given(hnp.arrays(np.float64, (5, 3), elements=st.floats(-1, 1)).filter(
    lambda d: np.all(np.linalg.norm(d, axis=1) > 1e-3)))
def test_sh_band_parity(d):
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    parity = np.array([(-1) ** l for l in range(4) for _ in range(2 * l + 1)])
    np.testing.assert_allclose(sh.sh_basis(-d), sh.sh_basis(d) * parity, atol=1e-14)


f32 = st.floats(-1e6, 1e6, width=32, allow_nan=False)


@settings(max_examples=20)
@given(st.integers(0, 6).flatmap(lambda n: st.tuples(
    hnp.arrays(np.float64, (n, 3), elements=f32), hnp.arrays(np.float64, (n, 4), elements=f32),
    hnp.arrays(np.float64, (n, 3), elements=f32), hnp.arrays(np.float64, n, elements=f32),
    hnp.arrays(np.float64, (n, cm.SH_COEFFS, 3), elements=f32))))
def test_scene_round_trip_exact(fields):
    raw = cm.RawSplat(*fields)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "s.ply")
        scene_io.save_scene(raw, path)
        back = scene_io.load_scene(path)
    for name in ("mean", "rot", "log_scales", "opacity_logit", "sh"):
        np.testing.assert_array_equal(getattr(back, name), getattr(raw, name))


boxes = st.lists(st.tuples(st.floats(-20, 60), st.floats(-20, 60), st.floats(0, 30), st.floats(0, 30)),
                 min_size=1, max_size=10)


@given(boxes, st.sampled_from([1, 4, 8, 16]))
def test_tile_lists_match_pixel_coverage(bx, ts):
    W, H = 37, 29
    b = np.array([[x, y] for x, y, _, _ in bx])
    t = b + np.array([[w, h] for _, _, w, h in bx])
    tiles = build_tiles(b, t, W, H, ts)
    cx, cy = np.arange(W) + 0.5, np.arange(H) + 0.5
    for i in range(len(b)):
        inx = (cx >= b[i, 0]) & (cx <= t[i, 0])
        iny = (cy >= b[i, 1]) & (cy <= t[i, 1])
        for ty in range(tiles.tiles_y):
            for tx in range(tiles.tiles_x):
                want = inx[tx * ts:(tx + 1) * ts].any() and iny[ty * ts:(ty + 1) * ts].any()
                assert (i in tiles.splats_in(tx, ty)) == want
