import numpy as np
import pytest
from scipy import ndimage

from oracles import dense_velocity, smooth_random_image
from sua.core import AdmmConfig, ParameterError, ShapeError
from sua.structex import edge_sketch
from sua.spatx import (DiffeoPair, compose, integrate, interior, inverse_consistency,
                       jacobian_determinant, laplacian_symbol, multinomial_orders, nth_gradient,
                       periodic_regulariser, register, sample, solve_velocity, solve_velocity_full,
                       velocity_objective, warp, warp_mask, warp_mask_to_edges)


def test_multinomial_weights():
    w = [round(x * x) for _, _, x in multinomial_orders(3)]
    assert w == [1, 3, 3, 1]
    assert [k1 for k1, _, _ in multinomial_orders(3)] == [3, 2, 1, 0]


def test_first_gradient_is_forward_difference():
    img = np.random.default_rng(0).random((7, 9))
    d = nth_gradient(img, 1)
    np.testing.assert_allclose(d[0][:, :-1], np.diff(img, axis=1))
    np.testing.assert_allclose(d[1][:-1], np.diff(img, axis=0))


def test_nth_gradient_kills_low_degree_polynomials():
    yy, xx = np.mgrid[0:12, 0:12].astype(float)
    quad = 0.3 * xx ** 2 - 0.1 * xx * yy + 0.2 * yy ** 2 + xx
    assert np.abs(nth_gradient(quad, 3)[:, 2:-3, 2:-3]).max() < 1e-9
    assert nth_gradient(np.zeros((2, 10, 10)), 3).shape == (4, 2, 10, 10)


def test_nth_gradient_argument_checks():
    with pytest.raises(ParameterError):
        nth_gradient(np.zeros((8, 8)), 0)
    with pytest.raises(ShapeError):
        nth_gradient(np.zeros((3, 3)), 3)


def test_weighted_sum_of_squares_matches_fourier_regulariser():
    gen = np.random.default_rng(1)
    v = gen.standard_normal((2, 10, 12))
    for n in (1, 2, 3):
        total = 0.0
        for k1, k2, w in multinomial_orders(n):
            d = v
            for _ in range(k1):
                d = np.roll(d, -1, axis=-1) - d
            for _ in range(k2):
                d = np.roll(d, -1, axis=-2) - d
            total += w * w * np.sum(d * d)
        assert periodic_regulariser(v, n) == pytest.approx(total, rel=1e-10)


def test_laplacian_symbol_real_layout():
    full = laplacian_symbol((6, 8))
    half = laplacian_symbol((6, 8), real=True)
    np.testing.assert_allclose(half, full[:, :5])
    assert full[0, 0] == 0


def test_admm_matches_dense_solve():
    gen = np.random.default_rng(2)
    src = smooth_random_image(gen, 10)
    tgt = smooth_random_image(gen, 10)
    cfg = AdmmConfig(padding=4, max_iterations=5000, tolerance=1e-11)
    res = solve_velocity_full(src, tgt, cfg)
    ref = dense_velocity(src, tgt, cfg)
    assert np.linalg.norm(res.padded - ref) / np.linalg.norm(ref) < 1e-6
    assert velocity_objective(res.padded, src, tgt, cfg) <= velocity_objective(ref, src, tgt, cfg) * (1 + 1e-9)


def test_default_admm_is_close_to_optimum():
    gen = np.random.default_rng(3)
    src = smooth_random_image(gen, 12)
    tgt = smooth_random_image(gen, 12)
    cfg = AdmmConfig()
    res = solve_velocity_full(src, tgt, cfg)
    ref = dense_velocity(src, tgt, cfg)
    assert res.iterations <= cfg.max_iterations
    assert np.linalg.norm(res.padded - ref) / np.linalg.norm(ref) < 0.02


def test_velocity_of_identical_images_is_zero():
    img = smooth_random_image(np.random.default_rng(4), 16)
    assert np.abs(solve_velocity(img, img)).max() == 0.0


def test_velocity_points_along_a_small_shift():
    yy, xx = np.mgrid[0:32, 0:32].astype(float)
    src = 0.5 + 0.4 * np.sin(2 * np.pi * xx / 32)
    tgt = 0.5 + 0.4 * np.sin(2 * np.pi * (xx + 0.5) / 32)
    v = solve_velocity(src, tgt, AdmmConfig(smoothness=10, max_iterations=500, tolerance=1e-8))
    assert np.median(interior(v[0], 8)) > 0.2
    assert np.abs(interior(v[1], 8)).max() < 0.05


def test_warp_identity_and_integer_shift():
    img = np.random.default_rng(5).random((9, 11))
    np.testing.assert_array_equal(warp(img, np.zeros((2, 9, 11))), img)
    shift = np.zeros((2, 9, 11))
    shift[0] = 2.0
    out = warp(img, shift)
    np.testing.assert_allclose(out[:, :-2], img[:, 2:])
    np.testing.assert_allclose(out[:, -2:], img[:, -1:].repeat(2, axis=1))


def test_warp_is_linear_in_the_image():
    gen = np.random.default_rng(6)
    a, b = gen.random((2, 12, 12))
    fld = gen.uniform(-2, 2, (2, 12, 12))
    np.testing.assert_allclose(warp(0.3 * a + 0.7 * b, fld), 0.3 * warp(a, fld) + 0.7 * warp(b, fld))


def test_warp_shape_errors():
    with pytest.raises(ShapeError):
        warp(np.zeros((8, 8)), np.zeros((2, 9, 9)))
    with pytest.raises(ShapeError):
        warp(np.zeros((8, 8)), np.zeros((3, 8, 8)))


def test_compose_translations_add():
    a = np.zeros((2, 10, 10))
    a[0] = 1.0
    b = np.zeros((2, 10, 10))
    b[1] = 2.0
    c = compose(a, b)
    np.testing.assert_allclose(c[0], 1.0)
    np.testing.assert_allclose(c[1], 2.0)


def test_compose_matches_sequential_warps():
    gen = np.random.default_rng(7)
    img = ndimage.gaussian_filter(gen.random((24, 24)), 2)
    f = ndimage.gaussian_filter(gen.uniform(-1, 1, (2, 24, 24)), (0, 4, 4))
    g = ndimage.gaussian_filter(gen.uniform(-1, 1, (2, 24, 24)), (0, 4, 4))
    # img(p + g(p) + f(p + g(p))) = (warp by f, then by g)
    np.testing.assert_allclose(interior(warp(img, compose(f, g)), 3),
                               interior(warp(warp(img, f), g), 3), atol=2e-3)


def test_warp_mask_keeps_labels():
    mask = np.zeros((16, 16), np.int64)
    mask[4:10, 5:12] = 2
    mask[10:14, 2:6] = 1
    fld = np.random.default_rng(8).uniform(-1.5, 1.5, (2, 16, 16))
    out = warp_mask(mask, fld, n_classes=3)
    assert set(np.unique(out)) <= {0, 1, 2}
    np.testing.assert_array_equal(warp_mask(mask, np.zeros((2, 16, 16))), mask)
    boolean = warp_mask(mask > 0, fld)
    assert boolean.dtype == bool


def test_warp_mask_to_edges_is_boundary_of_warped_mask():
    mask = np.zeros((16, 16), bool)
    mask[4:12, 4:12] = True
    np.testing.assert_array_equal(warp_mask_to_edges(mask, np.zeros((2, 16, 16))),
                                  edge_sketch(mask.astype(np.int64)))
    shift = np.zeros((2, 16, 16))
    shift[0] = -2.0
    moved = warp_mask_to_edges(mask, shift)
    np.testing.assert_array_equal(moved[:, 2:], edge_sketch(mask.astype(np.int64))[:, :-2])


def test_jacobian_of_linear_map():
    yy, xx = np.mgrid[0:10, 0:10].astype(float)
    fld = np.stack([0.2 * xx + 0.1 * yy, -0.3 * yy])
    np.testing.assert_allclose(jacobian_determinant(fld), 1.2 * 0.7)
    np.testing.assert_allclose(jacobian_determinant(np.zeros((2, 5, 5))), 1.0)


def test_integrate_zero_velocity_is_identity():
    pair = integrate([np.zeros((2, 12, 12))] * 4)
    assert np.abs(pair.forward).max() == 0 and np.abs(pair.inverse).max() == 0
    assert pair.steps == 4 and pair.rescale == [1.0] * 4


def test_integrate_constant_velocity_translates():
    v = np.zeros((2, 12, 12))
    v[0] = 1.0
    pair = integrate([v] * 5)
    np.testing.assert_allclose(pair.forward[0], 1.0)
    np.testing.assert_allclose(pair.inverse[0], -1.0)


def test_integrate_caps_large_steps():
    v = np.zeros((2, 12, 12))
    v[1] = 2.0
    pair = integrate([v, v])
    assert pair.rescale == [pytest.approx(0.4), pytest.approx(0.4)]
    np.testing.assert_allclose(pair.forward[1], 0.8)
    with pytest.raises(ParameterError):
        integrate([])
    with pytest.raises(ParameterError):
        integrate([v], n_steps=3)


def test_integrate_inverse_consistency_and_positive_jacobian():
    gen = np.random.default_rng(9)
    vels = [ndimage.gaussian_filter(gen.uniform(-8, 8, (2, 32, 32)), (0, 5, 5)) for _ in range(10)]
    pair = integrate(vels)
    mean, worst = inverse_consistency(pair)
    assert mean < 0.05 and worst < 0.2
    assert (jacobian_determinant(pair.forward) > 0).all()
    assert (jacobian_determinant(pair.inverse) > 0).all()


def test_register_identical_images_gives_identity():
    img = smooth_random_image(np.random.default_rng(10), 32, sigma=3)
    pair = register(img, img)
    assert np.abs(pair.forward).max() == 0


def test_register_reduces_error_and_stays_invertible():
    gen = np.random.default_rng(11)
    src = smooth_random_image(gen, 48, sigma=3)
    fld = np.zeros((2, 48, 48))
    fld[0] = 1.5
    tgt = warp(src, fld)
    pair, info = register(src, tgt, return_info=True)
    assert info.energy_end < 0.2 * info.energy_start
    assert info.ssim_end >= info.ssim_start
    assert np.median(interior(pair.forward[0], 8)) == pytest.approx(1.5, abs=0.3)
    assert (jacobian_determinant(pair.forward) > 0).mean() > 0.995


def test_diffeo_pair_save_load(tmp_path):
    v = np.random.default_rng(12).uniform(-1, 1, (2, 8, 8))
    pair = integrate([v, v, v])
    pair.save(tmp_path / "phi_0.suat", tmp_path / "phi_inv_0.suat", tmp_path / "phi_0.json", {"k": 1})
    back = DiffeoPair.load(tmp_path / "phi_0.suat", tmp_path / "phi_inv_0.suat", tmp_path / "phi_0.json")
    np.testing.assert_allclose(back.forward, pair.forward, atol=1e-6)
    assert back.steps == 3 and back.rescale == pytest.approx(pair.rescale)


def test_sample_stack_matches_per_channel():
    gen = np.random.default_rng(13)
    stack = gen.random((3, 9, 9))
    fld = gen.uniform(-1, 1, (2, 9, 9))
    out = sample(stack, fld)
    for c in range(3):
        np.testing.assert_array_equal(out[c], sample(stack[c], fld))
