import numpy as np
import pytest

from sua import kernels

BACKENDS = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])


def brute_potts_1d(f, gamma):
    """Exhaustive search over all segmentations of a short signal."""
    n = len(f)
    best = (np.inf, None)
    for bits in range(1 << (n - 1)):
        cuts = [0] + [i + 1 for i in range(n - 1) if bits >> i & 1] + [n]
        e = gamma * (len(cuts) - 2)
        for a, b in zip(cuts[:-1], cuts[1:]):
            e += float(np.sum((f[a:b] - f[a:b].mean()) ** 2))
        if e < best[0] - 1e-12:
            best = (e, cuts)
    return best


def energy_1d(f, recon, gamma):
    jumps = np.count_nonzero(np.abs(np.diff(recon)) > 0)
    return float(np.sum((f - recon) ** 2)) + gamma * jumps


@pytest.mark.parametrize("backend", BACKENDS)
def test_row_dp_is_exact(backend):
    gen = np.random.default_rng(5)
    for _ in range(40):
        n = int(gen.integers(1, 10))
        f = gen.random(n)
        gamma = float(gen.uniform(0.01, 0.5))
        labels, recon = kernels.potts_rows(f[None], gamma, backend=backend)
        e_brute, _ = brute_potts_1d(f, gamma)
        assert energy_1d(f, recon[0], gamma) == pytest.approx(e_brute, abs=1e-12)


def test_backends_agree_on_potts_rows():
    if len(BACKENDS) < 2:
        pytest.skip("compiled kernels not built")
    gen = np.random.default_rng(0)
    data = gen.random((20, 33))
    for gamma in (0.0, 0.05, 0.3, 2.0):
        la, ra = kernels.potts_rows(data, gamma, backend="python")
        lb, rb = kernels.potts_rows(data, gamma, backend="cython")
        np.testing.assert_array_equal(la, lb)
        np.testing.assert_allclose(ra, rb, atol=1e-12)


def test_backends_agree_on_bilinear():
    if len(BACKENDS) < 2:
        pytest.skip("compiled kernels not built")
    gen = np.random.default_rng(1)
    stack = gen.random((3, 12, 10))
    x = gen.uniform(-3, 13, (12, 10))
    y = gen.uniform(-3, 15, (12, 10))
    np.testing.assert_allclose(kernels.bilinear_sample(stack, x, y, backend="python"),
                               kernels.bilinear_sample(stack, x, y, backend="cython"), atol=1e-13)


@pytest.mark.parametrize("backend", BACKENDS)
def test_bilinear_hits_grid_points_and_clamps(backend):
    stack = np.arange(20.0).reshape(1, 4, 5)
    yy, xx = np.mgrid[0:4, 0:5].astype(float)
    np.testing.assert_array_equal(kernels.bilinear_sample(stack, xx, yy, backend=backend), stack)
    far = kernels.bilinear_sample(stack, np.full((1, 1), 99.0), np.full((1, 1), -7.0), backend=backend)
    assert far[0, 0, 0] == stack[0, 0, 4]
    mid = kernels.bilinear_sample(stack, np.full((1, 1), 0.5), np.full((1, 1), 0.5), backend=backend)
    assert mid[0, 0, 0] == pytest.approx((0 + 1 + 5 + 6) / 4)


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.potts_rows(np.zeros((2, 2)), 0.1, backend="fortran")
