"""The numba and numpy variants of each kernel must agree."""
import numpy as np
import pytest

from afterunet import kernels as K


@pytest.fixture
def rng():
    return np.random.default_rng(5)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_im2col_col2im_agree(rng, dtype):
    xp = rng.normal(size=(2, 3, 7, 6)).astype(dtype)
    a, b = K.im2col_numpy(xp, 3), K.im2col_numba(xp, 3)
    assert a.dtype == b.dtype == dtype
    np.testing.assert_array_equal(a, b)
    cols = rng.normal(size=a.shape).astype(dtype)
    np.testing.assert_allclose(K.col2im_numpy(cols, 3, 7, 6, 3), K.col2im_numba(cols, 3, 7, 6, 3),
                               rtol=1e-5 if dtype == np.float32 else 1e-12)


def test_col2im_is_adjoint_of_im2col(rng):
    x = rng.normal(size=(1, 2, 5, 5))
    c = rng.normal(size=(1, 18, 9))
    lhs = (K.im2col_numpy(x, 3) * c).sum()
    rhs = (x * K.col2im_numpy(c, 2, 5, 5, 3)).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_maxpool_agree_with_ties(rng):
    x = rng.integers(0, 3, size=(2, 3, 6, 8)).astype(np.float64)  # many ties
    o1, a1 = K.maxpool2_forward_numpy(x)
    o2, a2 = K.maxpool2_forward_numba(x)
    np.testing.assert_array_equal(o1, o2)
    np.testing.assert_array_equal(a1, a2)
    g = rng.normal(size=o1.shape)
    np.testing.assert_array_equal(K.maxpool2_backward_numpy(g, a1), K.maxpool2_backward_numba(g, a2))


def test_trilinear_agree_and_bounded(rng):
    a = rng.uniform(-2, 5, size=(4, 5, 6))
    cx, cy, cz = np.linspace(-0.5, 3.5, 7), np.linspace(0, 4, 3), np.linspace(0.2, 5.9, 11)
    t1 = K.trilinear_grid_numpy(a, cx, cy, cz)
    t2 = K.trilinear_grid_numba(a, cx, cy, cz)
    np.testing.assert_allclose(t1, t2, rtol=1e-12, atol=1e-12)
    assert t1.min() >= a.min() - 1e-12 and t1.max() <= a.max() + 1e-12


def test_trilinear_at_grid_nodes_is_exact(rng):
    a = rng.normal(size=(3, 4, 5))
    out = K.trilinear_grid_numba(a, np.arange(3.0), np.arange(4.0), np.arange(5.0))
    np.testing.assert_array_equal(out, a)


def test_trilinear_matches_pointwise_formula(rng):
    a = rng.normal(size=(3, 3, 3))
    x, y, z = 0.3, 1.6, 0.75
    want = 0.0
    for i, wi in ((0, 0.7), (1, 0.3)):
        for j, wj in ((1, 0.4), (2, 0.6)):
            for k, wk in ((0, 0.25), (1, 0.75)):
                want += wi * wj * wk * a[i, j, k]
    got = K.trilinear_grid_numpy(a, [x], [y], [z])[0, 0, 0]
    assert got == pytest.approx(want, rel=1e-12)
