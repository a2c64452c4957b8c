import numpy as np
import pytest

from hfmf import _kernels_py, kernels

compiled = pytest.importorskip("hfmf._kernels")

SHAPES = [
    # B, C, H, W, k, stride, pad
    (1, 1, 5, 5, 3, 1, 0),
    (2, 3, 8, 8, 3, 1, 1),
    (4, 16, 32, 32, 3, 2, 1),
    (3, 8, 7, 9, 2, 2, 0),
    (2, 3, 32, 32, 8, 8, 0),
]


@pytest.mark.parametrize("shape", SHAPES)
def test_im2col_parity(shape):
    B, C, H, W, k, s, p = shape
    x = np.random.default_rng(0).normal(size=(B, C, H, W))
    np.testing.assert_array_equal(compiled.im2col(x, k, k, s, p), _kernels_py.im2col(x, k, k, s, p))


@pytest.mark.parametrize("shape", SHAPES)
def test_col2im_parity(shape):
    B, C, H, W, k, s, p = shape
    Ho = (H + 2 * p - k) // s + 1
    Wo = (W + 2 * p - k) // s + 1
    cols = np.random.default_rng(1).normal(size=(B, C * k * k, Ho * Wo))
    np.testing.assert_allclose(compiled.col2im(cols, C, H, W, k, k, s, p),
                               _kernels_py.col2im(cols, C, H, W, k, k, s, p), rtol=0, atol=1e-13)


@pytest.mark.parametrize("shape", SHAPES)
def test_col2im_is_adjoint_of_im2col(shape):
    # <im2col(x), c> == <x, col2im(c)>
    B, C, H, W, k, s, p = shape
    r = np.random.default_rng(2)
    x = r.normal(size=(B, C, H, W))
    cols = kernels.im2col(x, k, k, s, p)
    c = r.normal(size=cols.shape)
    lhs = np.sum(cols * c)
    rhs = np.sum(x * kernels.col2im(c, C, H, W, k, k, s, p))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_backend_selected():
    assert kernels.BACKEND in ("cython", "python")
