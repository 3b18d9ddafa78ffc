import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcardnet import kernels

needs_compiled = pytest.mark.skipif(kernels.compiled_backend is None, reason="extension not built")


def test_out_size():
    assert kernels.out_size(224, 3, 2, 1) == 112
    assert kernels.out_size(112, 3, 2, 1) == 56
    assert kernels.out_size(7, 2, 2, 0) == 3


def test_non_positive_output_rejected():
    x = np.zeros((1, 1, 2, 2), dtype=np.float32)
    with pytest.raises(ValueError):
        kernels.numpy_backend.im2col(x, 3, 3, 1, 0)


def test_im2col_matches_direct_windows(rng):
    x = rng.random((2, 3, 5, 6))
    cols = kernels.numpy_backend.im2col(x, 3, 3, 2, 1)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    OH, OW = kernels.out_size(5, 3, 2, 1), kernels.out_size(6, 3, 2, 1)
    for oh in range(OH):
        for ow in range(OW):
            patch = xp[:, :, 2 * oh:2 * oh + 3, 2 * ow:2 * ow + 3].reshape(2, -1)
            np.testing.assert_array_equal(cols[:, :, oh * OW + ow], patch)


def test_col2im_is_adjoint_of_im2col(rng):
    x = rng.random((2, 3, 6, 6))
    cols_shape = kernels.numpy_backend.im2col(x, 3, 3, 1, 1).shape
    c = rng.random(cols_shape)
    lhs = np.sum(kernels.numpy_backend.im2col(x, 3, 3, 1, 1) * c)
    rhs = np.sum(x * kernels.numpy_backend.col2im(c, x.shape, 3, 3, 1, 1))
    assert abs(lhs - rhs) < 1e-9 * abs(lhs)


def test_maxpool_tie_goes_to_first_scanned():
    x = np.ones((1, 1, 2, 2), dtype=np.float64)
    out, argmax = kernels.numpy_backend.maxpool_forward(x, 2, 2, 0)
    assert out[0, 0, 0, 0] == 1.0
    dx = kernels.numpy_backend.maxpool_backward(np.ones_like(out), argmax, x.shape)
    np.testing.assert_array_equal(dx[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_avgpool_drops_trailing_odd_row():
    x = np.arange(25, dtype=np.float64).reshape(1, 1, 5, 5)
    out = kernels.numpy_backend.avgpool_forward(x, 2, 2, 0)
    assert out.shape == (1, 1, 2, 2)
    assert out[0, 0, 0, 0] == (0 + 1 + 5 + 6) / 4


geometry = st.sampled_from([(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)])


@needs_compiled
@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(1, 2), c=st.integers(1, 4), h=st.integers(2, 9),
    geom=geometry, dtype=st.sampled_from([np.float32, np.float64]), seed=st.integers(0, 2**32 - 1),
)
def test_backends_agree_bitwise(n, c, h, geom, dtype, seed):
    k, s, p = geom
    if kernels.out_size(h, k, s, p) < 1:
        return
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, c, h, h)).astype(dtype)
    comp, ref = kernels.compiled_backend, kernels.numpy_backend
    cols = ref.im2col(x, k, k, s, p)
    np.testing.assert_array_equal(comp.im2col(x, k, k, s, p), cols)
    g = r.standard_normal(cols.shape).astype(dtype)
    np.testing.assert_array_equal(comp.col2im(g, x.shape, k, k, s, p), ref.col2im(g, x.shape, k, k, s, p))

    pk, ps, pp = (3, 2, 1) if h >= 3 else (2, 2, 0)
    o1, a1 = comp.maxpool_forward(x, pk, ps, pp)
    o2, a2 = ref.maxpool_forward(x, pk, ps, pp)
    np.testing.assert_array_equal(o1, o2)
    np.testing.assert_array_equal(a1, a2)
    d = r.standard_normal(o1.shape).astype(dtype)
    np.testing.assert_array_equal(comp.maxpool_backward(d, a1, x.shape), ref.maxpool_backward(d, a2, x.shape))

    np.testing.assert_array_equal(comp.avgpool_forward(x, 2, 2, 0), ref.avgpool_forward(x, 2, 2, 0))
    d2 = r.standard_normal(ref.avgpool_forward(x, 2, 2, 0).shape).astype(dtype)
    np.testing.assert_array_equal(comp.avgpool_backward(d2, x.shape, 2, 2, 0), ref.avgpool_backward(d2, x.shape, 2, 2, 0))


def test_use_backend_switches_and_restores():
    original = kernels.BACKEND
    try:
        kernels.use_backend("numpy")
        assert kernels.BACKEND == "numpy"
        with pytest.raises(ValueError):
            kernels.use_backend("gpu")
    finally:
        kernels.use_backend(original)
