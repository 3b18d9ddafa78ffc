"""Hot loops behind conv2d and pool2d, with a compiled and a numpy backend.

The compiled backend (``dcardnet._ckernels``, built from Cython) is selected
at import when it is available. Set ``DCARDNET_PURE_PYTHON=1`` before import to
force the numpy backend. Both backends produce bitwise-identical results:
they share loop orders, so floating-point accumulation happens in the same
sequence.

All functions take and return C-contiguous float32/float64 arrays.
"""

import os
from types import SimpleNamespace

import numpy as np


def out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _check_geometry(H, W, kh, kw, stride, pad):
    oh, ow = out_size(H, kh, stride, pad), out_size(W, kw, stride, pad)
    if oh <= 0 or ow <= 0:
        raise ValueError(
            f"non-positive output size {oh}x{ow} for input {H}x{W}, "
            f"kernel {kh}x{kw}, stride {stride}, pad {pad}"
        )
    return oh, ow


# ---------------------------------------------------------------------------
# numpy reference backend
# ---------------------------------------------------------------------------


def _np_im2col(x, kh, kw, stride, pad):
    N, C, H, W = x.shape
    OH, OW = _check_geometry(H, W, kh, kw, stride, pad)
    img = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((N, C, kh, kw, OH, OW), dtype=x.dtype)
    for i in range(kh):
        i_end = i + stride * OH
        for j in range(kw):
            j_end = j + stride * OW
            cols[:, :, i, j] = img[:, :, i:i_end:stride, j:j_end:stride]
    return cols.reshape(N, C * kh * kw, OH * OW)


def _np_col2im(cols, x_shape, kh, kw, stride, pad):
    N, C, H, W = x_shape
    OH, OW = _check_geometry(H, W, kh, kw, stride, pad)
    cols = cols.reshape(N, C, kh, kw, OH, OW)
    # extra stride-1 margin keeps every slice end in range
    img = np.zeros((N, C, H + 2 * pad + stride - 1, W + 2 * pad + stride - 1), dtype=cols.dtype)
    for i in range(kh):
        i_end = i + stride * OH
        for j in range(kw):
            j_end = j + stride * OW
            img[:, :, i:i_end:stride, j:j_end:stride] += cols[:, :, i, j]
    return np.ascontiguousarray(img[:, :, pad:pad + H, pad:pad + W])


def _np_maxpool_forward(x, k, stride, pad):
    N, C, H, W = x.shape
    OH, OW = _check_geometry(H, W, k, k, stride, pad)
    img = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf) if pad else x
    best = np.full((N, C, OH, OW), -np.inf, dtype=x.dtype)
    arg = np.zeros((N, C, OH, OW), dtype=np.int64)
    oh_idx = np.arange(OH)[:, None] * stride
    ow_idx = np.arange(OW)[None, :] * stride
    for i in range(k):
        for j in range(k):
            v = img[:, :, i:i + stride * OH:stride, j:j + stride * OW:stride]
            take = v > best
            best = np.where(take, v, best)
            flat = (oh_idx + i - pad) * W + (ow_idx + j - pad)
            arg = np.where(take, flat, arg)
    return best, arg


def _np_maxpool_backward(dout, argmax, x_shape):
    N, C, H, W = x_shape
    dx = np.zeros((N * C, H * W), dtype=dout.dtype)
    rows = np.repeat(np.arange(N * C), argmax.shape[2] * argmax.shape[3])
    np.add.at(dx, (rows, argmax.reshape(-1)), dout.reshape(-1))
    return dx.reshape(x_shape)


def _np_avgpool_forward(x, k, stride, pad):
    N, C, H, W = x.shape
    OH, OW = _check_geometry(H, W, k, k, stride, pad)
    img = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    acc = np.zeros((N, C, OH, OW), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            acc += img[:, :, i:i + stride * OH:stride, j:j + stride * OW:stride]
    return acc * x.dtype.type(1.0 / (k * k))


def _np_avgpool_backward(dout, x_shape, k, stride, pad):
    N, C, H, W = x_shape
    OH, OW = dout.shape[2], dout.shape[3]
    g = dout * dout.dtype.type(1.0 / (k * k))
    img = np.zeros((N, C, H + 2 * pad + stride - 1, W + 2 * pad + stride - 1), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            img[:, :, i:i + stride * OH:stride, j:j + stride * OW:stride] += g
    return np.ascontiguousarray(img[:, :, pad:pad + H, pad:pad + W])


numpy_backend = SimpleNamespace(
    name="numpy",
    im2col=_np_im2col,
    col2im=_np_col2im,
    maxpool_forward=_np_maxpool_forward,
    maxpool_backward=_np_maxpool_backward,
    avgpool_forward=_np_avgpool_forward,
    avgpool_backward=_np_avgpool_backward,
)


# ---------------------------------------------------------------------------
# compiled backend wrappers
# ---------------------------------------------------------------------------


def _make_compiled_backend(ck):
    def im2col(x, kh, kw, stride, pad):
        N, C, H, W = x.shape
        OH, OW = _check_geometry(H, W, kh, kw, stride, pad)
        cols = np.empty((N, C * kh * kw, OH * OW), dtype=x.dtype)
        ck.im2col(np.ascontiguousarray(x), kh, kw, stride, pad, cols)
        return cols

    def col2im(cols, x_shape, kh, kw, stride, pad):
        _check_geometry(x_shape[2], x_shape[3], kh, kw, stride, pad)
        dx = np.zeros(x_shape, dtype=cols.dtype)
        ck.col2im(np.ascontiguousarray(cols), kh, kw, stride, pad, dx)
        return dx

    def maxpool_forward(x, k, stride, pad):
        N, C, H, W = x.shape
        OH, OW = _check_geometry(H, W, k, k, stride, pad)
        out = np.empty((N, C, OH, OW), dtype=x.dtype)
        arg = np.empty((N, C, OH, OW), dtype=np.int64)
        ck.maxpool_forward(np.ascontiguousarray(x), k, stride, pad, out, arg)
        return out, arg

    def maxpool_backward(dout, argmax, x_shape):
        dx = np.zeros(x_shape, dtype=dout.dtype)
        ck.maxpool_backward(np.ascontiguousarray(dout), argmax, dx)
        return dx

    def avgpool_forward(x, k, stride, pad):
        N, C, H, W = x.shape
        OH, OW = _check_geometry(H, W, k, k, stride, pad)
        out = np.empty((N, C, OH, OW), dtype=x.dtype)
        ck.avgpool_forward(np.ascontiguousarray(x), k, stride, pad, out)
        return out

    def avgpool_backward(dout, x_shape, k, stride, pad):
        dx = np.zeros(x_shape, dtype=dout.dtype)
        ck.avgpool_backward(np.ascontiguousarray(dout), k, stride, pad, dx)
        return dx

    return SimpleNamespace(
        name="compiled",
        im2col=im2col,
        col2im=col2im,
        maxpool_forward=maxpool_forward,
        maxpool_backward=maxpool_backward,
        avgpool_forward=avgpool_forward,
        avgpool_backward=avgpool_backward,
    )


try:
    from dcardnet import _ckernels
except ImportError:  # extension not built
    compiled_backend = None
else:
    compiled_backend = _make_compiled_backend(_ckernels)


def _select():
    if os.environ.get("DCARDNET_PURE_PYTHON", "") not in ("", "0") or compiled_backend is None:
        return numpy_backend
    return compiled_backend


backend = _select()
BACKEND = backend.name


def use_backend(name):
    """Switch the active backend at runtime ("compiled", "numpy" or "auto")."""
    global backend, BACKEND
    if name == "auto":
        backend = _select()
    elif name == "numpy":
        backend = numpy_backend
    elif name == "compiled":
        if compiled_backend is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
        backend = compiled_backend
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = backend.name
    return backend


def im2col(x, kh, kw, stride, pad):
    return backend.im2col(x, kh, kw, stride, pad)


def col2im(cols, x_shape, kh, kw, stride, pad):
    return backend.col2im(cols, x_shape, kh, kw, stride, pad)


def maxpool_forward(x, k, stride, pad):
    return backend.maxpool_forward(x, k, stride, pad)


def maxpool_backward(dout, argmax, x_shape):
    return backend.maxpool_backward(dout, argmax, x_shape)


def avgpool_forward(x, k, stride, pad):
    return backend.avgpool_forward(x, k, stride, pad)


def avgpool_backward(dout, x_shape, k, stride, pad):
    return backend.avgpool_backward(dout, x_shape, k, stride, pad)
