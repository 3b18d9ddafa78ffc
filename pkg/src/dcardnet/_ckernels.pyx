# Compiled inner loops for convolution and pooling.
#
# Every routine writes into caller-allocated arrays; allocation, dtype
# dispatch and shape validation live in dcardnet.kernels. Loop orders match
# the numpy fallback exactly so both backends agree bitwise.

from libc.string cimport memcpy, memset


ctypedef fused real:
    float
    double


def im2col(const real[:, :, :, ::1] x, int kh, int kw, int stride, int pad,
           real[:, :, ::1] cols):
    """Unfold x (N, C, H, W) into cols (N, C*kh*kw, OH*OW), zero padded."""
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t OH = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t OW = (W + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t n, c, i, j, oh, ow, ih, iw, lo, hi
    cdef const real* src
    cdef real* dst
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        # valid output columns: 0 <= ow*stride + j - pad < W
                        lo = 0
                        while lo < OW and lo * stride + j - pad < 0:
                            lo += 1
                        hi = OW
                        while hi > lo and (hi - 1) * stride + j - pad >= W:
                            hi -= 1
                        dst = &cols[n, (c * kh + i) * kw + j, 0]
                        for oh in range(OH):
                            ih = oh * stride + i - pad
                            if ih < 0 or ih >= H:
                                memset(dst, 0, OW * sizeof(real))
                            else:
                                src = &x[n, c, ih, 0]
                                if lo > 0:
                                    memset(dst, 0, lo * sizeof(real))
                                if stride == 1:
                                    memcpy(dst + lo, src + lo + j - pad, (hi - lo) * sizeof(real))
                                else:
                                    iw = lo * stride + j - pad
                                    for ow in range(lo, hi):
                                        dst[ow] = src[iw]
                                        iw += stride
                                if hi < OW:
                                    memset(dst + hi, 0, (OW - hi) * sizeof(real))
                            dst += OW


def col2im(const real[:, :, ::1] cols, int kh, int kw, int stride, int pad,
           real[:, :, :, ::1] dx):
    """Scatter-add cols (N, C*kh*kw, OH*OW) back into zeroed dx (N, C, H, W)."""
    cdef Py_ssize_t N = dx.shape[0], C = dx.shape[1], H = dx.shape[2], W = dx.shape[3]
    cdef Py_ssize_t OH = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t OW = (W + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t n, c, i, j, oh, ow, ih, iw, lo, hi
    cdef const real* src
    cdef real* dst
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        lo = 0
                        while lo < OW and lo * stride + j - pad < 0:
                            lo += 1
                        hi = OW
                        while hi > lo and (hi - 1) * stride + j - pad >= W:
                            hi -= 1
                        src = &cols[n, (c * kh + i) * kw + j, 0]
                        for oh in range(OH):
                            ih = oh * stride + i - pad
                            if ih >= 0 and ih < H:
                                dst = &dx[n, c, ih, 0]
                                iw = lo * stride + j - pad
                                for ow in range(lo, hi):
                                    dst[iw] += src[ow]
                                    iw += stride
                            src += OW


def maxpool_forward(const real[:, :, :, ::1] x, int k, int stride, int pad,
                    real[:, :, :, ::1] out, long long[:, :, :, ::1] argmax):
    """Window maximum; argmax holds the flat h*W+w index, first-scanned wins ties."""
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t OH = out.shape[2], OW = out.shape[3]
    cdef Py_ssize_t n, c, oh, ow, i, j, ih, iw, best_idx
    cdef real best, v
    cdef bint found
    with nogil:
        for n in range(N):
            for c in range(C):
                for oh in range(OH):
                    for ow in range(OW):
                        found = False
                        best = 0
                        best_idx = 0
                        for i in range(k):
                            ih = oh * stride + i - pad
                            if ih < 0 or ih >= H:
                                continue
                            for j in range(k):
                                iw = ow * stride + j - pad
                                if iw < 0 or iw >= W:
                                    continue
                                v = x[n, c, ih, iw]
                                if not found or v > best:
                                    best = v
                                    best_idx = ih * W + iw
                                    found = True
                        out[n, c, oh, ow] = best
                        argmax[n, c, oh, ow] = best_idx


def maxpool_backward(const real[:, :, :, ::1] dout, const long long[:, :, :, ::1] argmax,
                     real[:, :, :, ::1] dx):
    cdef Py_ssize_t N = dout.shape[0], C = dout.shape[1]
    cdef Py_ssize_t OH = dout.shape[2], OW = dout.shape[3], W = dx.shape[3]
    cdef Py_ssize_t n, c, oh, ow, idx
    with nogil:
        for n in range(N):
            for c in range(C):
                for oh in range(OH):
                    for ow in range(OW):
                        idx = argmax[n, c, oh, ow]
                        dx[n, c, idx // W, idx % W] += dout[n, c, oh, ow]


def avgpool_forward(const real[:, :, :, ::1] x, int k, int stride, int pad,
                    real[:, :, :, ::1] out):
    """Window mean over k*k taps; padded taps count as zeros."""
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t OH = out.shape[2], OW = out.shape[3]
    cdef Py_ssize_t n, c, oh, ow, i, j, ih, iw
    cdef real acc
    cdef real scale = <real>1.0 / <real>(k * k)
    with nogil:
        for n in range(N):
            for c in range(C):
                for oh in range(OH):
                    for ow in range(OW):
                        acc = 0
                        for i in range(k):
                            ih = oh * stride + i - pad
                            if ih < 0 or ih >= H:
                                continue
                            for j in range(k):
                                iw = ow * stride + j - pad
                                if iw >= 0 and iw < W:
                                    acc = acc + x[n, c, ih, iw]
                        out[n, c, oh, ow] = acc * scale


def avgpool_backward(const real[:, :, :, ::1] dout, int k, int stride, int pad,
                     real[:, :, :, ::1] dx):
    cdef Py_ssize_t N = dx.shape[0], C = dx.shape[1], H = dx.shape[2], W = dx.shape[3]
    cdef Py_ssize_t OH = dout.shape[2], OW = dout.shape[3]
    cdef Py_ssize_t n, c, oh, ow, i, j, ih, iw
    cdef real scale = <real>1.0 / <real>(k * k)
    # tap-major order so overlapping windows accumulate like the numpy path
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(k):
                    for j in range(k):
                        for oh in range(OH):
                            ih = oh * stride + i - pad
                            if ih < 0 or ih >= H:
                                continue
                            for ow in range(OW):
                                iw = ow * stride + j - pad
                                if iw >= 0 and iw < W:
                                    dx[n, c, ih, iw] += dout[n, c, oh, ow] * scale
