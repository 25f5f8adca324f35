# Direct-convolution kernels: forward, grad-input and grad-weights as plain
# serial C loops over typed memoryviews.  Accumulation order is fixed
# (channel, then kernel row, then kernel column), so results are
# bit-reproducible run to run; staying single-threaded also keeps these
# loops from fighting the BLAS thread pool the numpy backend uses.  The
# innermost loop always walks the output width so stride-1 slices stay
# contiguous and vectorize.

import numpy as np

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _lo(Py_ssize_t pad, Py_ssize_t k, Py_ssize_t stride) noexcept nogil:
    # Smallest output index whose input coordinate k - pad + i*stride is >= 0.
    cdef Py_ssize_t off = pad - k
    if off <= 0:
        return 0
    return (off + stride - 1) // stride


cdef inline Py_ssize_t _hi(Py_ssize_t limit, Py_ssize_t pad, Py_ssize_t k,
                           Py_ssize_t stride, Py_ssize_t n_out) noexcept nogil:
    # Largest output index whose input coordinate stays < limit.
    cdef Py_ssize_t hi = (limit - 1 - k + pad) // stride
    if hi > n_out - 1:
        return n_out - 1
    return hi


def _forward(real[:, :, :, ::1] x, real[:, :, :, ::1] w, real[:, :, :, ::1] y,
             Py_ssize_t stride, Py_ssize_t ph, Py_ssize_t pw, Py_ssize_t groups):
    cdef Py_ssize_t n_b = x.shape[0], c_in = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t c_out = w.shape[0], cg = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t oh = y.shape[2], ow = y.shape[3]
    cdef Py_ssize_t og = c_out // groups
    cdef Py_ssize_t n, o, ci, ki, kj, i, j, ih, base, jlo, jhi
    cdef real wv
    with nogil:
        for n in range(n_b):
            for o in range(c_out):
                base = (o // og) * cg
                for ci in range(cg):
                    for ki in range(kh):
                        for kj in range(kw):
                            wv = w[o, ci, ki, kj]
                            jlo = _lo(pw, kj, stride)
                            jhi = _hi(wd, pw, kj, stride, ow)
                            for i in range(oh):
                                ih = i * stride - ph + ki
                                if ih < 0 or ih >= h:
                                    continue
                                for j in range(jlo, jhi + 1):
                                    y[n, o, i, j] = y[n, o, i, j] + \
                                        wv * x[n, base + ci, ih, j * stride - pw + kj]


def _grad_input(real[:, :, :, ::1] w, real[:, :, :, ::1] gy,
                real[:, :, :, ::1] gx,
                Py_ssize_t stride, Py_ssize_t ph, Py_ssize_t pw, Py_ssize_t groups):
    cdef Py_ssize_t n_b = gx.shape[0], c_in = gx.shape[1], h = gx.shape[2], wd = gx.shape[3]
    cdef Py_ssize_t c_out = w.shape[0], cg = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t oh = gy.shape[2], ow = gy.shape[3]
    cdef Py_ssize_t og = c_out // groups
    cdef Py_ssize_t n, o, ci, ki, kj, i, j, ih, base, jlo, jhi
    cdef real wv
    with nogil:
        for n in range(n_b):
            for o in range(c_out):
                base = (o // og) * cg
                for ci in range(cg):
                    for ki in range(kh):
                        for kj in range(kw):
                            wv = w[o, ci, ki, kj]
                            jlo = _lo(pw, kj, stride)
                            jhi = _hi(wd, pw, kj, stride, ow)
                            for i in range(oh):
                                ih = i * stride - ph + ki
                                if ih < 0 or ih >= h:
                                    continue
                                for j in range(jlo, jhi + 1):
                                    gx[n, base + ci, ih, j * stride - pw + kj] = \
                                        gx[n, base + ci, ih, j * stride - pw + kj] + \
                                        wv * gy[n, o, i, j]


def _grad_weights(real[:, :, :, ::1] x, real[:, :, :, ::1] gy,
                  real[:, :, :, ::1] gw,
                  Py_ssize_t stride, Py_ssize_t ph, Py_ssize_t pw, Py_ssize_t groups):
    cdef Py_ssize_t n_b = x.shape[0], c_in = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t c_out = gw.shape[0], cg = gw.shape[1], kh = gw.shape[2], kw = gw.shape[3]
    cdef Py_ssize_t oh = gy.shape[2], ow = gy.shape[3]
    cdef Py_ssize_t og = c_out // groups
    cdef Py_ssize_t n, o, ci, ki, kj, i, j, ih, base, jlo, jhi
    cdef real acc
    with nogil:
        for o in range(c_out):
            base = (o // og) * cg
            for ci in range(cg):
                for ki in range(kh):
                    for kj in range(kw):
                        jlo = _lo(pw, kj, stride)
                        jhi = _hi(wd, pw, kj, stride, ow)
                        acc = 0
                        for n in range(n_b):
                            for i in range(oh):
                                ih = i * stride - ph + ki
                                if ih < 0 or ih >= h:
                                    continue
                                for j in range(jlo, jhi + 1):
                                    acc = acc + gy[n, o, i, j] * \
                                        x[n, base + ci, ih, j * stride - pw + kj]
                        gw[o, ci, ki, kj] = gw[o, ci, ki, kj] + acc


def conv2d_forward(x, w, stride, ph, pw, groups):
    n, _, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    oh = (h + 2 * ph - kh) // stride + 1
    ow = (wd + 2 * pw - kw) // stride + 1
    y = np.zeros((n, c_out, oh, ow), dtype=x.dtype)
    _forward(x, w, y, stride, ph, pw, groups)
    return y


def conv2d_grad_input(w, gy, x_shape, stride, ph, pw, groups):
    gx = np.zeros(x_shape, dtype=gy.dtype)
    _grad_input(w, gy, gx, stride, ph, pw, groups)
    return gx


def conv2d_grad_weights(x, gy, w_shape, stride, ph, pw, groups):
    gw = np.zeros(w_shape, dtype=gy.dtype)
    _grad_weights(x, gy, gw, stride, ph, pw, groups)
    return gw
