# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels (NHWC, stride 1, zero 'same' padding).

Kernels are (kh, kw, c_in, c_out). The products go to BLAS through numpy;
the compiled part is the patch gather (im2col) and its adjoint scatter
(col2im), which skip the padded copy and strided views of the numpy path.
"""

import numpy as np
cimport numpy as cnp
from libc.string cimport memcpy

cnp.import_array()


cdef void _gather(const double[:, :, :, ::1] x, double[:, ::1] cols, Py_ssize_t kh, Py_ssize_t kw) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], wd = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t ph = kh // 2, pw = kw // 2
    cdef Py_ssize_t b, i, j, di, dj, yi, yj, row = 0
    cdef double* dst
    for b in range(n):
        for i in range(h):
            for j in range(wd):
                dst = &cols[row, 0]
                for di in range(kh):
                    yi = i + di - ph
                    for dj in range(kw):
                        yj = j + dj - pw
                        if 0 <= yi < h and 0 <= yj < wd:
                            memcpy(dst, &x[b, yi, yj, 0], c * sizeof(double))
                        dst += c
                row += 1


cdef void _scatter(const double[:, ::1] cols, double[:, :, :, ::1] dx, Py_ssize_t kh, Py_ssize_t kw) noexcept nogil:
    cdef Py_ssize_t n = dx.shape[0], h = dx.shape[1], wd = dx.shape[2], c = dx.shape[3]
    cdef Py_ssize_t ph = kh // 2, pw = kw // 2
    cdef Py_ssize_t b, i, j, di, dj, yi, yj, k, row = 0
    cdef const double* src
    cdef double* dst
    for b in range(n):
        for i in range(h):
            for j in range(wd):
                src = &cols[row, 0]
                for di in range(kh):
                    yi = i + di - ph
                    for dj in range(kw):
                        yj = j + dj - pw
                        if 0 <= yi < h and 0 <= yj < wd:
                            dst = &dx[b, yi, yj, 0]
                            for k in range(c):
                                dst[k] += src[k]
                        src += c
                row += 1


def im2col(x, Py_ssize_t kh, Py_ssize_t kw):
    """(n*h*w, kh*kw*c) patch matrix, channel fastest, zero outside the image."""
    cdef const double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cols = np.zeros((xv.shape[0] * xv.shape[1] * xv.shape[2], kh * kw * xv.shape[3]))
    cdef double[:, ::1] cv = cols
    with nogil:
        _gather(xv, cv, kh, kw)
    return cols


def conv2d_forward(x, w):
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    if kh == 1 and kw == 1:
        return (x.reshape(-1, cin) @ w.reshape(cin, cout)).reshape(n, h, wd, cout)
    return (im2col(x, kh, kw) @ w.reshape(-1, cout)).reshape(n, h, wd, cout)


def conv2d_backward_input(dout, w):
    n, h, wd, cout = dout.shape
    kh, kw, cin, _ = w.shape
    if kh == 1 and kw == 1:
        return (dout.reshape(-1, cout) @ w.reshape(cin, cout).T).reshape(n, h, wd, cin)
    cdef Py_ssize_t skh = kh, skw = kw
    dcols = np.ascontiguousarray(dout.reshape(-1, cout) @ w.reshape(-1, cout).T)
    dx = np.zeros((n, h, wd, cin))
    cdef const double[:, ::1] dv = dcols
    cdef double[:, :, :, ::1] xv = dx
    with nogil:
        _scatter(dv, xv, skh, skw)
    return dx


def conv2d_backward_weight(x, dout, kshape):
    kh, kw, cin, cout = kshape
    if kh == 1 and kw == 1:
        return (x.reshape(-1, cin).T @ dout.reshape(-1, cout)).reshape(kshape)
    return (im2col(x, kh, kw).T @ dout.reshape(-1, cout)).reshape(kshape)
