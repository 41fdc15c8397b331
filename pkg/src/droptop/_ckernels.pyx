# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im for the conv2d op.

Layouts match ``droptop._pykernels`` exactly; col2im accumulates each input
cell in kernel-offset order so both backends are bit-identical.
"""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def _im2col(const real[:, :, :, ::1] x, real[:, ::1] out,
            int kh, int kw, int stride, int pad, int oh, int ow):
    cdef Py_ssize_t n_img = x.shape[0], n_ch = x.shape[1]
    cdef Py_ssize_t h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t n, c, ki, kj, i, j, row, col, y, xx
    for n in range(n_img):
        for i in range(oh):
            for j in range(ow):
                row = (n * oh + i) * ow + j
                col = 0
                for c in range(n_ch):
                    for ki in range(kh):
                        y = i * stride + ki - pad
                        for kj in range(kw):
                            xx = j * stride + kj - pad
                            if 0 <= y < h and 0 <= xx < w:
                                out[row, col] = x[n, c, y, xx]
                            else:
                                out[row, col] = 0
                            col += 1


def _col2im(const real[:, ::1] cols, real[:, :, :, ::1] out,
            int kh, int kw, int stride, int pad, int oh, int ow):
    cdef Py_ssize_t n_img = out.shape[0], n_ch = out.shape[1]
    cdef Py_ssize_t h = out.shape[2], w = out.shape[3]
    cdef Py_ssize_t n, c, ki, kj, i, j, y, xx, col
    for n in range(n_img):
        for c in range(n_ch):
            for ki in range(kh):
                for kj in range(kw):
                    col = (c * kh + ki) * kw + kj
                    for i in range(oh):
                        y = i * stride + ki - pad
                        if y < 0 or y >= h:
                            continue
                        for j in range(ow):
                            xx = j * stride + kj - pad
                            if 0 <= xx < w:
                                out[n, c, y, xx] += cols[(n * oh + i) * ow + j, col]


def im2col(x, int kh, int kw, int stride, int pad):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.empty((n * oh * ow, c * kh * kw), dtype=x.dtype)
    _im2col(x, out, kh, kw, stride, pad, oh, ow)
    return out


def col2im(cols, shape, int kh, int kw, int stride, int pad):
    cols = np.ascontiguousarray(cols)
    n, c, h, w = shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    _col2im(cols, out, kh, kw, stride, pad, oh, ow)
    return out
