# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled patch gather/scatter kernels for grouped 2-D convolution."""

from libc.string cimport memcpy

import numpy as np


def im2col(double[:, :, :, ::1] xp, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t stride, Py_ssize_t ho, Py_ssize_t wo):
    cdef Py_ssize_t batch = xp.shape[0]
    cdef Py_ssize_t c = xp.shape[3]
    out = np.empty((batch * ho * wo, kh * kw * c), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t b, oh, ow, i, j, row, col
    for b in range(batch):
        for oh in range(ho):
            for ow in range(wo):
                row = (b * ho + oh) * wo + ow
                col = 0
                for i in range(kh):
                    for j in range(kw):
                        memcpy(&o[row, col],
                               &xp[b, oh * stride + i, ow * stride + j, 0],
                               c * sizeof(double))
                        col += c
    return out


def col2im(double[:, ::1] cols, Py_ssize_t batch, Py_ssize_t hp, Py_ssize_t wp,
           Py_ssize_t c, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride,
           Py_ssize_t ho, Py_ssize_t wo):
    out = np.zeros((batch, hp, wp, c))
    cdef double[:, :, :, ::1] g = out
    cdef Py_ssize_t b, oh, ow, i, j, k, row, base
    # (i,j)-outer accumulation matches the NumPy backend bit for bit.
    for i in range(kh):
        for j in range(kw):
            base = (i * kw + j) * c
            for b in range(batch):
                for oh in range(ho):
                    for ow in range(wo):
                        row = (b * ho + oh) * wo + ow
                        for k in range(c):
                            g[b, oh * stride + i, ow * stride + j, k] += cols[row, base + k]
    return out
