# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernel core: fused single-pass versions of the hot loops.

Semantics must match seddlab.kernels.fallback exactly (up to float
rounding); the dispatcher routes float32 work here when the module built.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport expf, sqrtf

cnp.import_array()


def softmax2d_f32(cnp.float32_t[:, ::1] x):
    cdef Py_ssize_t m = x.shape[0]
    cdef Py_ssize_t n = x.shape[1]
    out_arr = np.empty((m, n), dtype=np.float32)
    cdef cnp.float32_t[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef float rowmax, total, v
    for i in range(m):
        rowmax = x[i, 0]
        for j in range(1, n):
            if x[i, j] > rowmax:
                rowmax = x[i, j]
        total = 0.0
        for j in range(n):
            v = expf(x[i, j] - rowmax)
            out[i, j] = v
            total += v
        for j in range(n):
            out[i, j] /= total
    return out_arr


def softmax2d_backward_f32(cnp.float32_t[:, ::1] y, cnp.float32_t[:, ::1] dy):
    cdef Py_ssize_t m = y.shape[0]
    cdef Py_ssize_t n = y.shape[1]
    out_arr = np.empty((m, n), dtype=np.float32)
    cdef cnp.float32_t[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef float inner
    for i in range(m):
        inner = 0.0
        for j in range(n):
            inner += dy[i, j] * y[i, j]
        for j in range(n):
            out[i, j] = y[i, j] * (dy[i, j] - inner)
    return out_arr


def layernorm2d_f32(cnp.float32_t[:, ::1] x, float eps):
    cdef Py_ssize_t m = x.shape[0]
    cdef Py_ssize_t n = x.shape[1]
    y_arr = np.empty((m, n), dtype=np.float32)
    rstd_arr = np.empty(m, dtype=np.float32)
    cdef cnp.float32_t[:, ::1] y = y_arr
    cdef cnp.float32_t[::1] rstd = rstd_arr
    cdef Py_ssize_t i, j
    cdef float mean, var, c, r
    for i in range(m):
        mean = 0.0
        for j in range(n):
            mean += x[i, j]
        mean /= n
        var = 0.0
        for j in range(n):
            c = x[i, j] - mean
            var += c * c
        var /= n
        r = 1.0 / sqrtf(var + eps)
        rstd[i] = r
        for j in range(n):
            y[i, j] = (x[i, j] - mean) * r
    return y_arr, rstd_arr


def layernorm2d_backward_f32(cnp.float32_t[:, ::1] y, cnp.float32_t[::1] rstd,
                             cnp.float32_t[:, ::1] dy):
    cdef Py_ssize_t m = y.shape[0]
    cdef Py_ssize_t n = y.shape[1]
    out_arr = np.empty((m, n), dtype=np.float32)
    cdef cnp.float32_t[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef float mean_dy, mean_dyy
    for i in range(m):
        mean_dy = 0.0
        mean_dyy = 0.0
        for j in range(n):
            mean_dy += dy[i, j]
            mean_dyy += dy[i, j] * y[i, j]
        mean_dy /= n
        mean_dyy /= n
        for j in range(n):
            out[i, j] = (dy[i, j] - mean_dy - y[i, j] * mean_dyy) * rstd[i]
    return out_arr


def scatter_add_rows_f32(cnp.float32_t[:, ::1] table, cnp.int64_t[::1] ids,
                         cnp.float32_t[:, ::1] grads):
    cdef Py_ssize_t m = ids.shape[0]
    cdef Py_ssize_t n = table.shape[1]
    cdef Py_ssize_t i, j, row
    for i in range(m):
        row = ids[i]
        for j in range(n):
            table[row, j] += grads[i, j]


def categorical_rows_f64(cnp.float64_t[:, ::1] probs, cnp.float64_t[::1] u):
    cdef Py_ssize_t m = probs.shape[0]
    cdef Py_ssize_t n = probs.shape[1]
    out_arr = np.empty(m, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double total, threshold, acc
    for i in range(m):
        total = 0.0
        for j in range(n):
            total += probs[i, j]
        threshold = u[i] * total
        acc = 0.0
        out[i] = n - 1
        for j in range(n):
            acc += probs[i, j]
            if acc >= threshold:
                out[i] = j
                break
    return out_arr
