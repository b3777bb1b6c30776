# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled volume<->column kernels; see reference.py for the contract."""

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

BACKEND = "compiled"

ctypedef fused real:
    float
    double


def out_extent(Py_ssize_t size, Py_ssize_t k, Py_ssize_t stride):
    return (size - k) // stride + 1


cdef void _gather(real[:, :, :, :, ::1] x, real[:, ::1] cols,
                  Py_ssize_t kd, Py_ssize_t kh, Py_ssize_t kw,
                  Py_ssize_t sd, Py_ssize_t sh, Py_ssize_t sw,
                  Py_ssize_t od, Py_ssize_t oh, Py_ssize_t ow) noexcept nogil:
    # position-major columns: writes stream sequentially through cols,
    # reads stay inside one batch slab (cache resident)
    cdef Py_ssize_t n, c, dz, dy, dx, z, y, xw, row, col
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t kvol = kd * kh * kw
    for n in range(N):
        for z in range(od):
            for y in range(oh):
                for xw in range(ow):
                    row = ((n * od + z) * oh + y) * ow + xw
                    col = 0
                    for c in range(C):
                        for dz in range(kd):
                            for dy in range(kh):
                                for dx in range(kw):
                                    cols[row, col] = x[n, c, z * sd + dz, y * sh + dy, xw * sw + dx]
                                    col += 1


cdef void _scatter(real[:, ::1] cols, real[:, :, :, :, ::1] x,
                   Py_ssize_t kd, Py_ssize_t kh, Py_ssize_t kw,
                   Py_ssize_t sd, Py_ssize_t sh, Py_ssize_t sw,
                   Py_ssize_t od, Py_ssize_t oh, Py_ssize_t ow) noexcept nogil:
    cdef Py_ssize_t n, c, dz, dy, dx, z, y, xw, row, col
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1]
    for n in range(N):
        for z in range(od):
            for y in range(oh):
                for xw in range(ow):
                    row = ((n * od + z) * oh + y) * ow + xw
                    col = 0
                    for c in range(C):
                        for dz in range(kd):
                            for dy in range(kh):
                                for dx in range(kw):
                                    x[n, c, z * sd + dz, y * sh + dy, xw * sw + dx] += cols[row, col]
                                    col += 1


def vol2col(cnp.ndarray x, kdhw, stride):
    cdef Py_ssize_t kd = kdhw[0], kh = kdhw[1], kw = kdhw[2]
    cdef Py_ssize_t sd = stride[0], sh = stride[1], sw = stride[2]
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t od = out_extent(x.shape[2], kd, sd)
    cdef Py_ssize_t oh = out_extent(x.shape[3], kh, sh)
    cdef Py_ssize_t ow = out_extent(x.shape[4], kw, sw)
    x = np.ascontiguousarray(x)
    cols = np.empty((n * od * oh * ow, c * kd * kh * kw), dtype=x.dtype)
    if x.dtype == np.float32:
        _gather[float](x, cols, kd, kh, kw, sd, sh, sw, od, oh, ow)
    elif x.dtype == np.float64:
        _gather[double](x, cols, kd, kh, kw, sd, sh, sw, od, oh, ow)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")
    return cols


def col2vol(cnp.ndarray cols, vol_shape, kdhw, stride):
    cdef Py_ssize_t kd = kdhw[0], kh = kdhw[1], kw = kdhw[2]
    cdef Py_ssize_t sd = stride[0], sh = stride[1], sw = stride[2]
    cdef Py_ssize_t od = out_extent(vol_shape[2], kd, sd)
    cdef Py_ssize_t oh = out_extent(vol_shape[3], kh, sh)
    cdef Py_ssize_t ow = out_extent(vol_shape[4], kw, sw)
    cols = np.ascontiguousarray(cols)
    out = np.zeros(tuple(vol_shape), dtype=cols.dtype)
    if cols.dtype == np.float32:
        _scatter[float](cols, out, kd, kh, kw, sd, sh, sw, od, oh, ow)
    elif cols.dtype == np.float64:
        _scatter[double](cols, out, kd, kh, kw, sd, sh, sw, od, oh, ow)
    else:
        raise TypeError(f"unsupported dtype {cols.dtype}")
    return out
