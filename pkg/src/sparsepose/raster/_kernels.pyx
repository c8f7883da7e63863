# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled owner-map painting kernels.

Mirrors _kernels_py.py operation for operation. Built with -ffp-contract=off
so the scalar arithmetic here is bit-identical to NumPy's element-wise
float64 operations.
"""
from libc.math cimport ceil, floor

import numpy as np

cimport numpy as cnp


cdef inline Py_ssize_t _clamp_idx(double v, Py_ssize_t lo, Py_ssize_t hi):
    # Clamp in double space first: casting an out-of-range double to an
    # integer type is undefined behavior in C.
    if v < <double>lo:
        return lo
    if v > <double>hi:
        return hi
    return <Py_ssize_t>v


def paint_disk(cnp.int32_t[:, ::1] owner, double cx, double cy,
               double radius, int code):
    cdef Py_ssize_t h = owner.shape[0]
    cdef Py_ssize_t w = owner.shape[1]
    cdef Py_ssize_t r0 = _clamp_idx(floor(cy - radius), 0, h)
    cdef Py_ssize_t r1 = _clamp_idx(ceil(cy + radius), -1, h - 1)
    cdef Py_ssize_t c0 = _clamp_idx(floor(cx - radius), 0, w)
    cdef Py_ssize_t c1 = _clamp_idx(ceil(cx + radius), -1, w - 1)
    cdef Py_ssize_t r, c
    cdef double dx, dy, r2 = radius * radius
    for r in range(r0, r1 + 1):
        dy = r - cy
        for c in range(c0, c1 + 1):
            dx = c - cx
            if dy * dy + dx * dx <= r2:
                owner[r, c] = code


def paint_segment(cnp.int32_t[:, ::1] owner, double ax, double ay,
                  double bx, double by, double half_width, int code):
    cdef double ux = bx - ax
    cdef double uy = by - ay
    cdef double l2 = ux * ux + uy * uy
    if l2 == 0.0:
        paint_disk(owner, ax, ay, half_width, code)
        return
    cdef Py_ssize_t h = owner.shape[0]
    cdef Py_ssize_t w = owner.shape[1]
    cdef double ylo = ay if ay < by else by
    cdef double yhi = ay if ay > by else by
    cdef double xlo = ax if ax < bx else bx
    cdef double xhi = ax if ax > bx else bx
    cdef Py_ssize_t r0 = _clamp_idx(floor(ylo - half_width), 0, h)
    cdef Py_ssize_t r1 = _clamp_idx(ceil(yhi + half_width), -1, h - 1)
    cdef Py_ssize_t c0 = _clamp_idx(floor(xlo - half_width), 0, w)
    cdef Py_ssize_t c1 = _clamp_idx(ceil(xhi + half_width), -1, w - 1)
    cdef Py_ssize_t r, c
    cdef double t, dxq, dyq, hw2 = half_width * half_width
    for r in range(r0, r1 + 1):
        for c in range(c0, c1 + 1):
            t = ((c - ax) * ux + (r - ay) * uy) / l2
            if t < 0.0:
                t = 0.0
            elif t > 1.0:
                t = 1.0
            dxq = c - (ax + t * ux)
            dyq = r - (ay + t * uy)
            if dxq * dxq + dyq * dyq <= hw2:
                owner[r, c] = code
