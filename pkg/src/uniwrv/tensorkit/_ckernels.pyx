# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled bilinear sampling kernels; same contract as ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline void _weights(real r, real c, Py_ssize_t* r0, Py_ssize_t* c0,
                          real* fr, real* fc) noexcept nogil:
    cdef real rf = floor(r)
    cdef real cf = floor(c)
    r0[0] = <Py_ssize_t>rf
    c0[0] = <Py_ssize_t>cf
    fr[0] = r - rf
    fc[0] = c - cf


def _forward(real[:, :, :, ::1] x, real[:, :, ::1] coords, real[:, :, ::1] out):
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t N = coords.shape[1]
    cdef Py_ssize_t b, n, ch, r0, c0, rr, cc, k
    cdef real fr, fc, w
    with nogil:
        for b in range(B):
            for n in range(N):
                _weights(coords[b, n, 0], coords[b, n, 1], &r0, &c0, &fr, &fc)
                for k in range(4):
                    rr = r0 + (k >> 1)
                    cc = c0 + (k & 1)
                    if rr < 0 or rr >= H or cc < 0 or cc >= W:
                        continue
                    w = ((fr if (k >> 1) else 1 - fr) * (fc if (k & 1) else 1 - fc))
                    for ch in range(C):
                        out[b, n, ch] += w * x[b, rr, cc, ch]


def _backward(real[:, :, :, ::1] x, real[:, :, ::1] coords, real[:, :, ::1] gout,
              real[:, :, :, ::1] gx, real[:, :, ::1] gcoords, bint need_x, bint need_coords):
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t N = coords.shape[1]
    cdef Py_ssize_t b, n, ch, r0, c0, rr, cc, k, kr, kc
    cdef real fr, fc, w, g, v, dwr, dwc, accr, accc
    with nogil:
        for b in range(B):
            for n in range(N):
                _weights(coords[b, n, 0], coords[b, n, 1], &r0, &c0, &fr, &fc)
                accr = 0
                accc = 0
                for k in range(4):
                    kr = k >> 1
                    kc = k & 1
                    rr = r0 + kr
                    cc = c0 + kc
                    if rr < 0 or rr >= H or cc < 0 or cc >= W:
                        continue
                    w = (fr if kr else 1 - fr) * (fc if kc else 1 - fc)
                    # d w / d row and d w / d col
                    dwr = (1 if kr else -1) * (fc if kc else 1 - fc)
                    dwc = (fr if kr else 1 - fr) * (1 if kc else -1)
                    for ch in range(C):
                        g = gout[b, n, ch]
                        if need_x:
                            gx[b, rr, cc, ch] += w * g
                        if need_coords:
                            v = x[b, rr, cc, ch]
                            accr = accr + g * v * dwr
                            accc = accc + g * v * dwc
                if need_coords:
                    gcoords[b, n, 0] = accr
                    gcoords[b, n, 1] = accc


def grid_sample_forward(x, coords):
    x = np.ascontiguousarray(x)
    coords = np.ascontiguousarray(coords, dtype=x.dtype)
    out = np.zeros((x.shape[0], coords.shape[1], x.shape[3]), dtype=x.dtype)
    _forward(x, coords, out)
    return out


def grid_sample_backward(x, coords, gout, need_x=True, need_coords=True):
    x = np.ascontiguousarray(x)
    coords = np.ascontiguousarray(coords, dtype=x.dtype)
    gout = np.ascontiguousarray(gout, dtype=x.dtype)
    gx = np.zeros_like(x)
    gcoords = np.zeros_like(coords)
    _backward(x, coords, gout, gx, gcoords, need_x, need_coords)
    return (gx if need_x else None), (gcoords if need_coords else None)
