# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled 2-D convolution kernels (stride 1, "same" zero padding).

Each parallel task owns a disjoint output slice and accumulates in a fixed
order, so results are deterministic for any thread count. Direct accumulation
of shifted input rows avoids the k*k memory blow-up of im2col, which is what
makes these kernels win on the small-channel models this package trains.
"""

import numpy as np

cimport cython
cimport numpy as cnp
from cython.parallel cimport prange

ctypedef fused real:
    float
    double


@cython.boundscheck(False)
@cython.wraparound(False)
def conv2d_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] w,
                   int dilation, int num_threads):
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1]
    cdef Py_ssize_t h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t co = w.shape[0], k = w.shape[2]
    cdef int pad = <int>((k - 1) * dilation // 2)

    out_np = np.zeros((n, co, h, wd),
                      dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] out = out_np

    cdef Py_ssize_t task, i, o, c, kh, kw, oh, ow, ih, oh0, oh1, ow0, ow1, iw0
    cdef real wv
    cdef Py_ssize_t ntask = n * co

    for task in prange(ntask, nogil=True, schedule='static',
                       num_threads=num_threads):
        i = task // co
        o = task % co
        for c in range(ci):
            for kh in range(k):
                # valid output rows for this kernel row
                oh0 = pad - kh * dilation
                if oh0 < 0:
                    oh0 = 0
                oh1 = h + pad - kh * dilation
                if oh1 > h:
                    oh1 = h
                for kw in range(k):
                    wv = w[o, c, kh, kw]
                    if wv == 0:
                        continue
                    ow0 = pad - kw * dilation
                    if ow0 < 0:
                        ow0 = 0
                    ow1 = wd + pad - kw * dilation
                    if ow1 > wd:
                        ow1 = wd
                    iw0 = ow0 + kw * dilation - pad
                    for oh in range(oh0, oh1):
                        ih = oh + kh * dilation - pad
                        for ow in range(ow0, ow1):
                            out[i, o, oh, ow] = out[i, o, oh, ow] + \
                                wv * x[i, c, ih, iw0 + (ow - ow0)]
    return out_np


@cython.boundscheck(False)
@cython.wraparound(False)
def conv2d_input_grad(real[:, :, :, ::1] gy, real[:, :, :, ::1] w,
                      int dilation, Py_ssize_t h, Py_ssize_t wd,
                      int num_threads):
    cdef Py_ssize_t n = gy.shape[0], co = gy.shape[1]
    cdef Py_ssize_t ci = w.shape[1], k = w.shape[2]
    cdef int pad = <int>((k - 1) * dilation // 2)

    gx_np = np.zeros((n, ci, h, wd),
                     dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] gx = gx_np

    cdef Py_ssize_t task, i, o, c, kh, kw, oh, ow, ih, oh0, oh1, ow0, ow1, iw0
    cdef real wv
    cdef Py_ssize_t ntask = n * ci

    for task in prange(ntask, nogil=True, schedule='static',
                       num_threads=num_threads):
        i = task // ci
        c = task % ci
        for o in range(co):
            for kh in range(k):
                oh0 = pad - kh * dilation
                if oh0 < 0:
                    oh0 = 0
                oh1 = h + pad - kh * dilation
                if oh1 > h:
                    oh1 = h
                for kw in range(k):
                    wv = w[o, c, kh, kw]
                    if wv == 0:
                        continue
                    ow0 = pad - kw * dilation
                    if ow0 < 0:
                        ow0 = 0
                    ow1 = wd + pad - kw * dilation
                    if ow1 > wd:
                        ow1 = wd
                    iw0 = ow0 + kw * dilation - pad
                    for oh in range(oh0, oh1):
                        ih = oh + kh * dilation - pad
                        for ow in range(ow0, ow1):
                            gx[i, c, ih, iw0 + (ow - ow0)] = \
                                gx[i, c, ih, iw0 + (ow - ow0)] + \
                                wv * gy[i, o, oh, ow]
    return gx_np


@cython.boundscheck(False)
@cython.wraparound(False)
def conv2d_weight_grad(real[:, :, :, ::1] gy, real[:, :, :, ::1] x,
                       Py_ssize_t k, int dilation, int num_threads):
    cdef Py_ssize_t n = gy.shape[0], co = gy.shape[1]
    cdef Py_ssize_t ci = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef int pad = <int>((k - 1) * dilation // 2)

    gw_np = np.zeros((co, ci, k, k),
                     dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] gw = gw_np

    cdef Py_ssize_t o, i, c, kh, kw, oh, ow, ih, oh0, oh1, ow0, ow1, iw0
    cdef real acc

    for o in prange(co, nogil=True, schedule='static',
                    num_threads=num_threads):
        for c in range(ci):
            for kh in range(k):
                oh0 = pad - kh * dilation
                if oh0 < 0:
                    oh0 = 0
                oh1 = h + pad - kh * dilation
                if oh1 > h:
                    oh1 = h
                for kw in range(k):
                    ow0 = pad - kw * dilation
                    if ow0 < 0:
                        ow0 = 0
                    ow1 = wd + pad - kw * dilation
                    if ow1 > wd:
                        ow1 = wd
                    iw0 = ow0 + kw * dilation - pad
                    acc = 0
                    for i in range(n):
                        for oh in range(oh0, oh1):
                            ih = oh + kh * dilation - pad
                            for ow in range(ow0, ow1):
                                acc = acc + gy[i, o, oh, ow] * \
                                    x[i, c, ih, iw0 + (ow - ow0)]
                    gw[o, c, kh, kw] = acc
    return gw_np
