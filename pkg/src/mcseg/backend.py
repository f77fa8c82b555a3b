"""Convolution kernel backends.

The 2-D convolutions are the hot inner loops of both training and inference,
so they come in two flavours: a compiled Cython extension (built at install
time) and a pure-NumPy fallback based on strided im2col views. The active
backend is picked at import time and can be forced with the environment
variable ``MCSEG_BACKEND`` (``cython``, ``numpy`` or ``auto``).

All kernels implement "same" zero padding of ``(k - 1) * dilation // 2`` per
side with stride 1, for odd kernel sizes only, and accept f32 or f64 arrays.
``MCSEG_THREADS`` bounds the OpenMP thread count of the compiled kernels.
"""

import os

import numpy as np

try:
    from mcseg import _convkernels as _ck
except ImportError:
    _ck = None


def _thread_count():
    raw = os.environ.get("MCSEG_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n <= 0:
        n = os.cpu_count() or 1
    return n


def _check_conv_args(x, w, dilation):
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects 4-d input and weight arrays")
    n, ci, h, wd = x.shape
    co, wci, k, k2 = w.shape
    if k != k2:
        raise ValueError("conv2d kernels must be square, got %dx%d" % (k, k2))
    if k % 2 == 0:
        raise ValueError("conv2d kernel size must be odd, got %d" % k)
    if wci != ci:
        raise ValueError(
            "conv2d channel mismatch: input has %d channels, weight expects %d"
            % (ci, wci)
        )
    if h == 0 or wd == 0:
        raise ValueError("conv2d input has a zero-sized spatial dimension")
    if dilation < 1:
        raise ValueError("dilation must be a positive integer")


def _im2col(xp, k, dilation, h, w):
    # Strided (n, ci, k, k, h, w) view over the padded input; no copy.
    n, ci = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    shape = (n, ci, k, k, h, w)
    strides = (s0, s1, s2 * dilation, s3 * dilation, s2, s3)
    return np.lib.stride_tricks.as_strided(xp, shape=shape, strides=strides)


class NumpyBackend:
    name = "numpy"

    @staticmethod
    def conv2d_forward(x, w, dilation=1):
        _check_conv_args(x, w, dilation)
        n, ci, h, wd = x.shape
        k = w.shape[2]
        p = (k - 1) * dilation // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = _im2col(xp, k, dilation, h, wd)
        out = np.tensordot(w, cols, axes=([1, 2, 3], [1, 2, 3]))
        return np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    @staticmethod
    def conv2d_input_grad(gy, w, dilation, in_shape):
        n, ci, h, wd = in_shape
        k = w.shape[2]
        p = (k - 1) * dilation // 2
        gxp = np.zeros((n, ci, h + 2 * p, wd + 2 * p), dtype=gy.dtype)
        # dcols[ci,kh,kw,n,h,w] scattered back onto the padded gradient.
        dcols = np.tensordot(w, gy, axes=([0], [1]))
        for kh in range(k):
            for kw in range(k):
                gxp[:, :, kh * dilation:kh * dilation + h,
                    kw * dilation:kw * dilation + wd] += (
                        dcols[:, kh, kw].transpose(1, 0, 2, 3))
        if p == 0:
            return gxp
        return np.ascontiguousarray(gxp[:, :, p:p + h, p:p + wd])

    @staticmethod
    def conv2d_weight_grad(gy, x, k, dilation):
        n, ci, h, wd = x.shape
        p = (k - 1) * dilation // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = _im2col(xp, k, dilation, h, wd)
        return np.tensordot(gy, cols, axes=([0, 2, 3], [0, 4, 5]))


class CythonBackend:
    name = "cython"

    @staticmethod
    def conv2d_forward(x, w, dilation=1):
        _check_conv_args(x, w, dilation)
        x = np.ascontiguousarray(x)
        w = np.ascontiguousarray(w)
        return _ck.conv2d_forward(x, w, dilation, _thread_count())

    @staticmethod
    def conv2d_input_grad(gy, w, dilation, in_shape):
        gy = np.ascontiguousarray(gy)
        w = np.ascontiguousarray(w)
        return _ck.conv2d_input_grad(gy, w, dilation, in_shape[2], in_shape[3],
                                     _thread_count())

    @staticmethod
    def conv2d_weight_grad(gy, x, k, dilation):
        gy = np.ascontiguousarray(gy)
        x = np.ascontiguousarray(x)
        return _ck.conv2d_weight_grad(gy, x, k, dilation, _thread_count())


def available_backends():
    out = {"numpy": NumpyBackend}
    if _ck is not None:
        out["cython"] = CythonBackend
    return out


def _select():
    want = os.environ.get("MCSEG_BACKEND", "auto").lower()
    backends = available_backends()
    if want in ("auto", ""):
        return backends.get("cython", NumpyBackend)
    if want not in backends:
        raise RuntimeError(
            "MCSEG_BACKEND=%r but only %s available"
            % (want, sorted(backends)))
    return backends[want]


_active = _select()


def active_backend():
    return _active


def set_backend(name):
    """Switch the kernel backend at runtime (mainly for tests/benchmarks)."""
    global _active
    _active = available_backends()[name]
    return _active


def conv2d_forward(x, w, dilation=1):
    return _active.conv2d_forward(x, w, dilation)


def conv2d_input_grad(gy, w, dilation, in_shape):
    return _active.conv2d_input_grad(gy, w, dilation, in_shape)


def conv2d_weight_grad(gy, x, k, dilation):
    return _active.conv2d_weight_grad(gy, x, k, dilation)
