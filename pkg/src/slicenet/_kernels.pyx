# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Same signatures and semantics as ``_kernels_py``.

The full (non-separable) convolution stays on the BLAS path from the
numpy module: a hand loop cannot beat a GEMM there.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt

from ._kernels_py import conv_bwd, conv_fwd

cnp.import_array()


def depthwise_fwd(const double[:, :, ::1] x, const double[:, ::1] w, Py_ssize_t d):
    cdef Py_ssize_t nb = x.shape[0], nc = x.shape[2], k = w.shape[0]
    cdef Py_ssize_t nt = x.shape[1] - (k - 1) * d
    out_arr = np.empty((nb, nt, nc))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, t, j, c
    cdef double acc
    with nogil:
        for b in range(nb):
            for t in range(nt):
                for c in range(nc):
                    out[b, t, c] = x[b, t, c] * w[0, c]
                for j in range(1, k):
                    for c in range(nc):
                        out[b, t, c] += x[b, t + j * d, c] * w[j, c]
    return out_arr


def depthwise_bwd(const double[:, :, ::1] x, const double[:, ::1] w, Py_ssize_t d,
                  const double[:, :, ::1] g):
    cdef Py_ssize_t nb = x.shape[0], nc = x.shape[2], k = w.shape[0]
    cdef Py_ssize_t nt = g.shape[1]
    dx_arr = np.zeros((nb, x.shape[1], nc))
    dw_arr = np.zeros((k, nc))
    cdef double[:, :, ::1] dx = dx_arr
    cdef double[:, ::1] dw = dw_arr
    cdef Py_ssize_t b, t, j, c, s
    cdef double gv
    with nogil:
        for b in range(nb):
            for t in range(nt):
                for j in range(k):
                    s = t + j * d
                    for c in range(nc):
                        gv = g[b, t, c]
                        dx[b, s, c] += gv * w[j, c]
                        dw[j, c] += gv * x[b, s, c]
    return dx_arr, dw_arr


def layernorm_fwd(const double[:, :, ::1] x, double gain, double bias, double eps):
    cdef Py_ssize_t nb = x.shape[0], nt = x.shape[1], h = x.shape[2]
    out_arr = np.empty((nb, nt, h))
    xhat_arr = np.empty((nb, nt, h))
    inv_arr = np.empty((nb, nt, 1))
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, :, ::1] xhat = xhat_arr
    cdef double[:, :, ::1] inv = inv_arr
    cdef Py_ssize_t b, t, c
    cdef double mu, var, v, r
    with nogil:
        for b in range(nb):
            for t in range(nt):
                mu = 0.0
                for c in range(h):
                    mu += x[b, t, c]
                mu = mu / h
                var = 0.0
                for c in range(h):
                    v = x[b, t, c] - mu
                    var += v * v
                var = var / h
                r = 1.0 / sqrt(var + eps)
                inv[b, t, 0] = r
                for c in range(h):
                    v = (x[b, t, c] - mu) * r
                    xhat[b, t, c] = v
                    out[b, t, c] = v * gain + bias
    return out_arr, xhat_arr, inv_arr


def layernorm_bwd(const double[:, :, ::1] g, const double[:, :, ::1] xhat,
                  const double[:, :, ::1] inv, double gain):
    cdef Py_ssize_t nb = g.shape[0], nt = g.shape[1], h = g.shape[2]
    dx_arr = np.empty((nb, nt, h))
    cdef double[:, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, t, c
    cdef double dgain = 0.0, dbias = 0.0, mg, mgx, gx
    with nogil:
        for b in range(nb):
            for t in range(nt):
                mg = 0.0
                mgx = 0.0
                for c in range(h):
                    dgain += g[b, t, c] * xhat[b, t, c]
                    dbias += g[b, t, c]
                    gx = g[b, t, c] * gain
                    mg += gx
                    mgx += gx * xhat[b, t, c]
                mg = mg / h
                mgx = mgx / h
                for c in range(h):
                    dx[b, t, c] = (g[b, t, c] * gain - mg - xhat[b, t, c] * mgx) * inv[b, t, 0]
    return dx_arr, dgain, dbias


def softmax_fwd(x):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    shape = arr.shape
    cdef double[:, ::1] v = arr.reshape(-1, shape[len(shape) - 1])
    out_arr = np.empty((v.shape[0], v.shape[1]))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t n = v.shape[0], m = v.shape[1], i, j
    cdef double mx, s, e
    with nogil:
        for i in range(n):
            mx = v[i, 0]
            for j in range(1, m):
                if v[i, j] > mx:
                    mx = v[i, j]
            s = 0.0
            for j in range(m):
                e = exp(v[i, j] - mx)
                out[i, j] = e
                s += e
            for j in range(m):
                out[i, j] = out[i, j] / s
    return out_arr.reshape(shape)


def softmax_bwd(y, g):
    shape = y.shape
    cdef double[:, ::1] yv = np.ascontiguousarray(y).reshape(-1, shape[len(shape) - 1])
    cdef double[:, ::1] gv = np.ascontiguousarray(g).reshape(-1, shape[len(shape) - 1])
    out_arr = np.empty((yv.shape[0], yv.shape[1]))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t n = yv.shape[0], m = yv.shape[1], i, j
    cdef double dot
    with nogil:
        for i in range(n):
            dot = 0.0
            for j in range(m):
                dot += gv[i, j] * yv[i, j]
            for j in range(m):
                out[i, j] = yv[i, j] * (gv[i, j] - dot)
    return out_arr.reshape(shape)
