# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled depthwise convolution kernels (stride 1, zero padding).

Each call evaluates a stack of ``m`` depthwise filter banks against the same
input in one pass, so a quadratic convolution reads its input once for all
three of its filter banks.
"""
import numpy as np


def dw_forward_multi(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w, int pad):
    """x: (N, C, H, W); w: (m, C, k, k) -> (m, N, C, Ho, Wo)."""
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t m = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t Ho = H + 2 * pad - k + 1, Wo = W + 2 * pad - k + 1
    out_arr = np.zeros((m, N, C, Ho, Wo), dtype=np.float64)
    cdef double[:, :, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, c, i, j, p, q, ii, jj, f
    cdef double xv
    for n in range(N):
        for c in range(C):
            for i in range(Ho):
                for p in range(k):
                    ii = i + p - pad
                    if ii < 0 or ii >= H:
                        continue
                    for j in range(Wo):
                        for q in range(k):
                            jj = j + q - pad
                            if jj < 0 or jj >= W:
                                continue
                            xv = x[n, c, ii, jj]
                            for f in range(m):
                                out[f, n, c, i, j] += w[f, c, p, q] * xv
    return out_arr


def dw_backward_multi(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                      const double[:, :, :, :, ::1] g, int pad):
    """Gradients of dw_forward_multi.

    g: (m, N, C, Ho, Wo) upstream gradients, one per filter bank.
    Returns (grad_x summed over banks, grad_w of shape (m, C, k, k)).
    """
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t m = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t Ho = g.shape[3], Wo = g.shape[4]
    gx_arr = np.zeros((N, C, H, W), dtype=np.float64)
    gw_arr = np.zeros((m, C, k, k), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t n, c, i, j, p, q, ii, jj, f
    cdef double xv, acc, gv
    for n in range(N):
        for c in range(C):
            for i in range(Ho):
                for p in range(k):
                    ii = i + p - pad
                    if ii < 0 or ii >= H:
                        continue
                    for j in range(Wo):
                        for q in range(k):
                            jj = j + q - pad
                            if jj < 0 or jj >= W:
                                continue
                            xv = x[n, c, ii, jj]
                            acc = 0.0
                            for f in range(m):
                                gv = g[f, n, c, i, j]
                                acc += gv * w[f, c, p, q]
                                gw[f, c, p, q] += gv * xv
                            gx[n, c, ii, jj] += acc
    return gx_arr, gw_arr
