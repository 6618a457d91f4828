"""Pure numpy versions of the depthwise kernels in ``_kernels.pyx``.

Same signatures and results (up to summation order) as the compiled module.
The loops run over the k*k filter taps; each tap is one vectorised
multiply-add over the whole (N, C, Ho, Wo) block.
"""
import numpy as np


def dw_forward_multi(x, w, pad):
    m, C, k, _ = w.shape
    N, _, H, W = x.shape
    Ho, Wo = H + 2 * pad - k + 1, W + 2 * pad - k + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.zeros((m, N, C, Ho, Wo))
    for p in range(k):
        for q in range(k):
            patch = xp[:, :, p:p + Ho, q:q + Wo]
            out += w[:, None, :, p, q, None, None] * patch[None]
    return out


def dw_backward_multi(x, w, g, pad):
    m, C, k, _ = w.shape
    N, _, H, W = x.shape
    Ho, Wo = g.shape[3], g.shape[4]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    gxp = np.zeros_like(xp)
    gw = np.zeros((m, C, k, k))
    for p in range(k):
        for q in range(k):
            patch = xp[:, :, p:p + Ho, q:q + Wo]
            gw[:, :, p, q] = np.einsum("fnchw,nchw->fc", g, patch)
            gxp[:, :, p:p + Ho, q:q + Wo] += np.einsum("fnchw,fc->nchw", g, w[:, :, p, q])
    gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
    return np.ascontiguousarray(gx), gw
