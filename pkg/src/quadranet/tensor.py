"""Dense float64 tensors and the primitive numeric kernels.

A tensor is a C-contiguous ``numpy.ndarray`` of dtype float64. Feature maps
use the (N, C, H, W) layout. Every function here is pure: inputs are never
written to.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels

Tensor = np.ndarray


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_tensor(data, shape=None) -> Tensor:
    """Build a float64 tensor, optionally from flat row-major ``data`` and a ``shape``."""
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s < 1 for s in shape):
            raise ShapeError(f"dimension sizes must be >= 1, got {shape}")
        if arr.size != math.prod(shape):
            raise ShapeError(f"{arr.size} values cannot fill shape {shape}")
        arr = arr.reshape(shape)
    return np.ascontiguousarray(arr)


def flat_index(shape, index) -> int:
    return int(np.ravel_multi_index(tuple(index), tuple(shape)))


def unflat_index(shape, flat) -> tuple:
    return tuple(int(i) for i in np.unravel_index(flat, tuple(shape)))


@dataclass
class ConvKernel:
    """Weights (C_out, C_in/groups, k, k), optional bias (C_out,), and geometry."""

    weights: Tensor
    bias: Tensor | None = None
    groups: int = 1
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
            raise ShapeError(f"kernel weights must be (C_out, C_in/groups, k, k), got {self.weights.shape}")
        if self.groups < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError(f"bad conv geometry groups={self.groups} stride={self.stride} padding={self.padding}")
        if self.c_out % self.groups:
            raise ShapeError(f"C_out={self.c_out} is not divisible by groups={self.groups}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.c_out,):
                raise ShapeError(f"bias shape {self.bias.shape} != ({self.c_out},)")

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1] * self.groups

    @property
    def k(self) -> int:
        return self.weights.shape[2]

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.c_out == self.c_in

    @classmethod
    def depthwise(cls, weights, bias=None, padding=None) -> "ConvKernel":
        """Depthwise kernel from (C, k, k) taps with "same" padding by default."""
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim == 3:
            w = w[:, None]
        k = w.shape[-1]
        return cls(w, bias, groups=w.shape[0], stride=1, padding=k // 2 if padding is None else padding)

    @classmethod
    def pointwise(cls, weights, bias=None) -> "ConvKernel":
        """1x1 kernel from a (C_out, C_in) matrix."""
        w = np.asarray(weights, dtype=np.float64)
        return cls(w.reshape(w.shape[0], w.shape[1], 1, 1), bias)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _check_conv(x: Tensor, kernel: ConvKernel):
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects an NCHW input, got shape {x.shape}")
    if x.shape[1] != kernel.c_in:
        raise ShapeError(f"input has C={x.shape[1]} channels but kernel expects C_in={kernel.c_in} "
                         f"(C_out={kernel.c_out}, groups={kernel.groups})")
    for name, size in (("H", x.shape[2]), ("W", x.shape[3])):
        if conv_output_size(size, kernel.k, kernel.stride, kernel.padding) < 1:
            raise ShapeError(f"{name}={size} too small for k={kernel.k}, padding={kernel.padding}")


def _pad(x, p):
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x


def _taps(xp, k, stride, Ho, Wo):
    """(N, C, k, k, Ho, Wo) stack of strided input windows, one per kernel tap."""
    N, C = xp.shape[:2]
    cols = np.empty((N, C, k, k, Ho, Wo))
    for p in range(k):
        for q in range(k):
            cols[:, :, p, q] = xp[:, :, p:p + stride * (Ho - 1) + 1:stride, q:q + stride * (Wo - 1) + 1:stride]
    return cols


def conv2d_grouped(x, w, stride, padding, groups):
    """Grouped cross-correlation.

    Dense kernels (groups == 1) contract a tap stack against the weights in
    one tensordot; grouped kernels accumulate tap by tap.
    """
    N, C, H, W = x.shape
    C_out, cig, k, _ = w.shape
    Ho, Wo = conv_output_size(H, k, stride, padding), conv_output_size(W, k, stride, padding)
    xp = _pad(x, padding)
    if groups == 1:
        cols = _taps(xp, k, stride, Ho, Wo)
        out = np.tensordot(w, cols, axes=([1, 2, 3], [1, 2, 3]))  # (C_out, N, Ho, Wo)
        return np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    cog = C_out // groups
    wg = w.reshape(groups, cog, cig, k, k)
    out = np.zeros((N, groups, cog, Ho, Wo))
    for p in range(k):
        for q in range(k):
            patch = xp[:, :, p:p + stride * (Ho - 1) + 1:stride, q:q + stride * (Wo - 1) + 1:stride]
            patch = patch.reshape(N, groups, cig, Ho, Wo)
            out += np.einsum("ngchw,goc->ngohw", patch, wg[..., p, q])
    return out.reshape(N, C_out, Ho, Wo)


def conv2d_grouped_backward(x, w, g, stride, padding, groups):
    """Return (grad_x, grad_w) of :func:`conv2d_grouped` for upstream ``g``."""
    N, C, H, W = x.shape
    C_out, cig, k, _ = w.shape
    Ho, Wo = g.shape[2], g.shape[3]
    xp = _pad(x, padding)
    gxp = np.zeros_like(xp)
    if groups == 1:
        cols = _taps(xp, k, stride, Ho, Wo)
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))  # (C_out, C, k, k)
        gcols = np.tensordot(w, g, axes=([0], [1]))  # (C, k, k, N, Ho, Wo)
        for p in range(k):
            for q in range(k):
                gxp[:, :, p:p + stride * (Ho - 1) + 1:stride, q:q + stride * (Wo - 1) + 1:stride] += \
                    gcols[:, p, q].transpose(1, 0, 2, 3)
    else:
        cog = C_out // groups
        wg = w.reshape(groups, cog, cig, k, k)
        gg = g.reshape(N, groups, cog, Ho, Wo)
        gw = np.zeros((groups, cog, cig, k, k))
        for p in range(k):
            for q in range(k):
                rows = slice(p, p + stride * (Ho - 1) + 1, stride)
                cols_ = slice(q, q + stride * (Wo - 1) + 1, stride)
                patch = xp[:, :, rows, cols_].reshape(N, groups, cig, Ho, Wo)
                gw[..., p, q] = np.einsum("ngohw,ngchw->goc", gg, patch)
                gxp[:, :, rows, cols_] += np.einsum("ngohw,goc->ngchw", gg, wg[..., p, q]).reshape(N, C, Ho, Wo)
        gw = gw.reshape(w.shape)
    gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
    return np.ascontiguousarray(gx), gw


def pointwise(x, w2):
    """1x1 conv of (N, C, H, W) by a (C_out, C) matrix, as a batched matmul."""
    N, C, H, W = x.shape
    return np.matmul(w2, x.reshape(N, C, H * W)).reshape(N, w2.shape[0], H, W)


def pointwise_backward(x, w2, g, need_x=True):
    """(grad_x, grad_w2) of :func:`pointwise`."""
    N, C, H, W = x.shape
    g3 = g.reshape(N, w2.shape[0], H * W)
    gw = np.tensordot(g3, x.reshape(N, C, H * W), axes=([0, 2], [0, 2]))
    gx = np.matmul(w2.T, g3).reshape(N, C, H, W) if need_x else None
    return gx, gw


def conv2d(x: Tensor, kernel: ConvKernel) -> Tensor:
    """Cross-correlation of an NCHW input with ``kernel``.

    Depthwise stride-1 kernels go through the compiled depthwise path,
    1x1 dense kernels through a tensordot, everything else through the
    grouped tap-accumulation loop.
    """
    _check_conv(x, kernel)
    w = kernel.weights
    if kernel.is_depthwise and kernel.stride == 1:
        out = kernels.dw_forward_multi(x, w[None, :, 0], kernel.padding)[0]
    elif kernel.k == 1 and kernel.groups == 1 and kernel.stride == 1 and kernel.padding == 0:
        out = pointwise(x, w[:, :, 0, 0])
    else:
        out = conv2d_grouped(x, w, kernel.stride, kernel.padding, kernel.groups)
    if kernel.bias is not None:
        out = out + kernel.bias[None, :, None, None]
    return np.ascontiguousarray(out)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the channel axis (axis 1) at every other index, then scale and shift."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"gamma/beta shapes {gamma.shape}/{beta.shape} do not match C={C}")
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    xhat = xc / np.sqrt(var + eps)
    shape = (1, C) + (1,) * (x.ndim - 2)
    return xhat * gamma.reshape(shape) + beta.reshape(shape)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x)))


def gelu_grad(x: Tensor) -> Tensor:
    x2 = x * x
    u = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"hadamard operands differ in shape: {a.shape} vs {b.shape}")
    return a * b


def softmax_lastdim(x: Tensor) -> Tensor:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
