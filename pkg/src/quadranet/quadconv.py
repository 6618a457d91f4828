"""Quadratic convolution: ``f_a(x) * f_b(x) + f_c(x)``.

``f_a``, ``f_b`` and ``f_c`` are convolutions sharing one geometry: either
depthwise k x k (the spatial mixer of a QuadraBlock) or dense 1 x 1 (the
channel-mixing ablation). The bias sits on the linear path ``f_c``.

The recorded tape node materialises four states per output element
(``f_a(x)``, ``f_b(x)``, their product and ``f_c(x)``) but keeps only
``f_a(x)`` and ``f_b(x)`` for backward: the weight gradient of the product
term needs the *other* factor and the input, never the product itself, and
the linear path needs nothing beyond its input.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import kernels
from .tensor import ConvKernel, ShapeError, conv2d, pointwise, pointwise_backward


class MissingStateError(RuntimeError):
    """Backward was asked to run without a state its release rule keeps."""


@dataclass
class QuadraticConv:
    W_a: np.ndarray
    W_b: np.ndarray
    W_c: np.ndarray
    bias: np.ndarray | None = None
    groups: int = 1
    padding: int = 0

    def __post_init__(self):
        if not (self.W_a.shape == self.W_b.shape == self.W_c.shape) or self.W_a.ndim != 4:
            raise ShapeError(f"W_a/W_b/W_c must share one (C_out, C_in/groups, k, k) shape, got "
                             f"{self.W_a.shape}, {self.W_b.shape}, {self.W_c.shape}")
        if self.bias is not None and self.bias.shape != (self.c_out,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({self.c_out},)")

    @property
    def c_out(self) -> int:
        return self.W_a.shape[0]

    @property
    def c_in(self) -> int:
        return self.W_a.shape[1] * self.groups

    @property
    def k(self) -> int:
        return self.W_a.shape[2]

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.c_out == self.c_in and self.W_a.shape[1] == 1

    @property
    def is_pointwise(self) -> bool:
        return self.k == 1 and self.groups == 1

    def kernels(self):
        """The three filter banks as :class:`ConvKernel` objects (bias on ``f_c``)."""
        make = lambda w, b=None: ConvKernel(w, b, groups=self.groups, padding=self.padding)
        return make(self.W_a), make(self.W_b), make(self.W_c, self.bias)

    def num_params(self) -> int:
        return 3 * self.W_a.size + (0 if self.bias is None else self.bias.size)

    @classmethod
    def depthwise(cls, C, k, rng=None, bias=True, scale=None):
        """Depthwise k x k quadratic conv with "same" padding."""
        rng = np.random.default_rng(0) if rng is None else rng
        scale = 1.0 / k if scale is None else scale
        shape = (C, 1, k, k)
        return cls(rng.normal(0, scale, shape), rng.normal(0, scale, shape), rng.normal(0, scale, shape),
                   np.zeros(C) if bias else None, groups=C, padding=k // 2)

    @classmethod
    def pointwise(cls, c_in, c_out, rng=None, bias=True, scale=None):
        rng = np.random.default_rng(0) if rng is None else rng
        scale = 1.0 / np.sqrt(c_in) if scale is None else scale
        shape = (c_out, c_in, 1, 1)
        return cls(rng.normal(0, scale, shape), rng.normal(0, scale, shape), rng.normal(0, scale, shape),
                   np.zeros(c_out) if bias else None, groups=1, padding=0)


def _check_input(qc: QuadraticConv, x):
    if x.ndim != 4 or x.shape[1] != qc.c_in:
        raise ShapeError(f"quadratic conv expects (N, {qc.c_in}, H, W) input, got {x.shape}")
    if not (qc.is_depthwise or qc.is_pointwise):
        raise ShapeError("quadratic conv supports depthwise or dense 1x1 geometry only "
                         f"(C_out={qc.c_out}, C_in={qc.c_in}, groups={qc.groups}, k={qc.k})")


def _three_convs(x, wa, wb, wc, depthwise, padding):
    if depthwise:
        stack = np.stack([wa[:, 0], wb[:, 0], wc[:, 0]])
        fa, fb, fc = kernels.dw_forward_multi(x, stack, padding)
        return fa, fb, fc
    return tuple(pointwise(x, w[:, :, 0, 0]) for w in (wa, wb, wc))


def _grads(x, wa, wb, wc, fa, fb, g, depthwise, padding, need_x=True):
    """Weight and input gradients from the input and the two kept factors.

    dL/dW_a correlates (g * f_b(x)) against x; dL/dW_b correlates (g * f_a(x))
    against x; dL/dW_c correlates g against x.
    """
    ga = g * fb
    gb = g * fa
    if depthwise:
        gx, gw = kernels.dw_backward_multi(x, np.stack([wa[:, 0], wb[:, 0], wc[:, 0]]),
                                           np.stack([ga, gb, g]), padding)
        return gx, gw[0][:, None], gw[1][:, None], gw[2][:, None]
    gx = None
    gws = []
    for w, gf in ((wa, ga), (wb, gb), (wc, g)):
        gxf, gwf = pointwise_backward(x, w[:, :, 0, 0], gf, need_x)
        gws.append(gwf[:, :, None, None])
        if need_x:
            gx = gxf if gx is None else gx + gxf
    return gx, gws[0], gws[1], gws[2]


def forward(qc: QuadraticConv, x) -> np.ndarray:
    """Tensor form: elementwise product of two convolutions plus a third."""
    x = np.asarray(x, dtype=np.float64)
    _check_input(qc, x)
    fa, fb, fc = _three_convs(x, qc.W_a, qc.W_b, qc.W_c, qc.is_depthwise, qc.padding)
    out = fa * fb + fc
    if qc.bias is not None:
        out += qc.bias[None, :, None, None]
    return out


def quadratic_pointwise(qc: QuadraticConv, x) -> np.ndarray:
    """1 x 1 quadratic conv with full channel mixing."""
    if not qc.is_pointwise:
        raise ShapeError(f"quadratic_pointwise needs 1x1 kernels with groups=1, got k={qc.k}, groups={qc.groups}")
    return forward(qc, x)


def forward_with_states(qc: QuadraticConv, x):
    """Forward pass returning ``(output, retained)`` where ``retained`` holds f_a(x), f_b(x)."""
    x = np.asarray(x, dtype=np.float64)
    _check_input(qc, x)
    fa, fb, fc = _three_convs(x, qc.W_a, qc.W_b, qc.W_c, qc.is_depthwise, qc.padding)
    out = fa * fb + fc
    if qc.bias is not None:
        out += qc.bias[None, :, None, None]
    return out, {"fa": fa, "fb": fb}


def backward_optimized(qc: QuadraticConv, x, upstream, retained):
    """(grad_Wa, grad_Wb, grad_Wc, grad_x) using only x, f_a(x) and f_b(x).

    ``retained`` is the dict from :func:`forward_with_states`. The bias
    gradient, when needed, is ``upstream.sum((0, 2, 3))``.
    """
    missing = [key for key in ("fa", "fb") if key not in retained]
    if missing:
        raise MissingStateError(f"backward needs retained states {missing}")
    gx, gwa, gwb, gwc = _grads(np.asarray(x, dtype=np.float64), qc.W_a, qc.W_b, qc.W_c,
                               retained["fa"], retained["fb"], np.asarray(upstream, dtype=np.float64),
                               qc.is_depthwise, qc.padding)
    return gwa, gwb, gwc, gx


def quadratic_conv(x: ag.Var, W_a: ag.Var, W_b: ag.Var, W_c: ag.Var, bias: ag.Var | None = None,
                   groups=1, padding=0) -> ag.Var:
    """Fused, differentiable quadratic convolution on a tape."""
    xv, wa, wb, wc = x.value, W_a.value, W_b.value, W_c.value
    depthwise = groups == wa.shape[0] == xv.shape[1] and wa.shape[1] == 1
    if not depthwise and not (wa.shape[2] == 1 and groups == 1 and padding == 0):
        raise ShapeError("quadratic_conv supports depthwise or dense 1x1 geometry only")
    if xv.ndim != 4 or xv.shape[1] != wa.shape[1] * groups:
        raise ShapeError(f"quadratic_conv: input {xv.shape} incompatible with weights {wa.shape}")
    fa, fb, fc = _three_convs(xv, wa, wb, wc, depthwise, padding)
    prod = fa * fb
    out = prod + fc
    if bias is not None:
        out = out + bias.value[None, :, None, None]
    E = fa.size
    states = [("fa", E), ("fb", E), ("fa*fb", E), ("fc", E)]

    def bw(g, ins, saved, needs):
        gx, gwa, gwb, gwc = _grads(ins[0], ins[1], ins[2], ins[3], saved["fa"], saved["fb"], g,
                                   depthwise, padding, need_x=needs[0])
        res = [gx, gwa, gwb, gwc]
        if len(ins) == 5:
            res.append(g.sum(axis=(0, 2, 3)))
        return tuple(res)

    inputs = (x, W_a, W_b, W_c) + (() if bias is None else (bias,))
    return x.tape.record("quadconv", inputs, out, bw, saved={"fa": fa, "fb": fb},
                         released={"fa*fb": prod, "fc": fc}, forward_states=states)


def quadratic_conv_layer(tape: ag.Tape, qc: QuadraticConv, x: ag.Var) -> ag.Var:
    bias = None if qc.bias is None else tape.param(qc.bias)
    return quadratic_conv(x, tape.param(qc.W_a), tape.param(qc.W_b), tape.param(qc.W_c), bias,
                          qc.groups, qc.padding)


def quadratic_conv_composed(tape: ag.Tape, qc: QuadraticConv, x: ag.Var) -> ag.Var:
    """The same function built from generic conv/mul/add nodes (no custom release rule)."""
    conv = lambda w, b=None: ag.conv2d(x, tape.param(w), b, padding=qc.padding, groups=qc.groups)
    fa = conv(qc.W_a)
    fb = conv(qc.W_b)
    fc = conv(qc.W_c, None if qc.bias is None else tape.param(qc.bias))
    return ag.add(ag.mul(fa, fb), fc)


def oracle_forward(qc: QuadraticConv, x) -> np.ndarray:
    """Per-pixel double sum over the receptive field, depthwise geometry only.

    out[i] = sum_{j in field(i)} sum_{l in field(i)} (wa[i->j] x_j)(wb[i->l] x_l)
             + sum_j wc[i->j] x_j + bias

    The two tap loops are explicit; each iteration is vectorised over every
    (n, c, h, w) output position at once.
    """
    x = np.asarray(x, dtype=np.float64)
    if not qc.is_depthwise:
        raise ShapeError("oracle_forward needs depthwise geometry")
    _check_input(qc, x)
    k, p = qc.k, qc.padding
    N, C, H, W = x.shape
    Ho, Wo = H + 2 * p - k + 1, W + 2 * p - k + 1
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    taps = [(r, s) for r in range(k) for s in range(k)]
    shifted = [xp[:, :, r:r + Ho, s:s + Wo] for r, s in taps]
    wa = qc.W_a[:, 0].reshape(C, -1)[None, :, :, None, None]
    wb = qc.W_b[:, 0].reshape(C, -1)[None, :, :, None, None]
    wc = qc.W_c[:, 0].reshape(C, -1)[None, :, :, None, None]
    out = np.zeros((N, C, Ho, Wo))
    for j in range(len(taps)):
        left = wa[:, :, j] * shifted[j]
        for l in range(len(taps)):
            out += left * (wb[:, :, l] * shifted[l])
        out += wc[:, :, j] * shifted[j]
    if qc.bias is not None:
        out += qc.bias[None, :, None, None]
    return out


def input_adaptive_weight(qc: QuadraticConv, x, i, c) -> np.ndarray:
    """k x k map q_j = wa[i->j] * sum_l wb[i->l] x_l at output position ``i`` = (n, h, w).

    Summing ``q * neighbourhood(x)`` over the map gives the quadratic part of
    the output at (i, c): the quadratic term is a linear filter whose weights
    depend on the input. Off-image neighbours are zero.
    """
    x = np.asarray(x, dtype=np.float64)
    if not qc.is_depthwise:
        raise ShapeError("input_adaptive_weight needs depthwise geometry")
    _check_input(qc, x)
    n, h, w = i
    N, C, H, W = x.shape
    k, p = qc.k, qc.padding
    Ho, Wo = H + 2 * p - k + 1, W + 2 * p - k + 1
    if not (0 <= n < N and 0 <= h < Ho and 0 <= w < Wo and 0 <= c < C):
        raise IndexError(f"position (n={n}, h={h}, w={w}), channel {c} outside output "
                         f"({N}, {C}, {Ho}, {Wo})")
    patch = neighbourhood(x, n, c, h, w, k, p)
    return qc.W_a[c, 0] * float(np.sum(qc.W_b[c, 0] * patch))


def neighbourhood(x, n, c, h, w, k, padding) -> np.ndarray:
    """k x k input window feeding output (h, w), zero outside the image."""
    xp = np.pad(x[n, c], padding)
    return xp[h:h + k, w:w + k]


def plain_conv(qc: QuadraticConv, x) -> np.ndarray:
    """Only the linear path ``f_c`` (what the layer degenerates to when W_a = 0)."""
    return conv2d(np.asarray(x, dtype=np.float64), qc.kernels()[2])
