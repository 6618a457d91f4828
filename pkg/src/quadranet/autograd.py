"""Tape-based reverse-mode differentiation with intermediate-state accounting.

Every differentiable op appends a :class:`Node` to a :class:`Tape`. A node
records two lists of ``(label, element_count)`` pairs:

* ``forward_states``: the intermediate tensors the op materialises;
* ``retained_states``: the buffers the op keeps alive for its backward rule.

Inputs of an op are owned by whichever node produced them and are never
counted as the consumer's states. A tape created with ``retain_all=True``
models a naive framework that keeps every forward state until backward.
A tape created with ``poison_released=True`` hands NaN-filled copies of the
released states to backward rules, so a rule that reads one is caught.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .tensor import (ShapeError, conv2d_grouped, conv2d_grouped_backward, conv_output_size, gelu_grad,
                     pointwise, pointwise_backward)
from .tensor import gelu as _gelu
from .tensor import softmax_lastdim


@dataclass
class Node:
    id: int
    op_kind: str
    input_ids: tuple
    output_shape: tuple
    forward_states: list = field(default_factory=list)
    retained_states: list = field(default_factory=list)
    backward_fn: Callable | None = None
    saved: dict = field(default_factory=dict)
    released: dict = field(default_factory=dict)
    requires_grad: bool = False


class Tape:
    def __init__(self, retain_all=False, poison_released=False):
        self.nodes: list[Node] = []
        self.values: dict[int, np.ndarray] = {}
        self.grads: dict[int, np.ndarray] = {}
        self.retain_all = retain_all
        self.poison_released = poison_released
        self._params: dict[int, Var] = {}
        self._param_arrays: dict[int, np.ndarray] = {}

    def leaf(self, value, requires_grad=False, label="input") -> "Var":
        value = np.asarray(value, dtype=np.float64)
        node = Node(len(self.nodes), "leaf", (), value.shape, requires_grad=requires_grad)
        node.saved = {"label": label}
        self.nodes.append(node)
        self.values[node.id] = value
        return Var(self, node.id)

    def param(self, arr: np.ndarray) -> "Var":
        """Leaf for a parameter array; the same array object maps to the same node."""
        var = self._params.get(id(arr))
        if var is None:
            var = self.leaf(arr, requires_grad=True, label="param")
            self._params[id(arr)] = var
            self._param_arrays[id(arr)] = arr
        return var

    def grad_of(self, arr: np.ndarray) -> np.ndarray:
        var = self._params[id(arr)]
        g = self.grads.get(var.id)
        return np.zeros_like(arr) if g is None else g

    def record(self, op_kind, inputs, value, backward_fn, saved=None, released=None,
               forward_states=None) -> "Var":
        """Append an op node.

        ``saved`` maps labels to the buffers the backward rule reads besides the
        op's inputs; ``released`` maps labels to forward states that the rule
        promises not to read. ``forward_states`` defaults to the single output.
        """
        ids = tuple(v.id for v in inputs)
        node_id = len(self.nodes)
        assert all(i < node_id for i in ids), "tape must be a DAG in id order"
        value = np.asarray(value, dtype=np.float64)
        saved = dict(saved or {})
        released = dict(released or {})
        if forward_states is None:
            forward_states = [("out", value.size)]
        if self.retain_all:
            retained = list(forward_states)
        else:
            retained = [(label, int(buf.size)) for label, buf in saved.items()]
        node = Node(node_id, op_kind, ids, value.shape, list(forward_states), retained,
                    backward_fn, saved, requires_grad=any(self.nodes[i].requires_grad for i in ids))
        if self.poison_released:
            node.released = {label: np.full_like(buf, np.nan) for label, buf in released.items()}
        self.nodes.append(node)
        self.values[node_id] = value
        return Var(self, node_id)


class Var:
    """Handle to a value on a tape."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: Tape, node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.id]

    @property
    def shape(self):
        return self.value.shape

    @property
    def grad(self):
        return self.tape.grads.get(self.id)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(self.tape, other)))

    def __rsub__(self, other):
        return add(_lift(self.tape, other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"


def _lift(tape, x) -> Var:
    return x if isinstance(x, Var) else tape.leaf(x)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(tape: Tape, loss: Var | int) -> dict[int, np.ndarray]:
    """Populate ``tape.grads`` with d(loss)/d(value) for every reachable node."""
    loss_id = loss.id if isinstance(loss, Var) else int(loss)
    loss_value = tape.values[loss_id]
    if loss_value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, node {loss_id} has shape {loss_value.shape}")
    reachable = np.zeros(loss_id + 1, dtype=bool)
    reachable[loss_id] = True
    for node in reversed(tape.nodes[:loss_id + 1]):
        if reachable[node.id]:
            for i in node.input_ids:
                if i >= node.id:
                    raise RuntimeError(f"cycle: node {node.id} consumes node {i}")
                reachable[i] = True
    grads = {loss_id: np.ones_like(loss_value)}
    for node in reversed(tape.nodes[:loss_id + 1]):
        g = grads.get(node.id)
        if g is None or node.backward_fn is None or not node.requires_grad:
            continue
        ins = [tape.values[i] for i in node.input_ids]
        needs = tuple(tape.nodes[i].requires_grad for i in node.input_ids)
        saved = {**node.released, **node.saved} if node.released else node.saved
        in_grads = node.backward_fn(g, ins, saved, needs)
        for i, gi, need in zip(node.input_ids, in_grads, needs):
            if gi is None or not need:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    tape.grads = {i: g for i, g in grads.items() if tape.nodes[i].requires_grad or i == loss_id}
    return tape.grads


def state_report(tape: Tape, phase: str = "forward") -> dict[str, int]:
    """Element counts per ``"<node id>:<op>.<label>"`` for the given phase."""
    if phase not in ("forward", "backward"):
        raise ValueError(f"phase must be 'forward' or 'backward', got {phase!r}")
    report = {}
    for node in tape.nodes:
        states = node.forward_states if phase == "forward" else node.retained_states
        for label, count in states:
            report[f"{node.id}:{node.op_kind}.{label}"] = int(count)
    return report


def state_total(tape: Tape, phase: str = "forward") -> int:
    return sum(state_report(tape, phase).values())


def finite_difference_grad(f, x, h=1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``; ``x`` is not modified."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a, b, floor=1e-12) -> float:
    """Norm-wise relative error ||a - b|| / max(||a|| + ||b||, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), floor))


# ---------------------------------------------------------------------------
# differentiable ops

def add(a: Var, b) -> Var:
    b = _lift(a.tape, b)
    sa, sb = a.shape, b.shape

    def bw(g, ins, saved, needs):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return a.tape.record("add", (a, b), a.value + b.value, bw)


def neg(a: Var) -> Var:
    return a.tape.record("neg", (a,), -a.value, lambda g, ins, saved, needs: (-g,))


def mul(a: Var, b) -> Var:
    """Elementwise (Hadamard) product with broadcasting."""
    b = _lift(a.tape, b)
    sa, sb = a.shape, b.shape

    def bw(g, ins, saved, needs):
        x, y = ins
        return (_unbroadcast(g * y, sa) if needs[0] else None,
                _unbroadcast(g * x, sb) if needs[1] else None)

    return a.tape.record("mul", (a, b), a.value * b.value, bw)


def sum_all(a: Var) -> Var:
    shape = a.shape
    return a.tape.record("sum", (a,), np.array(a.value.sum()),
                         lambda g, ins, saved, needs: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Var) -> Var:
    shape, n = a.shape, a.value.size
    return a.tape.record("mean", (a,), np.array(a.value.mean()),
                         lambda g, ins, saved, needs: (np.full(shape, float(g) / n),))


def matmul(a: Var, b: Var) -> Var:
    """a (N, K) @ b (K, M) or (K,)."""

    def bw(g, ins, saved, needs):
        x, y = ins
        if y.ndim == 1:
            return (np.outer(g, y) if needs[0] else None, x.T @ g if needs[1] else None)
        return (g @ y.T if needs[0] else None, x.T @ g if needs[1] else None)

    return a.tape.record("matmul", (a, b), a.value @ b.value, bw)


def linear(x: Var, w: Var, b: Var | None = None) -> Var:
    """x (N, C_in) -> x @ w.T + b with w (C_out, C_in)."""

    def bw(g, ins, saved, needs):
        xv, wv = ins[0], ins[1]
        out = [g @ wv if needs[0] else None, g.T @ xv if needs[1] else None]
        if len(ins) == 3:
            out.append(g.sum(axis=0))
        return tuple(out)

    inputs = (x, w) if b is None else (x, w, b)
    out = x.value @ w.value.T
    if b is not None:
        out = out + b.value
    return x.tape.record("linear", inputs, out, bw)


def conv2d(x: Var, w: Var, b: Var | None = None, stride=1, padding=0, groups=1) -> Var:
    """Differentiable counterpart of :func:`quadranet.tensor.conv2d`."""
    xv, wv = x.value, w.value
    if xv.ndim != 4 or xv.shape[1] != wv.shape[1] * groups or wv.shape[0] % groups:
        raise ShapeError(f"conv2d: input {xv.shape} incompatible with weights {wv.shape} (groups={groups})")
    C_out, _, k, _ = wv.shape
    depthwise = groups == C_out == xv.shape[1] and stride == 1
    is_pw = k == 1 and groups == 1 and stride == 1 and padding == 0
    for size in xv.shape[2:]:
        if conv_output_size(size, k, stride, padding) < 1:
            raise ShapeError(f"conv2d: spatial size {size} too small for k={k}, padding={padding}")
    if depthwise:
        out = kernels.dw_forward_multi(xv, wv[None, :, 0], padding)[0]
    elif is_pw:
        out = pointwise(xv, wv[:, :, 0, 0])
    else:
        out = conv2d_grouped(xv, wv, stride, padding, groups)
    if b is not None:
        out = out + b.value[None, :, None, None]

    def bw(g, ins, saved, needs):
        xi, wi = ins[0], ins[1]
        if depthwise:
            gx, gw = kernels.dw_backward_multi(xi, wi[None, :, 0], g[None], padding)
            gw = gw[0][:, None]
        elif is_pw:
            gx, gw = pointwise_backward(xi, wi[:, :, 0, 0], g, needs[0])
            gw = gw[:, :, None, None]
        else:
            gx, gw = conv2d_grouped_backward(xi, wi, g, stride, padding, groups)
        res = [gx, gw]
        if len(ins) == 3:
            res.append(g.sum(axis=(0, 2, 3)))
        return tuple(res)

    inputs = (x, w) if b is None else (x, w, b)
    return x.tape.record("conv2d", inputs, np.ascontiguousarray(out), bw)


def layer_norm(x: Var, gamma: Var, beta: Var, eps=1e-6) -> Var:
    """Normalise over axis 1 (channels) of an (N, C, ...) input."""
    xv = x.value
    C = xv.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"layer_norm: gamma/beta {gamma.shape}/{beta.shape} do not match C={C}")
    shape = (1, C) + (1,) * (xv.ndim - 2)
    mu = xv.mean(axis=1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.value.reshape(shape) + beta.value.reshape(shape)
    red = (0,) + tuple(range(2, xv.ndim))

    def bw(g, ins, saved, needs):
        xh, rs = saved["xhat"], saved["rstd"]
        gam = ins[1].reshape(shape)
        gx = None
        if needs[0]:
            gxh = g * gam
            gx = rs * (gxh - gxh.mean(axis=1, keepdims=True)
                       - xh * (gxh * xh).mean(axis=1, keepdims=True))
        return gx, (g * xh).sum(axis=red), g.sum(axis=red)

    return x.tape.record("layer_norm", (x, gamma, beta), out, bw, saved={"xhat": xhat, "rstd": rstd})


def gelu(x: Var) -> Var:
    return x.tape.record("gelu", (x,), _gelu(x.value),
                         lambda g, ins, saved, needs: (g * gelu_grad(ins[0]),))


def global_avg_pool(x: Var) -> Var:
    """(N, C, H, W) -> (N, C)."""
    N, C, H, W = x.shape

    def bw(g, ins, saved, needs):
        return (np.broadcast_to(g[:, :, None, None] / (H * W), (N, C, H, W)).copy(),)

    return x.tape.record("avg_pool", (x,), x.value.mean(axis=(2, 3)), bw)


def cross_entropy(logits: Var, labels) -> Var:
    """Mean softmax cross-entropy of (N, K) logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.value
    N = z.shape[0]
    if labels.shape != (N,):
        raise ShapeError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {N} rows")
    probs = softmax_lastdim(z)
    zmax = z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    loss = float(np.mean(logsum - z[np.arange(N), labels]))

    def bw(g, ins, saved, needs):
        d = saved["probs"].copy()
        d[np.arange(N), labels] -= 1.0
        return (d * (float(g) / N),)

    return logits.tape.record("cross_entropy", (logits,), np.array(loss), bw, saved={"probs": probs})


def mse(pred: Var, target) -> Var:
    target = np.asarray(target, dtype=np.float64)
    diff = pred.value - target
    n = diff.size

    def bw(g, ins, saved, needs):
        return (2.0 * float(g) / n * (ins[0] - target),)

    return pred.tape.record("mse", (pred,), np.array(np.mean(diff * diff)), bw)


def reshape(x: Var, shape) -> Var:
    old = x.shape
    return x.tape.record("reshape", (x,), x.value.reshape(shape),
                         lambda g, ins, saved, needs: (g.reshape(old),), forward_states=[])


def num_elements(shape) -> int:
    return math.prod(shape)
