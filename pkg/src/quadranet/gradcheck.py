"""Finite-difference checks for every differentiable op and every block kind.

Each case builds a small graph from a list of input arrays; the scalar loss
is the output contracted with a fixed random projection, so every output
element contributes. Analytic gradients from the tape are compared to
central differences input by input.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .blocks import Block, BlockSpec, attention_core
from .quadconv import quadratic_conv

TOLERANCE = 1e-5


@dataclass
class CheckResult:
    name: str
    seed: int
    max_relative_error: float

    @property
    def passed(self) -> bool:
        return self.max_relative_error < TOLERANCE


def check(name, build, inputs, seed=0, h=1e-5, grad_mask=None) -> CheckResult:
    """Compare tape gradients of ``sum(build(tape, vars) * P)`` with central differences.

    ``grad_mask`` lists which inputs to check (default: all).
    """
    inputs = [np.asarray(a, dtype=np.float64) for a in inputs]
    grad_mask = grad_mask or [True] * len(inputs)
    tape = ag.Tape()
    vs = [tape.leaf(a, requires_grad=m) for a, m in zip(inputs, grad_mask)]
    out = build(tape, vs)
    proj = np.random.default_rng([seed, 99]).normal(size=out.shape)
    loss = ag.sum_all(out * tape.leaf(proj))
    ag.backward(tape, loss)

    def value(arrays):
        t = ag.Tape()
        return float(np.sum(build(t, [t.leaf(a) for a in arrays]).value * proj))

    worst = 0.0
    for i, (a, m) in enumerate(zip(inputs, grad_mask)):
        if not m:
            continue

        def f(x, i=i):
            arrays = list(inputs)
            arrays[i] = x
            return value(arrays)

        numeric = ag.finite_difference_grad(f, a, h)
        analytic = vs[i].grad if vs[i].grad is not None else np.zeros_like(a)
        worst = max(worst, ag.relative_error(analytic, numeric))
    return CheckResult(name, seed, worst)


def _block_case(kind, **kw):
    def build(tape, vs):
        x, = vs
        block = Block(BlockSpec(kind, **kw), x.shape[1], np.random.default_rng(7))
        return block(tape, x)
    return build


def cases(seed: int):
    """``(name, build, inputs, grad_mask)`` tuples for one seed."""
    rng = np.random.default_rng(seed)
    r = lambda *shape: rng.normal(size=shape)
    labels = rng.integers(0, 3, size=4)
    target = r(3, 4)
    yield "add_broadcast", lambda t, v: v[0] + v[1], [r(2, 3, 4), r(3, 1)], None
    yield "mul_broadcast", lambda t, v: v[0] * v[1], [r(2, 3, 4), r(1, 4)], None
    yield "neg_sub", lambda t, v: v[0] - v[1], [r(3, 4), r(3, 4)], None
    yield "sum_all", lambda t, v: ag.sum_all(v[0]), [r(3, 4)], None
    yield "mean_all", lambda t, v: ag.mean_all(v[0]), [r(3, 4)], None
    yield "matmul", lambda t, v: ag.matmul(v[0], v[1]), [r(3, 4), r(4, 5)], None
    yield "linear", lambda t, v: ag.linear(v[0], v[1], v[2]), [r(3, 4), r(5, 4), r(5)], None
    yield "conv2d_dense_stride2", lambda t, v: ag.conv2d(v[0], v[1], v[2], stride=2, padding=1), \
        [r(2, 3, 6, 6), r(4, 3, 3, 3), r(4)], None
    yield "conv2d_patch4", lambda t, v: ag.conv2d(v[0], v[1], v[2], stride=4), \
        [r(2, 3, 8, 8), r(4, 3, 4, 4), r(4)], None
    yield "conv2d_depthwise", lambda t, v: ag.conv2d(v[0], v[1], v[2], padding=2, groups=3), \
        [r(2, 3, 6, 6), r(3, 1, 5, 5), r(3)], None
    yield "conv2d_pointwise", lambda t, v: ag.conv2d(v[0], v[1], v[2]), \
        [r(2, 3, 4, 4), r(5, 3, 1, 1), r(5)], None
    yield "conv2d_grouped", lambda t, v: ag.conv2d(v[0], v[1], None, padding=1, groups=2), \
        [r(2, 4, 5, 5), r(6, 2, 3, 3)], None
    yield "layer_norm", lambda t, v: ag.layer_norm(v[0], v[1], v[2]), \
        [r(2, 5, 3, 3), 1 + 0.1 * r(5), r(5)], None
    yield "gelu", lambda t, v: ag.gelu(v[0]), [r(3, 7)], None
    yield "global_avg_pool", lambda t, v: ag.global_avg_pool(v[0]), [r(2, 3, 4, 4)], None
    yield "cross_entropy", lambda t, v: ag.cross_entropy(v[0], labels), [r(4, 3)], None
    yield "mse", lambda t, v: ag.mse(v[0], target), [r(3, 4)], None
    yield "reshape", lambda t, v: ag.reshape(v[0], (4, 6)), [r(2, 3, 4)], None
    yield "quadratic_conv_depthwise", \
        lambda t, v: quadratic_conv(v[0], v[1], v[2], v[3], v[4], groups=3, padding=1), \
        [r(2, 3, 5, 5), r(3, 1, 3, 3), r(3, 1, 3, 3), r(3, 1, 3, 3), r(3)], None
    yield "quadratic_conv_pointwise", lambda t, v: quadratic_conv(v[0], v[1], v[2], v[3], v[4]), \
        [r(2, 3, 4, 4), r(5, 3, 1, 1), r(5, 3, 1, 1), r(5, 3, 1, 1), r(5)], None
    yield "attention_core", lambda t, v: attention_core(v[0], v[1], v[2], v[3], 2), \
        [r(1, 3, 4, 4), 0.5 * r(3, 3), 0.5 * r(3, 3), 0.5 * r(3, 3)], None
    for kind, kw in (("quadra", {"kernel": 3, "expansion": 2}),
                     ("quadra", {"kernel": 3, "expansion": 2, "quad_pw": 2}),
                     ("conv", {"kernel": 3, "expansion": 2}),
                     ("attn", {"window": 2, "expansion": 2}),
                     ("skip", {"expansion": 2})):
        tag = kind + ("_quadpw" if kw.get("quad_pw") else "")
        yield f"block_{tag}", _block_case(kind, **kw), [r(2, 4, 4, 4)], None


def run_suite(seeds=(0, 1, 2, 3, 4), h=1e-5) -> list[CheckResult]:
    results = []
    for seed in seeds:
        for name, build, inputs, mask in cases(seed):
            results.append(check(name, build, inputs, seed, h, mask))
    return results
