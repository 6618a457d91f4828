"""Single quadratic neurons: full-rank and low-rank forms, cost counts, XOR demo.

A full-rank quadratic neuron computes ``x^T Wq x + Wc.x + b``. The low-rank
form replaces ``Wq`` by the outer product ``outer(Wa, Wb)`` and computes
``(Wa.x)(Wb.x) + Wc.x + b`` in linear time.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag


@dataclass
class FullRankNeuron:
    W_q: np.ndarray
    W_c: np.ndarray
    b: float = 0.0

    def __post_init__(self):
        self.W_q = np.asarray(self.W_q, dtype=np.float64)
        self.W_c = np.asarray(self.W_c, dtype=np.float64)
        n = self.W_c.shape[0]
        if self.W_q.shape != (n, n):
            raise ValueError(f"W_q must be {n}x{n} to match W_c, got {self.W_q.shape}")

    @property
    def n(self) -> int:
        return self.W_c.shape[0]


@dataclass
class LowRankNeuron:
    W_a: np.ndarray
    W_b: np.ndarray
    W_c: np.ndarray
    b: float = 0.0

    def __post_init__(self):
        self.W_a = np.asarray(self.W_a, dtype=np.float64)
        self.W_b = np.asarray(self.W_b, dtype=np.float64)
        self.W_c = np.asarray(self.W_c, dtype=np.float64)
        if not (self.W_a.shape == self.W_b.shape == self.W_c.shape) or self.W_a.ndim != 1:
            raise ValueError(f"W_a, W_b, W_c must be vectors of equal length, got "
                             f"{self.W_a.shape}, {self.W_b.shape}, {self.W_c.shape}")

    @property
    def n(self) -> int:
        return self.W_a.shape[0]

    def to_full(self) -> FullRankNeuron:
        return FullRankNeuron(np.outer(self.W_a, self.W_b), self.W_c.copy(), self.b)

    @classmethod
    def init(cls, n: int, rng: np.random.Generator, quad_scale=0.1) -> "LowRankNeuron":
        """Near-linear start: small quadratic factors, fan-in scaled linear weights."""
        bound = 1.0 / np.sqrt(n)
        return cls(rng.uniform(-quad_scale, quad_scale, n), rng.uniform(-quad_scale, quad_scale, n),
                   rng.uniform(-bound, bound, n), 0.0)


def _check_len(x, n):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != n:
        raise ValueError(f"input length {x.shape[-1]} does not match neuron size {n}")
    return x


def forward_full(neuron: FullRankNeuron, x):
    """Works on one vector or a batch of row vectors."""
    x = _check_len(x, neuron.n)
    quad = np.einsum("...i,ij,...j->...", x, neuron.W_q, x)
    return quad + x @ neuron.W_c + neuron.b


def forward_lowrank(neuron: LowRankNeuron, x):
    x = _check_len(x, neuron.n)
    return (x @ neuron.W_a) * (x @ neuron.W_b) + x @ neuron.W_c + neuron.b


def complexity(kind: str, n: int) -> tuple[int, int]:
    """(parameter count, MAC count) of one neuron with ``n`` inputs.

    The parameter count includes the bias; MACs exclude it.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if kind in ("full", "full_rank"):
        return n * n + n + 1, n * n + 2 * n
    if kind in ("low", "low_rank"):
        return 3 * n + 1, 4 * n
    if kind == "linear":
        return n + 1, n
    raise ValueError(f"unknown neuron kind {kind!r}")


def neuron_graph(tape: ag.Tape, W_a, W_b, W_c, bias, x) -> ag.Var:
    """Low-rank neuron over a batch (N, n) recorded on ``tape``; weights are parameter arrays."""
    xv = tape.leaf(np.asarray(x, dtype=np.float64))
    quad = ag.matmul(xv, tape.param(W_a)) * ag.matmul(xv, tape.param(W_b))
    return quad + ag.matmul(xv, tape.param(W_c)) + tape.param(bias)


def train_xor(kind: str, points, labels, steps=2000, lr=0.05, seed=0):
    """Fit one neuron to +-1 labels by full-batch gradient descent on mean squared error.

    ``kind`` is ``"quadratic"`` (low-rank quadratic neuron) or ``"linear"``
    (the same neuron with W_a = W_b = 0 frozen). Returns the trained
    :class:`LowRankNeuron` and its sign-readout accuracy on ``points``.
    """
    if kind not in ("quadratic", "linear"):
        raise ValueError(f"kind must be 'quadratic' or 'linear', got {kind!r}")
    x = np.asarray(points, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("labels must be -1 or +1")
    rng = np.random.default_rng(seed)
    neuron = LowRankNeuron.init(x.shape[1], rng)
    if kind == "linear":
        neuron.W_a[:] = 0.0
        neuron.W_b[:] = 0.0
    bias = np.zeros(1)
    trainable = [neuron.W_c, bias] + ([neuron.W_a, neuron.W_b] if kind == "quadratic" else [])
    for _ in range(steps):
        tape = ag.Tape()
        loss = ag.mse(neuron_graph(tape, neuron.W_a, neuron.W_b, neuron.W_c, bias, x), y)
        ag.backward(tape, loss)
        grads = [tape.grad_of(p) for p in trainable]
        for p, g in zip(trainable, grads):
            p -= lr * g
    neuron.b = float(bias[0])
    pred = forward_lowrank(neuron, x)
    accuracy = float(np.mean(np.where(pred >= 0, 1.0, -1.0) == y))
    return neuron, accuracy
