"""Residual blocks: QuadraBlock and its comparison baselines.

All blocks share the channel mixer ``LN -> 1x1 (C -> R*C) -> GELU -> 1x1
(R*C -> C)`` wrapped in a residual. They differ in the spatial mixer placed
before it, also residual and preceded by a layer norm:

========  ==============================================
quadra    depthwise quadratic conv (k x k)
conv      plain depthwise conv (k x k)
attn      windowed softmax attention (M x M windows)
skip      no spatial mixer at all
identity  the whole block is the identity (NAS only)
========  ==============================================

``gnconv`` (order-r recursive gated conv) exists only as a cost-model entry.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .quadconv import quadratic_conv
from .tensor import ShapeError, softmax_lastdim

BLOCK_KINDS = ("quadra", "conv", "attn", "skip", "identity", "gnconv")
LN_EPS = 1e-6


@dataclass(frozen=True)
class BlockSpec:
    kind: str = "quadra"
    kernel: int = 7
    expansion: int = 4
    window: int = 7
    order: int = 3
    quad_pw: int = 0  # how many of the two channel-mixer 1x1 convs are quadratic

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ValueError(f"unknown block kind {self.kind!r}; expected one of {BLOCK_KINDS}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be a positive odd integer, got {self.kernel}")
        if self.expansion < 1:
            raise ValueError(f"expansion must be >= 1, got {self.expansion}")
        if self.window < 1 or self.order < 1 or self.quad_pw not in (0, 1, 2):
            raise ValueError(f"bad block spec {self}")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def tag(self) -> str:
        """Short genome-style name, e.g. ``Q7x4`` or ``ID``."""
        if self.kind == "identity":
            return "ID"
        letter = {"quadra": "Q", "conv": "C", "attn": "A", "skip": "S", "gnconv": "G"}[self.kind]
        if self.kind == "attn":
            return f"A{self.window}x{self.expansion}"
        if self.kind == "skip":
            return f"Sx{self.expansion}"
        return f"{letter}{self.kernel}x{self.expansion}"


def _linear_init(rng, fan_in, shape):
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), shape)


class Block:
    """Parameters and forward rule of one residual block over C channels.

    ``params`` is an ordered ``name -> ndarray`` dict; the arrays are updated
    in place by the optimizer.
    """

    def __init__(self, spec: BlockSpec, channels: int, rng: np.random.Generator | None = None):
        if spec.kind == "gnconv":
            raise ValueError("gnconv blocks exist only in the cost model")
        rng = np.random.default_rng(0) if rng is None else rng
        self.spec = spec
        self.channels = C = channels
        k, R = spec.kernel, spec.expansion
        p: dict[str, np.ndarray] = {}
        if spec.kind in ("quadra", "conv", "attn"):
            p["ln1.gamma"] = np.ones(C)
            p["ln1.beta"] = np.zeros(C)
        if spec.kind == "quadra":
            p["mixer.W_a"] = rng.normal(0.0, 0.5 / k, (C, 1, k, k))
            p["mixer.W_b"] = rng.normal(0.0, 0.5 / k, (C, 1, k, k))
            p["mixer.W_c"] = rng.normal(0.0, 1.0 / k, (C, 1, k, k))
            p["mixer.bias"] = np.zeros(C)
        elif spec.kind == "conv":
            p["mixer.weight"] = rng.normal(0.0, 1.0 / k, (C, 1, k, k))
            p["mixer.bias"] = np.zeros(C)
        elif spec.kind == "attn":
            for name in ("W_Q", "W_K", "W_V", "W_O"):
                p[f"attn.{name}"] = _linear_init(rng, C, (C, C))
            p["attn.b_O"] = np.zeros(C)
        if spec.kind != "identity":
            p["ln2.gamma"] = np.ones(C)
            p["ln2.beta"] = np.zeros(C)
            for name, c_in, c_out, quad in (("pw1", C, R * C, spec.quad_pw >= 1),
                                             ("pw2", R * C, C, spec.quad_pw >= 2)):
                if quad:
                    p[f"{name}.W_a"] = _linear_init(rng, c_in, (c_out, c_in, 1, 1)) * 0.5
                    p[f"{name}.W_b"] = _linear_init(rng, c_in, (c_out, c_in, 1, 1)) * 0.5
                    p[f"{name}.W_c"] = _linear_init(rng, c_in, (c_out, c_in, 1, 1))
                else:
                    p[f"{name}.weight"] = _linear_init(rng, c_in, (c_out, c_in, 1, 1))
                p[f"{name}.bias"] = np.zeros(c_out)
        self.params = p

    def num_params(self) -> int:
        return sum(a.size for a in self.params.values())

    def zero_mixers(self):
        """Zero every weight whose output feeds a residual branch (identity map results)."""
        for name, arr in self.params.items():
            if not name.startswith(("ln1.", "ln2.")):
                arr[...] = 0.0

    def spatial_mixer(self, tape: ag.Tape, x: ag.Var) -> ag.Var:
        P = lambda name: tape.param(self.params[name])
        kind = self.spec.kind
        h = ag.layer_norm(x, P("ln1.gamma"), P("ln1.beta"), LN_EPS)
        if kind == "quadra":
            k = self.spec.kernel
            return quadratic_conv(h, P("mixer.W_a"), P("mixer.W_b"), P("mixer.W_c"), P("mixer.bias"),
                                  groups=self.channels, padding=k // 2)
        if kind == "conv":
            k = self.spec.kernel
            return ag.conv2d(h, P("mixer.weight"), P("mixer.bias"), padding=k // 2, groups=self.channels)
        if kind == "attn":
            attn = WindowAttentionParams.from_block(self)
            return window_attention(tape, h, attn)
        raise AssertionError(kind)

    def channel_mixer(self, tape: ag.Tape, x: ag.Var) -> ag.Var:
        P = lambda name: tape.param(self.params[name])
        h = ag.layer_norm(x, P("ln2.gamma"), P("ln2.beta"), LN_EPS)
        for i, name in enumerate(("pw1", "pw2")):
            if f"{name}.W_a" in self.params:
                h = quadratic_conv(h, P(f"{name}.W_a"), P(f"{name}.W_b"), P(f"{name}.W_c"), P(f"{name}.bias"))
            else:
                h = ag.conv2d(h, P(f"{name}.weight"), P(f"{name}.bias"))
            if i == 0:
                h = ag.gelu(h)
        return h

    def __call__(self, tape: ag.Tape, x: ag.Var) -> ag.Var:
        if x.shape[1] != self.channels:
            raise ShapeError(f"{self.spec.kind} block expects {self.channels} channels, got input {x.shape}")
        kind = self.spec.kind
        if kind == "identity":
            return x
        if kind != "skip":
            x = x + self.spatial_mixer(tape, x)
        return x + self.channel_mixer(tape, x)


def _run(block: Block, x) -> np.ndarray:
    tape = ag.Tape()
    return block(tape, tape.leaf(np.asarray(x, dtype=np.float64))).value


def block_forward(block: Block, x) -> np.ndarray:
    return _run(block, x)


def _kind_forward(kind):
    def fwd(block: Block, x) -> np.ndarray:
        if block.spec.kind != kind:
            raise ValueError(f"expected a {kind} block, got {block.spec.kind}")
        return _run(block, x)

    fwd.__name__ = f"{kind}block_forward"
    fwd.__doc__ = f"Forward pass of a ``{kind}`` block on a plain array."
    return fwd


quadrablock_forward = _kind_forward("quadra")
convblock_forward = _kind_forward("conv")
skipblock_forward = _kind_forward("skip")


# ---------------------------------------------------------------------------
# windowed attention baseline

@dataclass
class WindowAttentionParams:
    channels: int
    window: int
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray
    b_O: np.ndarray

    @classmethod
    def from_block(cls, block: Block) -> "WindowAttentionParams":
        p = block.params
        return cls(block.channels, block.spec.window, p["attn.W_Q"], p["attn.W_K"], p["attn.W_V"],
                   p["attn.W_O"], p["attn.b_O"])

    @classmethod
    def init(cls, channels, window, rng=None) -> "WindowAttentionParams":
        rng = np.random.default_rng(0) if rng is None else rng
        mats = [_linear_init(rng, channels, (channels, channels)) for _ in range(4)]
        return cls(channels, window, *mats, np.zeros(channels))


def _to_windows(x, M):
    N, C, H, W = x.shape
    t = x.reshape(N, C, H // M, M, W // M, M).transpose(0, 2, 4, 3, 5, 1)
    return t.reshape(N, H // M, W // M, M * M, C)


def _from_windows(t, shape, M):
    N, C, H, W = shape
    t = t.reshape(N, H // M, W // M, M, M, C).transpose(0, 5, 1, 3, 2, 4)
    return t.reshape(N, C, H, W)


def attention_core(x: ag.Var, W_Q: ag.Var, W_K: ag.Var, W_V: ag.Var, window: int) -> ag.Var:
    """softmax(Q K^T / sqrt(C)) V inside each non-overlapping M x M window.

    Forward states: Q, K, V (one map each) and the M^2 weighted value terms
    per output element, i.e. (M^2 + 3) * N*C*H*W elements.
    """
    xv = x.value
    N, C, H, W = xv.shape
    M = window
    if H % M or W % M:
        raise ShapeError(f"window {M} does not divide spatial size {H}x{W}")
    t = _to_windows(xv, M)
    q = t @ W_Q.value.T
    k = t @ W_K.value.T
    v = t @ W_V.value.T
    scale = 1.0 / math.sqrt(C)
    probs = softmax_lastdim((q @ np.swapaxes(k, -1, -2)) * scale)
    y = probs @ v
    E = xv.size
    states = [("q", E), ("k", E), ("v", E), ("attn*v", M * M * E)]

    def bw(g, ins, saved, needs):
        tt = _to_windows(ins[0], M)
        wq, wk, wv = ins[1], ins[2], ins[3]
        q_, k_, v_, pr = saved["q"], saved["k"], saved["v"], saved["probs"]
        gy = _to_windows(g, M)
        gpr = gy @ np.swapaxes(v_, -1, -2)
        gv = np.swapaxes(pr, -1, -2) @ gy
        glog = pr * (gpr - (gpr * pr).sum(axis=-1, keepdims=True)) * scale
        gq = glog @ k_
        gk = np.swapaxes(glog, -1, -2) @ q_
        flat = lambda a: a.reshape(-1, C)
        tf = flat(tt)
        gwq, gwk, gwv = flat(gq).T @ tf, flat(gk).T @ tf, flat(gv).T @ tf
        gx = None
        if needs[0]:
            gt = gq @ wq + gk @ wk + gv @ wv
            gx = _from_windows(gt, ins[0].shape, M)
        return gx, gwq, gwk, gwv

    return x.tape.record("window_attention", (x, W_Q, W_K, W_V), _from_windows(y, xv.shape, M), bw,
                         saved={"q": q, "k": k, "v": v, "probs": probs}, forward_states=states)


def window_attention(tape: ag.Tape, x: ag.Var, params: WindowAttentionParams) -> ag.Var:
    """Attention core followed by the 1x1 output projection."""
    if x.shape[1] != params.channels:
        raise ShapeError(f"attention expects {params.channels} channels, got {x.shape}")
    y = attention_core(x, tape.param(params.W_Q), tape.param(params.W_K), tape.param(params.W_V),
                       params.window)
    C = params.channels
    w_out = ag.reshape(tape.param(params.W_O), (C, C, 1, 1))
    return ag.conv2d(y, w_out, tape.param(params.b_O))


def window_attention_forward(params: WindowAttentionParams, x) -> np.ndarray:
    tape = ag.Tape()
    return window_attention(tape, tape.leaf(np.asarray(x, dtype=np.float64)), params).value


# ---------------------------------------------------------------------------

def rank_identity(R: int, n: int, seed=0, tol=1e-12) -> bool:
    """Check sum_r outer(a_r, b_r) == A^T B for random R x n stacks A, B, and rank <= R."""
    if R < 1 or n < 1:
        raise ValueError("R and n must be >= 1")
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((R, n))
    B = rng.standard_normal((R, n))
    summed = np.zeros((n, n))
    for r in range(R):
        summed += np.outer(A[r], B[r])
    stacked = A.T @ B
    return bool(np.max(np.abs(summed - stacked)) <= tol and matrix_rank(stacked) <= R)


def matrix_rank(m, tol=1e-9) -> int:
    """Number of singular values above ``tol`` times the largest one."""
    s = np.linalg.svd(m, compute_uv=False)
    return int(np.sum(s > tol * s[0])) if s.size and s[0] > 0 else 0
