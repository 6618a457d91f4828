"""AdamW/SGD, gradient clipping and the epoch loop."""
from __future__ import annotations

import io
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .config import ConfigError, check_keys, get_float, get_int, get_str
from .data import LabeledDataset

METRICS_HEADER = "epoch,loss,train_acc,val_acc"


@dataclass
class OptimConfig:
    kind: str = "adamw"
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    grad_clip_value: float = 5.0
    clip_mode: str = "value"
    epochs: int = 10
    batch_size: int = 32
    warmup_steps: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("adamw", "sgd"):
            raise ValueError(f"optimizer kind must be 'adamw' or 'sgd', got {self.kind!r}")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.grad_clip_value <= 0:
            raise ValueError("grad_clip_value must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.clip_mode not in ("value", "norm"):
            raise ValueError(f"clip_mode must be 'value' or 'norm', got {self.clip_mode!r}")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d, path="train") -> "OptimConfig":
        fields = {"kind", "lr", "betas", "eps", "weight_decay", "grad_clip_value", "clip_mode",
                  "epochs", "batch_size", "warmup_steps", "seed"}
        check_keys(d, fields, path)
        base = cls()
        kw = {}
        if "kind" in d:
            kw["kind"] = get_str(d, "kind", path, choices=("adamw", "sgd"))
        if "clip_mode" in d:
            kw["clip_mode"] = get_str(d, "clip_mode", path, choices=("value", "norm"))
        for key in ("lr", "eps", "weight_decay", "grad_clip_value"):
            if key in d:
                kw[key] = get_float(d, key, path, minimum=0.0)
        for key in ("epochs", "batch_size", "warmup_steps", "seed"):
            if key in d:
                kw[key] = get_int(d, key, path, minimum=0 if key != "batch_size" else 1)
        if "betas" in d:
            b = d["betas"]
            if not (isinstance(b, list) and len(b) == 2 and all(isinstance(v, (int, float)) for v in b)):
                raise ConfigError(f"{path}.betas", "expected a list of two numbers")
            kw["betas"] = tuple(float(v) for v in b)
        try:
            return cls(**{**asdict(base), **kw})
        except ValueError as exc:
            raise ConfigError(path, str(exc)) from None


def clip_gradients(grads: dict, clip_value: float, mode: str = "value") -> dict:
    """Elementwise clamp to [-clip, clip] (``mode="value"``) or global-norm rescale."""
    if clip_value <= 0:
        raise ValueError("clip_value must be > 0")
    if mode == "value":
        return {k: np.clip(g, -clip_value, clip_value) for k, g in grads.items()}
    if mode == "norm":
        total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        scale = min(1.0, clip_value / total) if total > 0 else 1.0
        return {k: g * scale for k, g in grads.items()}
    raise ValueError(f"unknown clip mode {mode!r}")


class AdamWState:
    def __init__(self, params: dict):
        self.step = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}


def adamw_step(params: dict, grads: dict, state: AdamWState, config: OptimConfig, lr=None):
    """One decoupled-weight-decay Adam update, in place on ``params``."""
    lr = config.lr if lr is None else lr
    b1, b2 = config.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: param {p.shape}, grad {g.shape}, "
                             f"state {state.m[name].shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + config.eps) + config.weight_decay * p
        p -= lr * update
    return params, state


def sgd_step(params: dict, grads: dict, config: OptimConfig, lr=None):
    lr = config.lr if lr is None else lr
    for name, p in params.items():
        p -= lr * (grads[name] + config.weight_decay * p)
    return params


def accuracy(net, ds: LabeledDataset) -> float:
    return float(np.mean(net.predict(ds.inputs) == ds.labels))


def train_step(net, x, y, config: OptimConfig, state, lr):
    """One optimizer step; returns (loss, clipped grads, number of correct predictions)."""
    tape = ag.Tape()
    logits = net(tape, tape.leaf(x))
    loss = ag.cross_entropy(logits, y)
    ag.backward(tape, loss)
    grads = {name: tape.grad_of(p) for name, p in net.params.items()}
    grads = clip_gradients(grads, config.grad_clip_value, config.clip_mode)
    if config.kind == "adamw":
        adamw_step(net.params, grads, state, config, lr)
    else:
        sgd_step(net.params, grads, config, lr)
    correct = int(np.sum(logits.value.argmax(axis=1) == y))
    return float(loss.value), grads, correct


def fit(net, train: LabeledDataset, val: LabeledDataset | None, config: OptimConfig) -> list[dict]:
    """Train ``net`` in place; return one metrics row per epoch.

    Batches are drawn from a permutation seeded by ``config.seed`` and the
    epoch index, so identical configs give identical histories. ``loss``
    is the mean training loss over the epoch's batches and ``train_acc``
    the fraction of training samples classified correctly by the forward
    pass that produced each batch's update (no extra evaluation pass).
    ``val_acc`` is measured with the weights at the end of the epoch.
    """
    state = AdamWState(net.params) if config.kind == "adamw" else None
    history = []
    n = len(train)
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        losses = []
        correct = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            lr = config.lr
            if config.warmup_steps and step < config.warmup_steps:
                lr = config.lr * (step + 1) / config.warmup_steps
            loss, _, hits = train_step(net, train.inputs[idx], train.labels[idx], config, state, lr)
            losses.append(loss)
            correct += hits
            step += 1
        history.append({
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "train_acc": correct / n,
            "val_acc": accuracy(net, val) if val is not None else float("nan"),
        })
    return history


def metrics_csv(history: list[dict], seed: int | None = None) -> str:
    """CSV text (LF line endings). A ``# seed=`` comment line precedes the header when given."""
    buf = io.StringIO()
    if seed is not None:
        buf.write(f"# seed={seed}\n")
    buf.write(METRICS_HEADER + "\n")
    for row in history:
        buf.write(f"{row['epoch']},{row['loss']!r},{row['train_acc']!r},{row['val_acc']!r}\n")
    return buf.getvalue()


def read_metrics_csv(text: str) -> list[dict]:
    rows = []
    lines = [line for line in text.splitlines() if line and not line.startswith("#")]
    if not lines or lines[0] != METRICS_HEADER:
        raise ValueError("not a metrics CSV")
    for line in lines[1:]:
        epoch, loss, tr, va = line.split(",")
        rows.append({"epoch": int(epoch), "loss": float(loss), "train_acc": float(tr), "val_acc": float(va)})
    return rows
