"""QuadraNet assembly: STEM, four pyramid stages, classifier head."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .blocks import LN_EPS, Block, BlockSpec
from .config import ConfigError, check_keys, get_int
from .tensor import ShapeError

PRESET_WIDTHS = {"xxs": 16, "xs": 32, "t": 64, "s": 96, "b": 128}
PRESET_DEPTHS = {"36": (3, 3, 27, 3), "25": (2, 3, 18, 2)}
STEM_PATCH = 4


@dataclass
class NetworkSpec:
    """Declarative network description.

    ``block`` is the template used for every slot unless ``slots`` gives an
    explicit per-stage list of block specs (as produced by architecture
    search); in that case ``depths`` is derived from it.
    """

    base_channels: int = 64
    depths: tuple = (3, 3, 27, 3)
    block: BlockSpec = field(default_factory=BlockSpec)
    slots: list | None = None
    num_classes: int = 1000
    input_size: int = 224
    in_channels: int = 3

    def __post_init__(self):
        if self.slots is not None:
            if len(self.slots) != 4:
                raise ValueError(f"slots must list exactly four stages, got {len(self.slots)}")
            self.slots = [list(stage) for stage in self.slots]
            self.depths = tuple(len(stage) for stage in self.slots)
        self.depths = tuple(int(d) for d in self.depths)
        if len(self.depths) != 4:
            raise ValueError(f"exactly four stage depths required, got {self.depths}")
        if any(d < 0 for d in self.depths):
            raise ValueError(f"stage depths must be >= 0, got {self.depths}")
        if self.base_channels < 1 or self.num_classes < 1 or self.in_channels < 1:
            raise ValueError("base_channels, num_classes and in_channels must be >= 1")

    @property
    def stage_channels(self) -> list[int]:
        return [self.base_channels * 2 ** i for i in range(4)]

    @property
    def stage_sizes(self) -> list[int]:
        return [self.input_size // (STEM_PATCH * 2 ** i) for i in range(4)]

    def stage_blocks(self) -> list[list[BlockSpec]]:
        if self.slots is not None:
            return [list(stage) for stage in self.slots]
        return [[self.block] * d for d in self.depths]

    def to_dict(self) -> dict:
        d = {
            "base_channels": self.base_channels,
            "depths": list(self.depths),
            "block": self.block.to_dict(),
            "num_classes": self.num_classes,
            "input_size": self.input_size,
            "in_channels": self.in_channels,
        }
        if self.slots is not None:
            d["slots"] = [[b.to_dict() for b in stage] for stage in self.slots]
        return d

    @classmethod
    def from_dict(cls, d: dict, path: str = "network") -> "NetworkSpec":
        check_keys(d, {"base_channels", "depths", "block", "slots", "num_classes", "input_size",
                       "in_channels", "preset"}, path)
        base = preset(d["preset"]) if "preset" in d else cls()
        kwargs = {}
        for key in ("base_channels", "num_classes", "input_size", "in_channels"):
            if key in d:
                kwargs[key] = get_int(d, key, path, minimum=1)
        if "depths" in d:
            depths = d["depths"]
            if not isinstance(depths, list) or len(depths) != 4:
                raise ConfigError(f"{path}.depths", "expected a list of four integers")
            for i, v in enumerate(depths):
                if isinstance(v, bool) or not isinstance(v, int) or v < 0:
                    raise ConfigError(f"{path}.depths[{i}]", f"expected an integer >= 0, got {v!r}")
            kwargs["depths"] = tuple(depths)
        if "block" in d:
            kwargs["block"] = block_spec_from_dict(d["block"], f"{path}.block")
        if "slots" in d:
            slots = d["slots"]
            if not isinstance(slots, list) or len(slots) != 4:
                raise ConfigError(f"{path}.slots", "expected a list of four stage lists")
            parsed = []
            for i, stage in enumerate(slots):
                if not isinstance(stage, list):
                    raise ConfigError(f"{path}.slots[{i}]", "expected a list of block specs")
                parsed.append([block_spec_from_dict(b, f"{path}.slots[{i}][{j}]") for j, b in enumerate(stage)])
            kwargs["slots"] = parsed
        merged = {**base.to_dict(), **kwargs}
        merged["block"] = kwargs.get("block", base.block)
        merged["depths"] = tuple(merged["depths"])
        if "slots" in kwargs:
            merged["slots"] = kwargs["slots"]
        elif base.slots is not None:
            merged["slots"] = base.slots
        try:
            return cls(**merged)
        except ValueError as exc:
            raise ConfigError(path, str(exc)) from None


def block_spec_from_dict(d, path) -> BlockSpec:
    check_keys(d, {"kind", "kernel", "expansion", "window", "order", "quad_pw"}, path)
    try:
        return BlockSpec(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None


def preset(name: str, **overrides) -> NetworkSpec:
    """Named members of the model family: ``quadranet{36,25}-{xxs,xs,t,s,b}``.

    All presets use 7x7 quadratic depthwise convs and channel expansion 4.
    """
    try:
        family, size = name.lower().removeprefix("quadranet").split("-")
        depths, width = PRESET_DEPTHS[family], PRESET_WIDTHS[size]
    except (ValueError, KeyError):
        names = [f"quadranet{f}-{s}" for f in PRESET_DEPTHS for s in PRESET_WIDTHS]
        raise ValueError(f"unknown preset {name!r}; known: {', '.join(names)}") from None
    spec = NetworkSpec(base_channels=width, depths=depths, block=BlockSpec("quadra", 7, 4))
    for key, value in overrides.items():
        setattr(spec, key, value)
    spec.__post_init__()
    return spec


def preset_names() -> list[str]:
    return [f"quadranet{f}-{s}" for f in PRESET_DEPTHS for s in PRESET_WIDTHS]


class Network:
    """A built network: an ordered ``name -> ndarray`` parameter dict plus a forward rule."""

    def __init__(self, spec: NetworkSpec, seed: int = 0):
        if spec.input_size % 32:
            raise ShapeError(f"input size {spec.input_size} is not divisible by 32 "
                             "(4x STEM then three 2x downsamples)")
        self.spec = spec
        rng = np.random.default_rng(seed)
        chans = spec.stage_channels
        p: dict[str, np.ndarray] = {}
        fan = spec.in_channels * STEM_PATCH * STEM_PATCH
        p["stem.weight"] = rng.normal(0.0, 1.0 / math.sqrt(fan), (chans[0], spec.in_channels, STEM_PATCH, STEM_PATCH))
        p["stem.bias"] = np.zeros(chans[0])
        self.stages: list[list[Block]] = []
        for i, stage in enumerate(spec.stage_blocks()):
            blocks = []
            for j, bspec in enumerate(stage):
                block = Block(bspec, chans[i], rng)
                for name, arr in block.params.items():
                    p[f"stages.{i}.{j}.{name}"] = arr
                blocks.append(block)
            self.stages.append(blocks)
            if i < 3:
                p[f"down.{i}.ln.gamma"] = np.ones(chans[i])
                p[f"down.{i}.ln.beta"] = np.zeros(chans[i])
                p[f"down.{i}.weight"] = rng.normal(0.0, 1.0 / math.sqrt(4 * chans[i]), (chans[i + 1], chans[i], 2, 2))
                p[f"down.{i}.bias"] = np.zeros(chans[i + 1])
        p["head.ln.gamma"] = np.ones(chans[3])
        p["head.ln.beta"] = np.zeros(chans[3])
        p["head.weight"] = rng.normal(0.0, 1.0 / math.sqrt(chans[3]), (spec.num_classes, chans[3]))
        p["head.bias"] = np.zeros(spec.num_classes)
        self.params = p

    def num_params(self) -> int:
        return sum(a.size for a in self.params.values())

    def __call__(self, tape: ag.Tape, x: ag.Var) -> ag.Var:
        spec = self.spec
        expected = (spec.in_channels, spec.input_size, spec.input_size)
        if tuple(x.shape[1:]) != expected:
            raise ShapeError(f"network expects (N, {expected[0]}, {expected[1]}, {expected[2]}) input, got {x.shape}")
        P = lambda name: tape.param(self.params[name])
        h = ag.conv2d(x, P("stem.weight"), P("stem.bias"), stride=STEM_PATCH)
        for i, blocks in enumerate(self.stages):
            for block in blocks:
                h = block(tape, h)
            if i < 3:
                h = ag.layer_norm(h, P(f"down.{i}.ln.gamma"), P(f"down.{i}.ln.beta"), LN_EPS)
                h = ag.conv2d(h, P(f"down.{i}.weight"), P(f"down.{i}.bias"), stride=2)
        h = ag.global_avg_pool(h)
        h = ag.layer_norm(h, P("head.ln.gamma"), P("head.ln.beta"), LN_EPS)
        return ag.linear(h, P("head.weight"), P("head.bias"))

    def forward(self, batch) -> np.ndarray:
        tape = ag.Tape()
        return self(tape, tape.leaf(np.asarray(batch, dtype=np.float64))).value

    def predict(self, batch, batch_size=256) -> np.ndarray:
        batch = np.asarray(batch, dtype=np.float64)
        out = [self.forward(batch[i:i + batch_size]).argmax(axis=1) for i in range(0, len(batch), batch_size)]
        return np.concatenate(out)

    def zero_trunk(self):
        """Zero every weight except the head's (the logits become the head bias)."""
        for name, arr in self.params.items():
            if not name.startswith("head.") and not name.endswith(("ln.gamma", "ln1.gamma", "ln2.gamma")):
                arr[...] = 0.0


def build(spec: NetworkSpec, seed: int = 0) -> Network:
    return Network(spec, seed)


# ---------------------------------------------------------------------------
# weight snapshots
#
# Layout (all integers little-endian):
#   b"QNET" | u32 version | u32 header length L | L bytes of UTF-8 JSON | f64 payload
# The JSON header holds {"spec", "params": [[name, shape], ...], "seed", "meta"};
# the payload is every parameter in header order, row-major, little-endian f64.

SNAPSHOT_MAGIC = b"QNET"
SNAPSHOT_VERSION = 1


class SnapshotError(ValueError):
    """Malformed or incompatible weight snapshot."""


def snapshot_bytes(net: Network, seed: int | None = None, meta: dict | None = None) -> bytes:
    header = {
        "spec": net.spec.to_dict(),
        "params": [[name, list(arr.shape)] for name, arr in net.params.items()],
        "seed": seed,
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for arr in net.params.values())
    return SNAPSHOT_MAGIC + struct.pack("<II", SNAPSHOT_VERSION, len(head)) + head + payload


def load_snapshot_bytes(buf: bytes) -> tuple[Network, dict]:
    """Rebuild a network from :func:`snapshot_bytes` output; returns ``(net, header)``."""
    if buf[:4] != SNAPSHOT_MAGIC:
        raise SnapshotError(f"bad magic {buf[:4]!r} at offset 0, expected {SNAPSHOT_MAGIC!r}")
    if len(buf) < 12:
        raise SnapshotError(f"truncated header at offset {len(buf)}")
    version, length = struct.unpack_from("<II", buf, 4)
    if version != SNAPSHOT_VERSION:
        raise SnapshotError(f"unsupported snapshot version {version}")
    if len(buf) < 12 + length:
        raise SnapshotError(f"JSON header truncated at offset {len(buf)}, expected {12 + length} bytes")
    try:
        header = json.loads(buf[12:12 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SnapshotError(f"unreadable JSON header: {exc}") from None
    net = Network(NetworkSpec.from_dict(header["spec"], "snapshot.spec"))
    offset = 12 + length
    expected = [(name, tuple(shape)) for name, shape in header["params"]]
    actual = [(name, arr.shape) for name, arr in net.params.items()]
    if expected != actual:
        raise SnapshotError("parameter list in snapshot does not match the rebuilt network")
    need = offset + 8 * sum(math.prod(shape) for _, shape in expected)
    if len(buf) != need:
        raise SnapshotError(f"payload is {len(buf) - offset} bytes, expected {need - offset}")
    for name, arr in net.params.items():
        count = arr.size
        arr[...] = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(arr.shape)
        offset += 8 * count
    return net, header


def save_snapshot(net: Network, path, seed: int | None = None, meta: dict | None = None):
    Path(path).write_bytes(snapshot_bytes(net, seed, meta))


def load_snapshot(path) -> tuple[Network, dict]:
    return load_snapshot_bytes(Path(path).read_bytes())
