"""Analytic parameter, MAC and intermediate-state counts, plus a proxy latency.

Counts are in elements. The per-layer state rules below mirror what each
tape op registers, so the analytic totals can be checked against a live
forward pass:

==================  ===========================  =====================================
layer               forward states               retained for backward
==================  ===========================  =====================================
conv / pointwise    output                       none (reads its input)
quadratic conv      f_a, f_b, f_a*f_b, f_c       f_a, f_b
layer norm          output                       normalised input + 1/std per position
GELU, residual add  output                       none
window attention    Q, K, V, M^2 weighted terms  Q, K, V, attention probabilities
avg pool, linear    output                       none
==================  ===========================  =====================================

MACs count multiply-accumulates of linear maps only (convs, projections,
attention products). A low-rank quadratic unit with n inputs costs 4n MACs.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .blocks import BlockSpec
from .network import STEM_PATCH, NetworkSpec

DEFAULT_COEFFICIENTS = {"alpha": 1.0, "beta": 2.0, "gamma": 1.0e4}


@dataclass
class LayerCost:
    name: str
    params: int = 0
    macs: int = 0
    fwd_states: int = 0
    bwd_retained_states: int = 0
    serial_depth: int = 0

    def __iadd__(self, other: "LayerCost"):
        self.params += other.params
        self.macs += other.macs
        self.fwd_states += other.fwd_states
        self.bwd_retained_states += other.bwd_retained_states
        self.serial_depth += other.serial_depth
        return self


@dataclass
class CostReport:
    params: int
    macs: int
    fwd_states: int
    bwd_retained_states: int
    serial_depth: int
    proxy_latency: float
    coefficients: dict
    input_shape: tuple
    layers: list = field(default_factory=list)

    def to_dict(self, include_layers=True) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        if not include_layers:
            d.pop("layers")
        return d

    def to_json(self, include_layers=True) -> str:
        return json.dumps(self.to_dict(include_layers), indent=2)

    def scaled(self, bytes_per_element: int) -> dict:
        """Counts with states converted to bytes (display only)."""
        d = self.to_dict(include_layers=False)
        d["fwd_states_bytes"] = self.fwd_states * bytes_per_element
        d["bwd_retained_states_bytes"] = self.bwd_retained_states * bytes_per_element
        return d

    def to_table(self, bytes_per_element: int = 1) -> str:
        unit = "bytes" if bytes_per_element != 1 else "elems"
        header = f"{'layer':<28}{'params':>14}{'MACs':>16}{'fwd ' + unit:>16}{'bwd ' + unit:>16}{'serial':>8}"
        lines = [header, "-" * len(header)]
        rows = self.layers + [LayerCost("TOTAL", self.params, self.macs, self.fwd_states,
                                        self.bwd_retained_states, self.serial_depth)]
        for layer in rows:
            lines.append(f"{layer.name:<28}{layer.params:>14d}{layer.macs:>16d}"
                         f"{layer.fwd_states * bytes_per_element:>16d}"
                         f"{layer.bwd_retained_states * bytes_per_element:>16d}{layer.serial_depth:>8d}")
        c = self.coefficients
        lines.append(f"proxy_latency = {c['alpha']}*MACs + {c['beta']}*fwd_states + {c['gamma']}*serial_depth"
                     f" = {self.proxy_latency:.6g}")
        return "\n".join(lines)


def proxy_latency(macs, fwd_states, serial_depth, coefficients=None) -> float:
    c = {**DEFAULT_COEFFICIENTS, **(coefficients or {})}
    return c["alpha"] * macs + c["beta"] * fwd_states + c["gamma"] * serial_depth


# ---------------------------------------------------------------------------
# closed-form state counts

def states_self_attention(H, W, C, window=None, exact=False) -> int:
    """Intermediate states of one self-attention layer over an H x W x C map.

    Global: 3HWC for Q, K, V plus (HW)^2 attention weights plus (HW)^2 C
    weighted values. Windowed (M x M): the summary factor (M^2 + 3) HWC, or
    with ``exact=True`` the same expression with the weight term kept,
    3HWC + HW M^2 + HW M^2 C.
    """
    if min(H, W, C) < 1:
        raise ValueError("dimensions must be >= 1")
    E = H * W * C
    if window is None:
        return 3 * E + (H * W) ** 2 + (H * W) ** 2 * C
    M = window
    if H % M or W % M:
        raise ValueError(f"window {M} does not divide {H}x{W}")
    if exact:
        return 3 * E + H * W * M * M + H * W * M * M * C
    return (M * M + 3) * E


def states_quadratic(H, W, C, phase="forward") -> int:
    if min(H, W, C) < 1:
        raise ValueError("dimensions must be >= 1")
    if phase == "forward":
        return 4 * H * W * C
    if phase == "backward":
        return 2 * H * W * C
    raise ValueError(f"phase must be 'forward' or 'backward', got {phase!r}")


def states_depthwise(H, W, C) -> int:
    return H * W * C


def spatial_mixer_states(kind, H, W, C, window=7) -> int:
    """Forward states of the spatial mixing operator alone (no norm, no projection)."""
    if kind == "skip" or kind == "identity":
        return 0
    if kind in ("conv", "gnconv"):
        return states_depthwise(H, W, C)
    if kind == "quadra":
        return states_quadratic(H, W, C)
    if kind == "attn":
        return states_self_attention(H, W, C, window)
    raise ValueError(f"unknown block kind {kind!r}")


# ---------------------------------------------------------------------------
# per-layer rules

def _conv(name, N, c_in, c_out, Ho, Wo, k, groups=1, bias=True) -> LayerCost:
    out = N * c_out * Ho * Wo
    params = c_out * (c_in // groups) * k * k + (c_out if bias else 0)
    return LayerCost(name, params, out * (c_in // groups) * k * k, out, 0)


def _quadconv(name, N, c_in, c_out, H, W, k, groups, bias=True) -> LayerCost:
    out = N * c_out * H * W
    n = (c_in // groups) * k * k
    params = 3 * c_out * n + (c_out if bias else 0)
    return LayerCost(name, params, out * 4 * n, 4 * out, 2 * out)


def _layer_norm(name, N, C, spatial) -> LayerCost:
    E = N * C * spatial
    return LayerCost(name, 2 * C, 0, E, E + N * spatial)


def _elementwise(name, E) -> LayerCost:
    return LayerCost(name, 0, 0, E, 0)


def block_layers(spec: BlockSpec, N, C, H, W, prefix="block") -> list[LayerCost]:
    """Layer costs of one block applied to an (N, C, H, W) map."""
    kind = spec.kind
    E = N * C * H * W
    k, R, M = spec.kernel, spec.expansion, spec.window
    layers: list[LayerCost] = []
    if kind == "identity":
        return layers
    if kind != "skip":
        layers.append(_layer_norm(f"{prefix}.ln1", N, C, H * W))
        if kind == "quadra":
            layers.append(_quadconv(f"{prefix}.qconv{k}", N, C, C, H, W, k, C))
        elif kind in ("conv", "gnconv"):
            layers.append(_conv(f"{prefix}.dwconv{k}", N, C, C, H, W, k, C))
        elif kind == "attn":
            if H % M or W % M:
                raise ValueError(f"window {M} does not divide {H}x{W}")
            tokens = N * H * W
            macs = 3 * tokens * C * C + 2 * tokens * M * M * C
            layers.append(LayerCost(f"{prefix}.attn{M}", 3 * C * C, macs,
                                    states_self_attention(H, W, C, M) * N,
                                    3 * E + tokens * M * M))
            layers.append(_conv(f"{prefix}.attn_proj", N, C, C, H, W, 1))
        layers.append(_elementwise(f"{prefix}.add1", E))
    layers.append(_layer_norm(f"{prefix}.ln2", N, C, H * W))
    if spec.quad_pw >= 1:
        layers.append(_quadconv(f"{prefix}.pw1", N, C, R * C, H, W, 1, 1))
    else:
        layers.append(_conv(f"{prefix}.pw1", N, C, R * C, H, W, 1))
    layers.append(_elementwise(f"{prefix}.gelu", R * E))
    if spec.quad_pw >= 2:
        layers.append(_quadconv(f"{prefix}.pw2", N, R * C, C, H, W, 1, 1))
    else:
        layers.append(_conv(f"{prefix}.pw2", N, R * C, C, H, W, 1))
    layers.append(_elementwise(f"{prefix}.add2", E))
    # one mandatorily sequential group per block; a recursive order-r block needs r
    layers[-1].serial_depth = spec.order if kind == "gnconv" else 1
    return layers


def network_layers(spec: NetworkSpec, batch: int = 1) -> list[LayerCost]:
    N = batch
    chans = spec.stage_channels
    size = spec.input_size // STEM_PATCH
    stem = _conv("stem", N, spec.in_channels, chans[0], size, size, STEM_PATCH)
    stem.serial_depth = 1
    layers = [stem]
    for i, stage in enumerate(spec.stage_blocks()):
        for j, bspec in enumerate(stage):
            layers += block_layers(bspec, N, chans[i], size, size, prefix=f"s{i + 1}.{j + 1}")
        if i < 3:
            layers.append(_layer_norm(f"down{i + 1}.ln", N, chans[i], size * size))
            size //= 2
            down = _conv(f"down{i + 1}.conv", N, chans[i], chans[i + 1], size, size, 2)
            down.serial_depth = 1
            layers.append(down)
    C = chans[3]
    layers.append(_elementwise("head.pool", N * C))
    layers.append(_layer_norm("head.ln", N, C, 1))
    head = LayerCost("head.linear", C * spec.num_classes + spec.num_classes, N * C * spec.num_classes,
                     N * spec.num_classes, 0, 1)
    layers.append(head)
    return layers


def report(spec: NetworkSpec | BlockSpec, input_shape=None, coefficients=None) -> CostReport:
    """Aggregate cost of a network (input_shape = (N, C, H, W) or None for batch 1 at
    the network's configured input size) or of a single block (input_shape required)."""
    coeffs = {**DEFAULT_COEFFICIENTS, **(coefficients or {})}
    if isinstance(spec, BlockSpec):
        if input_shape is None:
            raise ValueError("a block report needs input_shape (N, C, H, W)")
        N, C, H, W = input_shape
        layers = block_layers(spec, N, C, H, W)
    else:
        if input_shape is None:
            input_shape = (1, spec.in_channels, spec.input_size, spec.input_size)
        N, c_in, H, W = input_shape
        if H != W or c_in != spec.in_channels:
            raise ValueError(f"input shape {input_shape} does not fit spec")
        if H != spec.input_size:
            spec = NetworkSpec(spec.base_channels, spec.depths, spec.block, spec.slots,
                               spec.num_classes, H, spec.in_channels)
        layers = network_layers(spec, N)
    total = LayerCost("total")
    for layer in layers:
        total += layer
    return CostReport(total.params, total.macs, total.fwd_states, total.bwd_retained_states,
                      total.serial_depth,
                      proxy_latency(total.macs, total.fwd_states, total.serial_depth, coeffs),
                      coeffs, tuple(input_shape), layers)


def compare_blocks(H, W, C, window=7, kernel=7, expansion=4, batch=1) -> dict[str, CostReport]:
    """Reports for the four block kinds at one shape, in increasing-state order."""
    return {kind: report(BlockSpec(kind, kernel, expansion, window), (batch, C, H, W))
            for kind in ("skip", "conv", "quadra", "attn")}


def neuron_counts(kind, n) -> tuple[int, int]:
    """(params, MACs) of one neuron, derived from the layer rules with k = 1.

    A dense quadratic layer with one output and n inputs is a single
    low-rank quadratic neuron.
    """
    if kind in ("low", "low_rank"):
        layer = _quadconv("neuron", 1, n, 1, 1, 1, 1, 1)
        return layer.params, layer.macs
    if kind in ("full", "full_rank"):
        # W_q (n x n): n^2 MACs for W_q x, n for x^T (W_q x); linear term n
        return n * n + n + 1, n * n + n + n
    raise ValueError(f"unknown neuron kind {kind!r}")

