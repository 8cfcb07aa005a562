"""Static FLOPs and parameter accounting over a small module-graph description.

Counting rules:

* convolution: ``C_in * k^3 * D * H * W * C_out`` evaluated on the *output*
  grid, parameters ``C_in * k^3 * C_out`` (bias excluded unless asked for);
* transposed convolution: the same product evaluated on its input grid,
  which is the number of multiply-accumulates actually performed;
* matrix product ``(A x B) . (B x C)``: ``A * B * C``, summed over a batch;
* elementwise, softmax, pooling and reshapes cost nothing.

One multiply-accumulate counts as one FLOP (``count_mode="fma"``);
``count_mode="flop"`` counts it as two.

Graph files are JSON::

    {"nodes": [
        {"name": "x", "kind": "input", "shape": [128, 16, 16, 16]},
        {"name": "q", "kind": "conv3d", "inputs": ["x"],
         "attrs": {"c_out": 128, "kernel": 1}},
        ...
    ]}
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import prod
from typing import Sequence

from .conv import conv_output_extent, convT_output_extent

KINDS = ("input", "conv3d", "conv-transpose3d", "matmul", "elementwise", "softmax", "pool", "reshape")


class GraphError(ValueError):
    """Shape inference or costing failed for a node."""


@dataclass
class GraphNode:
    name: str
    kind: str
    inputs: list[str] = field(default_factory=list)
    attrs: dict = field(default_factory=dict)
    shape: tuple[int, ...] | None = None  # filled by shape inference (or given for inputs)


@dataclass
class NodeCost:
    name: str
    kind: str
    shape: tuple[int, ...]
    flops: int
    params: int


@dataclass
class CostReport:
    nodes: list[NodeCost]
    count_mode: str = "fma"

    @property
    def total_flops(self) -> int:
        return sum(n.flops for n in self.nodes)

    @property
    def total_params(self) -> int:
        return sum(n.params for n in self.nodes)

    def as_dict(self) -> dict:
        return {
            "count_mode": self.count_mode,
            "total_flops": self.total_flops,
            "total_params": self.total_params,
            "nodes": [
                {"name": n.name, "kind": n.kind, "shape": list(n.shape), "flops": n.flops, "params": n.params}
                for n in self.nodes
            ],
        }

    def format_table(self, title: str = "") -> str:
        lines = [title] if title else []
        lines.append(f"{'node':<16s} {'kind':<17s} {'output':<22s} {'FLOPs':>16s} {'params':>12s}")
        for n in self.nodes:
            lines.append(f"{n.name:<16s} {n.kind:<17s} {'x'.join(map(str, n.shape)):<22s} "
                         f"{n.flops:>16d} {n.params:>12d}")
        lines.append(f"{'total':<57s}{self.total_flops:>16d} {self.total_params:>12d}")
        lines.append(f"FLOPs {human(self.total_flops, 'G')}  params {human(self.total_params, 'M')}"
                     f"  (count mode: {self.count_mode})")
        return "\n".join(lines)


def human(n: int, unit: str) -> str:
    scale = {"G": 1e9, "M": 1e6, "K": 1e3}[unit]
    return f"{n / scale:.3g}{unit}"


def conv_cost(c_in: int, c_out: int, kernel, out_spatial: Sequence[int], bias: bool = False) -> tuple[int, int]:
    """(FLOPs, params) of a convolution, evaluated on its output grid."""
    k = _kernel_volume(kernel, len(out_spatial))
    params = c_in * k * c_out + (c_out if bias else 0)
    flops = c_in * k * prod(out_spatial) * c_out
    return flops, params


def matmul_cost(a: int, b: int, c: int, batch: int = 1) -> int:
    return batch * a * b * c


def _kernel_volume(kernel, ndim: int) -> int:
    if isinstance(kernel, int):
        return kernel ** ndim
    return prod(kernel)


def _infer(node: GraphNode, shapes: dict[str, tuple[int, ...]]) -> tuple[tuple[int, ...], int, int]:
    ins = []
    for i in node.inputs:
        if i not in shapes:
            raise GraphError(f"node {node.name!r}: unknown input {i!r}")
        ins.append(shapes[i])
    a = node.attrs
    kind = node.kind
    if kind == "input":
        if node.shape is None:
            raise GraphError(f"node {node.name!r}: input without a shape")
        return tuple(node.shape), 0, 0
    if kind in ("conv3d", "conv-transpose3d"):
        if len(ins) != 1 or "c_out" not in a:
            raise GraphError(f"node {node.name!r}: needs one input and attrs.c_out")
        c_in, *sp = ins[0]
        k = a.get("kernel", 3)
        s = a.get("stride", 1 if kind == "conv3d" else 2)
        if kind == "conv3d":
            p = a.get("padding", k // 2)
            out = tuple(conv_output_extent(n, k, s, p) for n in sp)
            if any(o < 1 for o in out):
                raise GraphError(f"node {node.name!r}: empty output for input {ins[0]}")
            flops, params = conv_cost(c_in, a["c_out"], k, out, a.get("bias", False))
        else:
            p = a.get("padding", 0)
            out = tuple(convT_output_extent(n, k, s, p) for n in sp)
            flops, params = conv_cost(c_in, a["c_out"], k, sp, a.get("bias", False))
        return (a["c_out"], *out), flops, params
    if kind == "matmul":
        if len(ins) != 2:
            raise GraphError(f"node {node.name!r}: matmul needs two inputs")
        x, y = list(ins[0]), list(ins[1])
        if a.get("transpose_a"):
            x[-1], x[-2] = x[-2], x[-1]
        if a.get("transpose_b"):
            y[-1], y[-2] = y[-2], y[-1]
        if len(x) < 2 or len(y) < 2 or x[-1] != y[-2] or x[:-2] != y[:-2]:
            raise GraphError(f"node {node.name!r}: cannot multiply {tuple(x)} by {tuple(y)}")
        batch = prod(x[:-2]) if len(x) > 2 else 1
        return (*x[:-2], x[-2], y[-1]), matmul_cost(x[-2], x[-1], y[-1], batch), 0
    if kind == "elementwise":
        if not ins or any(s != ins[0] for s in ins):
            raise GraphError(f"node {node.name!r}: elementwise inputs differ {ins}")
        return ins[0], 0, 0
    if kind == "softmax":
        if len(ins) != 1:
            raise GraphError(f"node {node.name!r}: softmax needs one input")
        return ins[0], 0, 0
    if kind == "pool":
        if len(ins) != 1:
            raise GraphError(f"node {node.name!r}: pool needs one input")
        c, *sp = ins[0]
        if a.get("global"):
            return (c,), 0, 0
        k = a.get("kernel", 2)
        s = a.get("stride", k)
        return (c, *(conv_output_extent(n, k, s, 0) for n in sp)), 0, 0
    if kind == "reshape":
        if len(ins) != 1 or "shape" not in a:
            raise GraphError(f"node {node.name!r}: reshape needs one input and attrs.shape")
        new = tuple(a["shape"])
        if prod(new) != prod(ins[0]):
            raise GraphError(f"node {node.name!r}: cannot reshape {ins[0]} to {new}")
        return new, 0, 0
    raise GraphError(f"node {node.name!r}: unknown kind {kind!r}")


def analyze(nodes: Sequence[GraphNode], count_mode: str = "fma") -> CostReport:
    """Shape-infer every node in order and tally its cost."""
    if count_mode not in ("fma", "flop"):
        raise ValueError(f"count mode must be 'fma' or 'flop', got {count_mode!r}")
    mult = 2 if count_mode == "flop" else 1
    shapes: dict[str, tuple[int, ...]] = {}
    costs = []
    for node in nodes:
        if node.name in shapes:
            raise GraphError(f"duplicate node name {node.name!r}")
        shape, flops, params = _infer(node, shapes)
        node.shape = shape
        shapes[node.name] = shape
        costs.append(NodeCost(node.name, node.kind, shape, flops * mult, params))
    return CostReport(costs, count_mode)


# -- graph files ---------------------------------------------------------------

def load_graph(path) -> list[GraphNode]:
    with open(path) as fh:
        doc = json.load(fh)
    return graph_from_dict(doc)


def graph_from_dict(doc: dict) -> list[GraphNode]:
    nodes = []
    for i, raw in enumerate(doc.get("nodes", [])):
        if "name" not in raw or "kind" not in raw:
            raise GraphError(f"node #{i}: 'name' and 'kind' are required")
        if raw["kind"] not in KINDS:
            raise GraphError(f"node {raw['name']!r}: unknown kind {raw['kind']!r}")
        shape = tuple(raw["shape"]) if "shape" in raw else None
        nodes.append(GraphNode(raw["name"], raw["kind"], list(raw.get("inputs", [])), dict(raw.get("attrs", {})), shape))
    return nodes


def graph_to_dict(nodes: Sequence[GraphNode]) -> dict:
    out = []
    for n in nodes:
        d = {"name": n.name, "kind": n.kind}
        if n.inputs:
            d["inputs"] = list(n.inputs)
        if n.attrs:
            d["attrs"] = dict(n.attrs)
        if n.kind == "input":
            d["shape"] = list(n.shape)
        out.append(d)
    return {"nodes": out}


# -- presets -------------------------------------------------------------------
# Shared assumptions: a 4 x 128^3 input, channel widths 16/32/64/128 per level,
# and the comparators inserted at the 128 x 16^3 bottleneck (rate 8).

LEVEL_CHANNELS = {1: 16, 2: 32, 4: 64, 8: 128}


def self_attention_graph(channels: int = 128, proj_channels: int = 128, extent: int = 16) -> list[GraphNode]:
    n = extent ** 3
    return [
        GraphNode("x", "input", shape=(channels, extent, extent, extent)),
        GraphNode("q", "conv3d", ["x"], {"c_out": proj_channels, "kernel": 1}),
        GraphNode("k", "conv3d", ["x"], {"c_out": proj_channels, "kernel": 1}),
        GraphNode("v", "conv3d", ["x"], {"c_out": channels, "kernel": 1}),
        GraphNode("q_flat", "reshape", ["q"], {"shape": [proj_channels, n]}),
        GraphNode("k_flat", "reshape", ["k"], {"shape": [proj_channels, n]}),
        GraphNode("v_flat", "reshape", ["v"], {"shape": [channels, n]}),
        GraphNode("scores", "matmul", ["q_flat", "k_flat"], {"transpose_a": True}),
        GraphNode("attn", "softmax", ["scores"]),
        GraphNode("update", "matmul", ["v_flat", "attn"], {"transpose_b": True}),
        GraphNode("update_vol", "reshape", ["update"], {"shape": [channels, extent, extent, extent]}),
        GraphNode("y", "elementwise", ["update_vol", "x"]),
    ]


def cp_block_graph(channels: int = 128, extent: int = 16) -> list[GraphNode]:
    n = extent ** 3
    return [
        GraphNode("x", "input", shape=(channels, extent, extent, extent)),
        GraphNode("prior", "conv3d", ["x"], {"c_out": n, "kernel": 1}),
        GraphNode("prior_flat", "reshape", ["prior"], {"shape": [n, n]}),
        GraphNode("x_flat", "reshape", ["x"], {"shape": [channels, n]}),
        GraphNode("update", "matmul", ["x_flat", "prior_flat"]),
        GraphNode("update_vol", "reshape", ["update"], {"shape": [channels, extent, extent, extent]}),
        GraphNode("y", "elementwise", ["update_vol", "x"]),
    ]


def sam_graph(rate: int = 8, in_extent: int = 128, in_channels: int = 4, hidden: int = 16,
              n_classes: int = 4, feature_channels: int | None = None) -> list[GraphNode]:
    """Attention conv path at ``rate`` plus prototype pooling and re-mapping."""
    steps = rate.bit_length() - 1
    if 2 ** steps != rate or steps < 1:
        raise GraphError(f"SAM rate must be a power of two >= 2, got {rate}")
    ext = in_extent // rate
    n = ext ** 3
    c_feat = feature_channels if feature_channels is not None else LEVEL_CHANNELS.get(rate, 16 * rate)
    nodes = [GraphNode("input", "input", shape=(in_channels, in_extent, in_extent, in_extent)),
             GraphNode("x", "input", shape=(c_feat, ext, ext, ext))]
    prev = "input"
    for i in range(steps):
        c_out = n_classes if i == steps - 1 else hidden
        nodes.append(GraphNode(f"att_conv{i + 1}", "conv3d", [prev], {"c_out": c_out, "kernel": 3, "stride": 2}))
        prev = f"att_conv{i + 1}"
    nodes += [
        GraphNode("att_map", "softmax", [prev]),
        GraphNode("masks", "reshape", ["att_map"], {"shape": [n_classes, n]}),
        GraphNode("x_flat", "reshape", ["x"], {"shape": [c_feat, n]}),
        GraphNode("prototypes", "matmul", ["x_flat", "masks"], {"transpose_b": True}),
        GraphNode("mapped", "matmul", ["prototypes", "masks"]),
        GraphNode("mapped_vol", "reshape", ["mapped"], {"shape": [c_feat, ext, ext, ext]}),
        GraphNode("y", "elementwise", ["mapped_vol", "x"]),
    ]
    return nodes


PRESETS = {
    "self-attention": self_attention_graph,
    "cp-block": cp_block_graph,
    "sam-r8": lambda: sam_graph(8),
    "sam-r4": lambda: sam_graph(4),
    "sam-r2": lambda: sam_graph(2),
}


def preset(name: str) -> list[GraphNode]:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    return PRESETS[name]()
