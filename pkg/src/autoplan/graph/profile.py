"""Closed-form FLOP and memory profiles per node kind.

Formula table (elements = product of the output extents unless noted):

=================  ==================  ==========  ===============================
kind               forward FLOPs       bwd factor  saved for backward
=================  ==================  ==========  ===============================
matmul             2*m*k*n             2           both inputs
batched-matmul     2*b*m*k*n           2           both inputs
elementwise-unary  1*elements          1           output
elementwise-binary 1*elements          1           inputs for mul/div, else none
reduction          1*input elements    2           none
softmax            5*elements          2           output
layernorm          8*elements          2           output + mean/rstd vectors
embedding-lookup   0                   0           index tensor
others             0                   0           none
=================  ==================  ==========  ===============================

softmax and layernorm carry one output-sized transient buffer in both passes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

from .ir import SOURCE_KINDS, ComputationGraph, GraphNode, Kind, TensorMeta

COMPUTE_KINDS = frozenset({Kind.MATMUL, Kind.BMM, Kind.SOFTMAX, Kind.LAYERNORM, Kind.REDUCTION})
ELEMENTWISE_KINDS = frozenset({Kind.UNARY, Kind.BINARY})
TRANSIENT_KINDS = frozenset({Kind.SOFTMAX, Kind.LAYERNORM})
SAVES_INPUTS_OPS = frozenset({"mul", "div"})


@dataclass(frozen=True)
class NodeProfile:
    flops: int = 0
    bwd_flops: int = 0
    fwd_out_bytes: int = 0
    saved_intermediate_bytes: int = 0
    grad_bytes: int = 0
    param_bytes: int = 0
    fwd_peak_overhead_bytes: int = 0
    bwd_peak_overhead_bytes: int = 0
    fwd_time_s: float = 0.0
    bwd_time_s: float = 0.0


@dataclass(frozen=True)
class SavedTensor:
    """One tensor kept for backward: an input slot, an output, or a per-row statistic."""

    source: str  # "input" | "output" | "stats"
    index: int
    meta: TensorMeta


@dataclass
class GraphProfile:
    nodes: dict[str, NodeProfile] = field(default_factory=dict)
    total_flops: int = 0
    total_bwd_flops: int = 0
    peak_fwd_bytes: int = 0
    param_bytes: int = 0

    def __getitem__(self, nid: str) -> NodeProfile:
        return self.nodes[nid]

    def __iter__(self) -> Iterator[str]:
        return iter(self.nodes)


def forward_flops(node: GraphNode, metas: list[TensorMeta | None]) -> int:
    k = node.kind
    out = node.out
    if k is Kind.MATMUL:
        x, w = metas[0], metas[1]
        m = math.prod(x.shape[:-1])
        return 2 * m * x.shape[-1] * w.shape[1]
    if k is Kind.BMM:
        x, y = metas[0], metas[1]
        return 2 * x.shape[0] * x.shape[1] * x.shape[2] * y.shape[2]
    if out is None:
        return 0
    if k in ELEMENTWISE_KINDS:
        return out.numel
    if k is Kind.REDUCTION:
        return metas[0].numel
    if k is Kind.SOFTMAX:
        return 5 * out.numel
    if k is Kind.LAYERNORM:
        return 8 * out.numel
    return 0


def backward_factor(node: GraphNode) -> int:
    if not node.differentiable:
        return 0
    if node.kind in COMPUTE_KINDS:
        return 2
    if node.kind in ELEMENTWISE_KINDS:
        return 1
    return 0


def saved_tensors(node: GraphNode, metas: list[TensorMeta | None]) -> list[SavedTensor]:
    k = node.kind
    out = node.out
    if not node.differentiable:
        return []
    if k in (Kind.MATMUL, Kind.BMM):
        return [SavedTensor("input", i, metas[i]) for i in (0, 1)]
    if k in (Kind.UNARY, Kind.SOFTMAX) and out is not None:
        return [SavedTensor("output", 0, out)]
    if k is Kind.BINARY and node.attrs.get("op") in SAVES_INPUTS_OPS:
        return [SavedTensor("input", i, m) for i, m in enumerate(metas) if m is not None]
    if k is Kind.LAYERNORM:
        stats = TensorMeta(out.shape[:-1] or (1,), out.dtype_bytes)
        return [SavedTensor("output", 0, out), SavedTensor("stats", 0, stats), SavedTensor("stats", 0, stats)]
    if k is Kind.EMBEDDING:
        return [SavedTensor("input", 1, metas[1])]
    return []


def profile_node(graph: ComputationGraph, node_id: str, device_flops_per_s: float | None = None) -> NodeProfile:
    """Profile one annotated node; times stay zero unless a device rate is given."""
    node = graph[node_id]
    metas = graph.input_metas(node_id)
    flops = forward_flops(node, metas)
    bwd = flops * backward_factor(node)
    out_bytes = sum(m.nbytes for m in node.outputs)
    saved = sum(s.meta.nbytes for s in saved_tensors(node, metas))
    transient = out_bytes if node.kind in TRANSIENT_KINDS else 0
    rate = device_flops_per_s
    return NodeProfile(
        flops=flops,
        bwd_flops=bwd,
        fwd_out_bytes=out_bytes,
        saved_intermediate_bytes=saved,
        grad_bytes=out_bytes if node.differentiable else 0,
        param_bytes=out_bytes if node.kind is Kind.PARAMETER else 0,
        fwd_peak_overhead_bytes=transient,
        bwd_peak_overhead_bytes=transient,
        fwd_time_s=flops / rate if rate else 0.0,
        bwd_time_s=bwd / rate if rate else 0.0,
    )


def profile_graph(graph: ComputationGraph, device_flops_per_s: float | None = None) -> GraphProfile:
    """Per-node profiles plus totals.

    ``peak_fwd_bytes`` simulates serial forward execution in topological order:
    sources and the graph output stay resident, other tensors are freed after
    their last consumer runs.
    """
    prof = GraphProfile()
    order = graph.topo_order
    last_use: dict[str, int] = {}
    for i, nid in enumerate(order):
        for src in graph[nid].parents:
            last_use[src] = i
    live = 0
    keep = {nid for nid in order if graph[nid].kind in SOURCE_KINDS} | {graph.output}
    for i, nid in enumerate(order):
        p = profile_node(graph, nid, device_flops_per_s)
        prof.nodes[nid] = p
        prof.total_flops += p.flops
        prof.total_bwd_flops += p.bwd_flops
        prof.param_bytes += p.param_bytes
        live += p.fwd_out_bytes
        prof.peak_fwd_bytes = max(prof.peak_fwd_bytes, live + p.fwd_peak_overhead_bytes)
        for src in graph[nid].parents:
            if last_use[src] == i and src not in keep:
                live -= prof.nodes[src].fwd_out_bytes
        if nid not in keep and not graph.children(nid):
            live -= p.fwd_out_bytes
    return prof
