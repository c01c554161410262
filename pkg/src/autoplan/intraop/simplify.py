"""Shrink the graph the solver sees.

* trivial nodes (elementwise, getitem, getattr) merge into the group of the
  producer they read from and inherit its output spec;
* parameters and constants read by exactly one consumer fold into that
  consumer's strategy;
* scalar-only nodes (no tensor inputs or outputs) are dropped.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from ..graph.ir import SOURCE_KINDS, ComputationGraph, Kind

TRIVIAL_KINDS = frozenset({Kind.UNARY, Kind.BINARY, Kind.GETITEM, Kind.GETATTR})

HOST, MERGED, FOLDED, REMOVED, SINK = "host", "merged", "folded", "removed", "sink"


@dataclass
class SimplifiedGraph:
    graph: ComputationGraph
    role: dict[str, str] = field(default_factory=dict)
    host_of: dict[str, str] = field(default_factory=dict)
    members: dict[str, list[str]] = field(default_factory=dict)
    # host -> [(param id, consumer id, consumer slot)]
    folded: dict[str, list[tuple[str, str, int]]] = field(default_factory=dict)

    @property
    def solver_nodes(self) -> list[str]:
        return [n for n in self.graph.topo_order if self.role[n] == HOST]

    @property
    def merge_map(self) -> dict[str, str]:
        """Original node -> solver node whose strategy decides it."""
        return dict(self.host_of)

    def __len__(self) -> int:
        return len(self.solver_nodes)


def _has_tensor_io(graph: ComputationGraph, nid: str) -> bool:
    node = graph[nid]
    return bool(node.outputs) or any(m is not None for m in graph.input_metas(nid))


def simplify_graph(graph: ComputationGraph, fold_params: bool = True) -> SimplifiedGraph:
    sg = SimplifiedGraph(graph)
    for nid in graph.topo_order:
        node = graph[nid]
        if node.kind is Kind.OUTPUT:
            sg.role[nid] = SINK
            continue
        if node.kind not in SOURCE_KINDS and not _has_tensor_io(graph, nid):
            sg.role[nid] = REMOVED
            continue
        if node.kind in TRIVIAL_KINDS:
            host = _merge_target(sg, nid)
            if host is not None:
                sg.role[nid] = MERGED
                sg.host_of[nid] = host
                sg.members.setdefault(host, []).append(nid)
                continue
        sg.role[nid] = HOST
        sg.host_of[nid] = nid
    if fold_params:
        for nid in graph.topo_order:
            node = graph[nid]
            if node.kind not in (Kind.PARAMETER, Kind.CONSTANT) or node.out is None or sg.members.get(nid):
                continue
            uses = graph.children_map[nid]
            if len(uses) != 1:
                continue
            consumer, slot = uses[0]
            if sg.role[consumer] not in (HOST, MERGED):
                continue
            host = sg.host_of[consumer]
            sg.role[nid] = FOLDED
            sg.host_of[nid] = host
            sg.folded.setdefault(host, []).append((nid, consumer, slot))
    return sg


def _merge_target(sg: SimplifiedGraph, nid: str) -> str | None:
    """Host of the nearest tensor producer, preferring non-source groups."""
    graph = sg.graph
    node = graph[nid]
    metas = graph.input_metas(nid)
    candidates = []
    for (src, _), meta in zip(node.inputs, metas):
        if meta is None or sg.role.get(src) not in (HOST, MERGED):
            continue
        host = sg.host_of[src]
        out = graph[host].out
        if node.out is not None and (out is None or out.rank != node.out.rank):
            continue
        candidates.append(host)
    for host in candidates:
        if graph[host].kind not in SOURCE_KINDS:
            return host
    return candidates[0] if candidates else None
