"""Common-node propagation and chain linearization of a computation graph."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from ..errors import CycleError, NonDagError, SeedError
from ..graph.ir import SOURCE_KINDS, ComputationGraph, Kind


@dataclass(frozen=True)
class NodeGroup:
    members: tuple[str, ...]
    index: int

    @property
    def last(self) -> str:
        return self.members[-1]

    def __len__(self) -> int:
        return len(self.members)


def default_seeds(graph: ComputationGraph) -> set[str]:
    """Non-differentiable graph inputs, e.g. a boolean attention mask."""
    return {p for p in graph.placeholders if not graph[p].differentiable}


def _is_common(graph: ComputationGraph, nid: str, common: set[str]) -> bool:
    node = graph[nid]
    if node.kind is Kind.OUTPUT:
        return False
    parents = node.parents
    if parents and all(p in common for p in parents):
        return True
    return node.kind not in SOURCE_KINDS and not node.differentiable


def propagate_common_nodes(graph: ComputationGraph, seeds: Iterable[str] = ()) -> set[str]:
    """Closure of ``seeds`` under: all parents common, or the node itself is non-differentiable."""
    common = set()
    for s in seeds:
        if s not in graph.nodes:
            raise SeedError(f"unknown seed {s!r}")
        if graph[s].differentiable:
            raise SeedError(f"seed {s!r} is differentiable")
        common.add(s)
    # parents precede children in topological order, so one sweep reaches the fixpoint
    for nid in graph.topo_order:
        if nid not in common and _is_common(graph, nid, common):
            common.add(nid)
    return common


def linearize(graph: ComputationGraph, common: Iterable[str] = ()) -> list[NodeGroup]:
    """Split the graph into a chain of node groups.

    Nodes are visited in topological order.  Each non-source node first
    consumes one dependency of every non-source, non-common parent; the
    current group closes when no dependency is outstanding and none of the
    node's children is in-place or a collective (those stay with their parent).
    """
    try:
        order = graph.topo_order
    except CycleError as exc:
        raise NonDagError(str(exc)) from None
    common = set(common)
    skip = lambda nid: graph[nid].kind in SOURCE_KINDS or graph[nid].kind is Kind.OUTPUT  # noqa: E731
    pool: dict[str, int] = {}
    groups: list[NodeGroup] = []
    current: list[str] = []
    for nid in order:
        if skip(nid):
            continue
        for p in graph[nid].parents:
            if not skip(p) and p not in common:
                pool[p] -= 1
                if pool[p] == 0:
                    del pool[p]
        current.append(nid)
        children = [c for c in graph.children(nid) if not skip(c)]
        sticky = any(graph[c].in_place or graph[c].kind is Kind.COLLECTIVE for c in children)
        if not pool and not sticky:
            groups.append(NodeGroup(tuple(current), len(groups)))
            current = []
        if nid not in common and children:
            pool[nid] = len(children)
    if current:
        groups.append(NodeGroup(tuple(current), len(groups)))
    return groups


def check_linear(graph: ComputationGraph, groups: list[NodeGroup], common: Iterable[str] = ()) -> list[str]:
    """Violations of the chain property: a non-final, non-common member read from outside its group."""
    common = set(common)
    where = {m: g.index for g in groups for m in g.members}
    problems = []
    for g in groups:
        for m in g.members[:-1]:
            if m in common:
                continue
            for c in graph.children(m):
                if c in where and where[c] != g.index and c not in common:
                    problems.append(f"{m} (group {g.index}) is read by {c} (group {where[c]})")
    return problems
