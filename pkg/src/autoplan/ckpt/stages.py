"""Per-stage time and memory terms of a linearized distributed graph.

All quantities are per device.  Bytes are integers; times are seconds.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

from ..cluster import CollectiveKind, collective_cost
from ..distributed import PARTIAL_SUM, DistributedGraph
from ..errors import MissingStrategyError
from ..graph.ir import SOURCE_KINDS, Kind
from ..graph.profile import TRANSIENT_KINDS, saved_tensors
from ..layout import ShardingSpec
from .common import NodeGroup, default_seeds, linearize, propagate_common_nodes

# backward counterpart of each forward resharding collective
MIRROR = {
    CollectiveKind.ALL_GATHER: CollectiveKind.REDUCE_SCATTER,
    CollectiveKind.SHARD_SLICE: CollectiveKind.ALL_GATHER,
    CollectiveKind.ALL_TO_ALL: CollectiveKind.ALL_TO_ALL,
}


@dataclass(frozen=True)
class StageCost:
    u_f: float = 0.0
    u_b: float = 0.0
    u_fcomm: float = 0.0
    u_bcomm: float = 0.0
    o_f: int = 0
    o_b: int = 0
    o_fcomm: int = 0
    o_bcomm: int = 0
    w_a: int = 0
    w_abar: int = 0
    w_delta: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> StageCost:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class StageModel:
    stages: list[StageCost]
    groups: list[NodeGroup]
    resident_bytes: int  # sources and common-node outputs, held for the whole step
    common: frozenset[str] = frozenset()


def _local(dg: DistributedGraph, nid: str) -> int:
    node = dg.graph[nid]
    if node.out is None:
        return 0
    if nid not in dg.specs:
        raise MissingStrategyError(f"no sharding spec for node {nid!r}")
    return dg.specs[nid].local_bytes(node.out, dg.mesh)


def _stats_bytes(dg: DistributedGraph, nid: str, meta) -> int:
    """Per-row statistics follow the node's spec minus its last dim."""
    spec = dg.specs[nid]
    dims = spec.dims[:-1] if len(spec.dims) > 1 else ((),)
    return ShardingSpec(tuple(dims), spec.mesh_rank).local_bytes(meta, dg.mesh)


def resident_bytes(dg: DistributedGraph, common: Iterable[str]) -> int:
    common = set(common)
    g = dg.graph
    return sum(_local(dg, n) for n in g.topo_order if g[n].kind in SOURCE_KINDS or n in common)


def stage_costs(dg: DistributedGraph, groups: Sequence[NodeGroup], common: Iterable[str] = ()) -> list[StageCost]:
    g, mesh = dg.graph, dg.mesh
    common = set(common)
    stages = []
    for grp in groups:
        members = set(grp.members)
        u_f = u_b = u_fcomm = u_bcomm = 0.0
        o_fcomm = o_bcomm = 0
        crossing: list[str] = []
        inner: list[str] = []
        transient_f = transient_b = 0
        saved: set[str] = set()
        extra_saved = 0
        grad_inner = 0
        for m in grp.members:
            node = g[m]
            fwd, bwd = dg.compute.get(m, (0.0, 0.0))
            u_f += fwd
            u_b += bwd
            for op in dg.bwd_comm.get(m, ()):
                u_bcomm += op.time_s
                o_bcomm = max(o_bcomm, op.nbytes)
            if node.kind is Kind.COLLECTIVE:
                a = node.attrs
                u_fcomm += a["time_s"]
                out = _local(dg, m)
                o_fcomm = max(o_fcomm, out)
                kind = CollectiveKind(a["collective"])
                if node.differentiable and a["reason"] != PARTIAL_SUM and kind in MIRROR:
                    u_bcomm += collective_cost(mesh, a["axes"], MIRROR[kind], out)
                    o_bcomm = max(o_bcomm, out)
            if m in common or node.out is None:
                continue
            local = _local(dg, m)
            if node.kind in TRANSIENT_KINDS:
                transient_f = max(transient_f, local)
                transient_b = max(transient_b, local)
            outside = [c for c in g.children(m) if c not in members and c not in common]
            (crossing if outside else inner).append(m)
            if node.differentiable and not outside:
                grad_inner += local
            for st in saved_tensors(node, g.input_metas(m)):
                if st.source == "output":
                    saved.add(m)
                elif st.source == "stats":
                    extra_saved += _stats_bytes(dg, m, st.meta)
                else:
                    src = node.inputs[st.index][0]
                    if src in members and src not in common and g[src].kind not in SOURCE_KINDS:
                        saved.add(src)
        w_a = sum(_local(dg, m) for m in crossing)
        w_abar = sum(_local(dg, m) for m in sorted(saved | set(crossing))) + extra_saved
        o_f = sum(_local(dg, m) for m in inner) + transient_f
        o_b = grad_inner + transient_b
        stages.append(StageCost(u_f, u_b, u_fcomm, u_bcomm, o_f, o_b, o_fcomm, o_bcomm, w_a, w_abar, w_a))
    return stages


def build_stages(dg: DistributedGraph, common: Iterable[str] | None = None) -> StageModel:
    """Common nodes, chain and stage costs of a distributed graph."""
    common = propagate_common_nodes(dg.graph, default_seeds(dg.graph)) if common is None else set(common)
    groups = linearize(dg.graph, common)
    return StageModel(stage_costs(dg, groups, common), groups, resident_bytes(dg, common), frozenset(common))
