"""The distributed graph: the original graph with collectives made explicit and every tensor given a spec."""
from __future__ import annotations

from dataclasses import dataclass, field

from .cluster import CollectiveKind, DeviceMesh
from .graph.ir import ComputationGraph, Kind
from .intraop.generators import CommOp
from .layout import ShardingSpec

PARTIAL_SUM, RESHARD = "partial-sum", "reshard"


@dataclass(frozen=True)
class CommRecord:
    id: str
    kind: CollectiveKind
    axes: tuple[int, ...]
    nbytes: int  # per-device bytes the collective starts from
    time_s: float
    position: int  # index in the distributed graph's topological order
    reason: str
    producer: str
    consumer: str | None
    slot: int | None
    src_spec: str
    dst_spec: str

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "axes": list(self.axes),
            "bytes": self.nbytes,
            "time_s": self.time_s,
            "position": self.position,
            "reason": self.reason,
            "producer": self.producer,
            "consumer": self.consumer,
            "slot": self.slot,
            "src_spec": self.src_spec,
            "dst_spec": self.dst_spec,
        }

    @classmethod
    def from_dict(cls, d: dict) -> CommRecord:
        return cls(d["id"], CollectiveKind(d["kind"]), tuple(d["axes"]), int(d["bytes"]), float(d["time_s"]),
                   int(d["position"]), d["reason"], d["producer"], d["consumer"], d["slot"],
                   d["src_spec"], d["dst_spec"])


@dataclass
class DistributedGraph:
    graph: ComputationGraph
    original: ComputationGraph
    mesh: DeviceMesh
    # output spec of every tensor-producing node of ``graph``
    specs: dict[str, ShardingSpec]
    # spec a consumer needs on an input slot of ``graph``; absent when it has no preference
    requirements: dict[tuple[str, int], ShardingSpec]
    # per-device forward / backward compute seconds of every original node
    compute: dict[str, tuple[float, float]]
    # backward collectives owned by each solver node's strategy (input-grad and weight-grad reductions)
    bwd_comm: dict[str, tuple[CommOp, ...]]
    comms: list[CommRecord] = field(default_factory=list)
    partial: frozenset[str] = frozenset()

    def comm(self, node_id: str) -> CommRecord | None:
        for c in self.comms:
            if c.id == node_id:
                return c
        return None


def check_distributed(dg: DistributedGraph) -> list[str]:
    """Structural soundness of the passes; returns a list of violations (empty on success)."""
    g = dg.graph
    problems = []
    for nid in g.topo_order:
        for slot, (src, _) in enumerate(g[nid].inputs):
            req = dg.requirements.get((nid, slot))
            if req is None or src not in dg.specs:
                continue
            if dg.specs[src] != req:
                problems.append(f"edge {src}->{nid}[{slot}]: {dg.specs[src]} != {req}")
    for host in dg.partial:
        for child in g.children(host):
            node = g[child]
            if node.kind is not Kind.COLLECTIVE or node.attrs.get("reason") != PARTIAL_SUM:
                problems.append(f"partial sum of {host} consumed unreduced by {child}")
        if not g.children(host):
            problems.append(f"partial sum of {host} is never reduced")
    return problems
