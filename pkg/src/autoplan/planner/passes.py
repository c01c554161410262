"""Compilation passes applying an intra-op solution to the graph."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

from ..cluster import CollectiveKind, DeviceMesh, collective_cost
from ..distributed import PARTIAL_SUM, RESHARD, CommRecord, DistributedGraph
from ..errors import MissingPathError
from ..graph.ir import SOURCE_KINDS, ComputationGraph, GraphNode, Kind
from ..intraop.generators import map_reshape_spec
from ..intraop.ilp import IntraOpSolution
from ..intraop.table import StrategyTable
from ..layout import LayoutManager, ShardingSpec, TransformPath


def _comm_node(nid: str, src: tuple[str, int], like: GraphNode, kind: CollectiveKind, axes, nbytes: int,
               time_s: float, src_spec: str, dst_spec: str, reason: str) -> GraphNode:
    attrs = {
        "collective": kind.value,
        "axes": list(axes),
        "bytes": nbytes,
        "time_s": time_s,
        "src_spec": src_spec,
        "dst_spec": dst_spec,
        "reason": reason,
    }
    return GraphNode(nid, Kind.COLLECTIVE, (src,), attrs, (like.out,), like.differentiable)


def insert_comm_nodes(table: StrategyTable, solution: IntraOpSolution | Mapping[str, int],
                      layout: LayoutManager | None = None) -> DistributedGraph:
    """Make every collective of the solution an explicit graph node.

    A partial-sum output gets an all-reduce right after its producer; every
    edge whose producer spec differs from the consumer's requirement gets the
    conversion chain of the cached layout path.  Chains are per edge, so the
    inserted volume matches what the solver was charged.
    """
    selection = solution.selection if isinstance(solution, IntraOpSolution) else dict(solution)
    layout = layout or LayoutManager()
    graph, mesh, sg = table.graph, table.mesh, table.simplified
    chosen = table.chosen(selection)
    specs = table.node_specs(selection)
    partial = frozenset(h for h, s in chosen.items() if s.partial_sum)

    alias: dict[str, str] = {}
    origin: dict[str, tuple[str, str | None, int | None]] = {}
    # collectives emitted right after / right before an original node
    extra: dict[str, list[GraphNode]] = {nid: [] for nid in graph.nodes}
    before: dict[str, list[GraphNode]] = {nid: [] for nid in graph.nodes}
    out_specs: dict[str, ShardingSpec] = dict(specs)
    for h in sorted(partial):
        s = chosen[h]
        node = graph[h]
        nbytes = s.output_spec.local_bytes(node.out, mesh)
        t = collective_cost(mesh, s.reduce_axes, CollectiveKind.ALL_REDUCE, nbytes)
        ar = _comm_node(f"{h}__allreduce", (h, 0), node, CollectiveKind.ALL_REDUCE, s.reduce_axes, nbytes, t,
                        f"{s.output_spec}+partial", str(s.output_spec), PARTIAL_SUM)
        extra[h].append(ar)
        alias[h] = ar.id
        origin[ar.id] = (h, None, None)
        out_specs[ar.id] = s.output_spec

    rewired: dict[str, list[tuple[str, int]]] = {}
    requirements: dict[tuple[str, int], ShardingSpec] = {}
    for consumer in graph.topo_order:
        node = graph[consumer]
        inputs = list(node.inputs)
        metas = graph.input_metas(consumer)
        for slot, (producer, idx) in enumerate(node.inputs):
            src = alias.get(producer, producer)
            inputs[slot] = (src, idx)
            if metas[slot] is None:
                continue
            req = table.requirement(consumer, slot, selection)
            if req is None:
                continue
            have = specs[producer]
            if have != req:
                path = layout.cached_path(have, req, mesh, metas[slot])
                if path.replay() != req:
                    raise MissingPathError(f"layout path {have} -> {req} does not replay")
                spec = have
                # a source has no group to join, so its conversions run next to the consumer
                bucket = before[consumer] if graph[producer].kind in SOURCE_KINDS else extra[producer]
                for i, step in enumerate(path.steps):
                    nbytes = spec.local_bytes(metas[slot], mesh)
                    t = collective_cost(mesh, [step.axis], step.kind, nbytes)
                    cid = f"{producer}__to__{consumer}_{slot}_{i}"
                    bucket.append(_comm_node(cid, (src, 0), graph[producer], step.kind, [step.axis], nbytes,
                                                      t, str(spec), str(step.result), RESHARD))
                    out_specs[cid] = step.result
                    origin[cid] = (producer, consumer, slot)
                    src, spec = cid, step.result
                inputs[slot] = (src, 0)
            requirements[(consumer, slot)] = req
        rewired[consumer] = inputs

    nodes = []
    for nid, node in graph.nodes.items():
        nodes.extend(before[nid])
        nodes.append(GraphNode(nid, node.kind, tuple(rewired[nid]), node.attrs, node.outputs,
                               node.differentiable, node.in_place))
        nodes.extend(extra[nid])
    new = ComputationGraph.build(nodes, graph.output)
    position = {nid: i for i, nid in enumerate(new.topo_order)}
    comms = []
    for nid in new.topo_order:
        n = new[nid]
        if n.kind is not Kind.COLLECTIVE:
            continue
        a = n.attrs
        producer, consumer, slot = origin[nid]
        comms.append(CommRecord(nid, CollectiveKind(a["collective"]), tuple(a["axes"]), a["bytes"], a["time_s"],
                                position[nid], a["reason"], producer, consumer, slot, a["src_spec"], a["dst_spec"]))

    compute: dict[str, tuple[float, float]] = {}
    bwd_comm = {}
    for h, s in chosen.items():
        for nid, fwd, bwd in s.breakdown:
            compute[nid] = (fwd, bwd)
        bwd_comm[h] = s.bwd_comm
    for nid in graph.nodes:
        compute.setdefault(nid, (0.0, 0.0))
    return DistributedGraph(new, graph, mesh, out_specs, requirements, compute, bwd_comm, comms, partial)


@dataclass(frozen=True)
class ParamShard:
    spec: ShardingSpec
    gradient: str  # "all-reduce" | "none"
    axes: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {"spec": str(self.spec), "gradient": self.gradient, "axes": list(self.axes)}


def shard_parameters(dg: DistributedGraph) -> dict[str, ParamShard]:
    """Spec of every parameter plus its gradient synchronisation over the replica axes."""
    res = {}
    mesh = dg.mesh
    for nid in dg.original.topo_order:
        if dg.original[nid].kind is not Kind.PARAMETER:
            continue
        spec = dg.specs[nid]
        replica = tuple(a for a in range(mesh.rank) if a not in spec.used_axes and mesh.shape[a] > 1)
        res[nid] = ParamShard(spec, "all-reduce", replica) if replica else ParamShard(spec, "none")
    return res


@dataclass
class ReshapeRewrites:
    # node id -> new constant attrs in per-device extents
    rewrites: dict[str, dict] = field(default_factory=dict)
    # node id -> conversion to a replicated input placed before the reshape
    fallbacks: dict[str, TransformPath] = field(default_factory=dict)


def rewrite_reshapes(graph: ComputationGraph, input_specs: Mapping[str, ShardingSpec], mesh: DeviceMesh,
                     layout: LayoutManager | None = None) -> ReshapeRewrites:
    """Rescale reshape constants to per-device extents.

    ``input_specs`` gives the spec each reshape's input carries.  A reshape
    whose sharding cannot be carried through falls back to a replicated input.
    """
    layout = layout or LayoutManager()
    res = ReshapeRewrites()
    for nid in graph.topo_order:
        node = graph[nid]
        if node.kind is not Kind.RESHAPE or nid not in input_specs:
            continue
        x, out = graph.input_metas(nid)[0], node.out
        spec = input_specs[nid]
        mapped = map_reshape_spec(x.shape, out.shape, spec, mesh)
        if mapped is None or not mapped.is_valid(out.shape, mesh):
            rep = ShardingSpec.replicated(x.rank, mesh.rank)
            res.fallbacks[nid] = layout.cached_path(spec, rep, mesh, x)
            mapped = ShardingSpec.replicated(out.rank, mesh.rank)
        res.rewrites[nid] = {"shape": list(mapped.local_shape(out.shape, mesh))}
    return res


def distributed_reshapes(dg: DistributedGraph, layout: LayoutManager | None = None) -> ReshapeRewrites:
    specs = {nid: dg.requirements[(nid, 0)] for nid in dg.original.topo_order
             if dg.original[nid].kind is Kind.RESHAPE and (nid, 0) in dg.requirements}
    return rewrite_reshapes(dg.original, specs, dg.mesh, layout)
