"""Strategy table: candidate strategies per solver node plus resharding-cost matrices per edge."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from ..cluster import DeviceMesh
from ..errors import MissingStrategyError
from ..graph.ir import ComputationGraph, Kind
from ..graph.profile import backward_factor, forward_flops
from ..layout import LayoutManager, ShardingSpec, scalar_spec
from .generators import CommOp, OpStrategy, _all_reduce, align_spec, generate_strategies
from .simplify import FOLDED, HOST, MERGED, SimplifiedGraph, simplify_graph


@dataclass(frozen=True)
class EdgeCost:
    """Resharding cost between two solver nodes for one original graph edge."""

    producer: str
    consumer: str
    slot: int
    src: str
    dst: str
    matrix: np.ndarray  # [len(strategies[src]), len(strategies[dst])]


@dataclass
class SolverProblem:
    """Solver view: per-node cost/memory vectors and pairwise edge matrices (rows = earlier node)."""

    nodes: list[str]
    cost: list[np.ndarray]
    memory: list[np.ndarray]
    edges: list[tuple[int, int, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        self.cost = [np.asarray(c, dtype=float) for c in self.cost]
        self.memory = [np.asarray(m, dtype=np.int64) for m in self.memory]
        fixed = []
        for i, j, mat in self.edges:
            mat = np.asarray(mat, dtype=float)
            if i > j:
                i, j, mat = j, i, mat.T
            if mat.shape != (len(self.cost[i]), len(self.cost[j])):
                raise ValueError(f"edge matrix {mat.shape} does not match strategy counts")
            fixed.append((i, j, mat))
        self.edges = fixed

    def evaluate(self, choice: Sequence[int]) -> tuple[float, int]:
        """(total time, total memory) of a full assignment.

        The time is an exactly rounded sum, so it does not depend on node or edge order.
        """
        terms = [float(self.cost[i][c]) for i, c in enumerate(choice)]
        terms += [float(mat[choice[i], choice[j]]) for i, j, mat in self.edges]
        total = math.fsum(terms)
        mem = sum(int(self.memory[i][c]) for i, c in enumerate(choice))
        return total, mem


@dataclass
class StrategyTable:
    mesh: DeviceMesh
    simplified: SimplifiedGraph
    strategies: dict[str, list[OpStrategy]]
    edges: list[EdgeCost]

    @property
    def graph(self) -> ComputationGraph:
        return self.simplified.graph

    @property
    def nodes(self) -> list[str]:
        return self.simplified.solver_nodes

    def problem(self) -> SolverProblem:
        nodes = self.nodes
        index = {n: i for i, n in enumerate(nodes)}
        cost = [np.array([s.cost for s in self.strategies[n]]) for n in nodes]
        mem = [np.array([s.memory_bytes for s in self.strategies[n]], dtype=np.int64) for n in nodes]
        agg: dict[tuple[int, int], np.ndarray] = {}
        for e in self.edges:
            i, j, mat = index[e.src], index[e.dst], e.matrix
            if i > j:
                i, j, mat = j, i, mat.T
            agg[(i, j)] = agg[(i, j)] + mat if (i, j) in agg else mat.copy()
        return SolverProblem(nodes, cost, mem, [(i, j, m) for (i, j), m in sorted(agg.items())])

    # -- expansion of a solver choice onto the original graph ---------------

    def chosen(self, selection: Mapping[str, int]) -> dict[str, OpStrategy]:
        return {n: self.strategies[n][selection[n]] for n in self.nodes}

    def output_spec(self, node_id: str, selection: Mapping[str, int]) -> ShardingSpec:
        sg = self.simplified
        node = self.graph[node_id]
        if node.out is None:
            return scalar_spec(self.mesh.rank)
        role = sg.role[node_id]
        host = sg.host_of.get(node_id)
        if role == HOST:
            return self.strategies[node_id][selection[node_id]].output_spec
        if role == MERGED:
            return self.strategies[host][selection[host]].output_spec
        if role == FOLDED:
            consumer, slot = self.graph.children_map[node_id][0]
            return self.requirement(consumer, slot, selection)
        return ShardingSpec.replicated(node.out.rank, self.mesh.rank)

    def requirement(self, consumer: str, slot: int, selection: Mapping[str, int]) -> ShardingSpec | None:
        sg = self.simplified
        role = sg.role[consumer]
        if role == HOST:
            return self.strategies[consumer][selection[consumer]].input_specs[slot]
        if role == MERGED:
            host = sg.host_of[consumer]
            return member_requirement(self.graph, consumer, slot, self.strategies[host][selection[host]].output_spec)
        return None

    def node_specs(self, selection: Mapping[str, int]) -> dict[str, ShardingSpec]:
        return {n: self.output_spec(n, selection) for n in self.graph.topo_order if self.graph[n].out is not None}


def member_requirement(graph: ComputationGraph, consumer: str, slot: int, host_spec: ShardingSpec) -> ShardingSpec | None:
    """Spec a merged node needs on input ``slot`` when its group runs with ``host_spec``."""
    node = graph[consumer]
    meta = graph.input_metas(consumer)[slot]
    if meta is None or node.kind is Kind.GETATTR or node.out is None:
        return None
    return align_spec(host_spec, node.out.shape, meta.shape)


def _member_ok(graph: ComputationGraph, member: str, spec: ShardingSpec, mesh: DeviceMesh) -> bool:
    node = graph[member]
    if node.out is None:
        return True
    if not spec.is_valid(node.out.shape, mesh):
        return False
    if node.kind is Kind.GETITEM:
        dim = node.attrs["dim"] % node.out.rank
        if spec.dims[dim]:
            return False
    for slot, meta in enumerate(graph.input_metas(member)):
        if meta is not None:
            req = member_requirement(graph, member, slot, spec)
            if req is not None and not req.is_valid(meta.shape, mesh):
                return False
    return True


def _augment(graph: ComputationGraph, sg: SimplifiedGraph, host: str, s: OpStrategy, mesh: DeviceMesh) -> OpStrategy | None:
    spec = s.output_spec
    compute, bwd_compute, memory = s.compute_time_s, s.bwd_compute_time_s, s.memory_bytes
    bwd_comm: list[CommOp] = list(s.bwd_comm)
    breakdown = [(host, s.compute_time_s, s.bwd_compute_time_s)]
    rate = mesh.device_flops_per_s
    for m in sg.members.get(host, []):
        if not _member_ok(graph, m, spec, mesh):
            return None
        node = graph[m]
        if node.out is None:
            continue
        flops = forward_flops(node, graph.input_metas(m))
        engaged = spec.shard_factor(mesh)
        fwd, bwd = flops / engaged / rate, flops * backward_factor(node) / engaged / rate
        breakdown.append((m, fwd, bwd))
        compute += fwd
        bwd_compute += bwd
        memory += spec.local_bytes(node.out, mesh)
    for param, consumer, slot in sg.folded.get(host, []):
        if consumer == host:
            req = s.input_specs[slot]
        else:
            req = member_requirement(graph, consumer, slot, spec)
        meta = graph[param].out
        if req is None or not req.is_valid(meta.shape, mesh):
            return None
        local = req.local_bytes(meta, mesh)
        memory += local
        replica = [a for a in range(mesh.rank) if a not in req.used_axes]
        if graph[param].kind is Kind.PARAMETER and mesh.axes_size(replica) > 1:
            bwd_comm.append(_all_reduce(mesh, replica, local))
    return replace(s, compute_time_s=compute, bwd_compute_time_s=bwd_compute, memory_bytes=memory,
                   bwd_comm=tuple(bwd_comm), breakdown=tuple(breakdown))


def build_strategy_table(graph: ComputationGraph, mesh: DeviceMesh, layout: LayoutManager | None = None,
                         simplified: SimplifiedGraph | None = None) -> StrategyTable:
    sg = simplified or simplify_graph(graph)
    layout = layout or LayoutManager()
    strategies: dict[str, list[OpStrategy]] = {}
    for host in sg.solver_nodes:
        param_slots = frozenset(slot for _, consumer, slot in sg.folded.get(host, []) if consumer == host)
        raw = generate_strategies(graph, host, mesh, param_slots)
        kept = [a for a in (_augment(graph, sg, host, s, mesh) for s in raw) if a is not None]
        if not kept:
            raise MissingStrategyError(f"no valid strategy for node {host!r}")
        strategies[host] = kept
    table = StrategyTable(mesh, sg, strategies, [])
    for consumer in graph.topo_order:
        if sg.role[consumer] not in (HOST, MERGED):
            continue
        dst = sg.host_of[consumer]
        metas = graph.input_metas(consumer)
        for slot, (producer, _) in enumerate(graph[consumer].inputs):
            meta = metas[slot]
            if meta is None or sg.role[producer] not in (HOST, MERGED):
                continue
            src = sg.host_of[producer]
            if src == dst:
                continue
            mat = np.zeros((len(strategies[src]), len(strategies[dst])))
            outs = [table.output_spec(producer, {src: i}) for i in range(len(strategies[src]))]
            for j in range(len(strategies[dst])):
                req = table.requirement(consumer, slot, {dst: j})
                if req is None:
                    continue
                for i, spec in enumerate(outs):
                    mat[i, j] = layout.cost(spec, req, mesh, meta)
            table.edges.append(EdgeCost(producer, consumer, slot, src, dst, mat))
    return table
