"""Strategy generators: one per operator family, selected by a kind dispatcher.

Contraction-style operators (matmul, batched-matmul, embedding lookup) are
described by dimension labels; a strategy assigns each mesh axis to at most
one label. Axes on a label missing from the output leave a partial sum that
an all-reduce over those axes resolves.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

from ..cluster import CollectiveKind, DeviceMesh, collective_cost
from ..errors import UnsupportedKindError
from ..graph.ir import ComputationGraph, GraphNode, Kind, TensorMeta
from ..graph.profile import backward_factor, forward_flops
from ..layout import REPLICATE, ShardingSpec, enumerate_specs, scalar_spec


@dataclass(frozen=True)
class CommOp:
    """A collective attached to a strategy: (kind, mesh axes, per-device bytes)."""

    kind: CollectiveKind
    axes: tuple[int, ...]
    nbytes: int
    time_s: float


@dataclass(frozen=True)
class OpStrategy:
    node: str
    name: str
    input_specs: tuple[ShardingSpec | None, ...]
    output_spec: ShardingSpec
    compute_time_s: float = 0.0
    comm_time_s: float = 0.0
    memory_bytes: int = 0
    partial_sum: bool = False
    reduce_axes: tuple[int, ...] = ()
    bwd_compute_time_s: float = 0.0
    bwd_comm: tuple[CommOp, ...] = ()
    # (node id, fwd s, bwd s) for the host and every merged member, filled by the table builder
    breakdown: tuple[tuple[str, float, float], ...] = ()

    @property
    def cost(self) -> float:
        return self.compute_time_s + self.comm_time_s

    @property
    def bwd_comm_time_s(self) -> float:
        return sum(c.time_s for c in self.bwd_comm)


@dataclass
class GenContext:
    graph: ComputationGraph
    node: GraphNode
    mesh: DeviceMesh
    # input slots fed by folded parameters; their gradient sync is priced by the table builder
    param_slots: frozenset[int] = field(default_factory=frozenset)

    @property
    def metas(self) -> list[TensorMeta | None]:
        return self.graph.input_metas(self.node.id)

    @property
    def flops(self) -> int:
        return forward_flops(self.node, self.metas)

    @property
    def bwd_flops(self) -> int:
        return self.flops * backward_factor(self.node)

    def input_differentiable(self, slot: int) -> bool:
        src = self.graph[self.node.inputs[slot][0]]
        return src.differentiable and src.kind is not Kind.PLACEHOLDER


def _times(ctx: GenContext, engaged: int) -> tuple[float, float]:
    rate = ctx.mesh.device_flops_per_s
    return ctx.flops / engaged / rate, ctx.bwd_flops / engaged / rate


def _all_reduce(mesh: DeviceMesh, axes: Sequence[int], nbytes: int) -> CommOp:
    axes = tuple(sorted(axes))
    return CommOp(CollectiveKind.ALL_REDUCE, axes, nbytes, collective_cost(mesh, axes, CollectiveKind.ALL_REDUCE, nbytes))


def align_spec(spec: ShardingSpec, out_shape: Sequence[int], in_shape: Sequence[int]) -> ShardingSpec:
    """Spec an operand must carry to broadcast into an output with ``spec``."""
    if not in_shape:
        return scalar_spec(spec.mesh_rank)
    r = len(in_shape)
    dims = []
    for d, extent, out_extent in zip(spec.dims[-r:], in_shape, list(out_shape)[-r:]):
        dims.append(REPLICATE if extent != out_extent else d)
    return ShardingSpec(tuple(dims), spec.mesh_rank)


# -- contraction family -------------------------------------------------------


def einsum_strategies(ctx: GenContext, operands: Sequence[Sequence[str]], out_labels: Sequence[str],
                      slots: Sequence[int]) -> list[OpStrategy]:
    mesh = ctx.mesh
    metas = ctx.metas
    out_meta = ctx.node.out
    extent: dict[str, int] = {}
    for labels, slot in zip(operands, slots):
        extent.update(zip(labels, metas[slot].shape))
    extent.update(zip(out_labels, out_meta.shape))
    labels = list(dict.fromkeys(l for ls in list(operands) + [out_labels] for l in ls))
    out: list[OpStrategy] = []
    for choice in itertools.product(range(-1, len(labels)), repeat=mesh.rank):
        assign: dict[str, tuple[int, ...]] = {l: () for l in labels}
        for axis, li in enumerate(choice):
            if li >= 0:
                assign[labels[li]] += (axis,)
        if any(extent[l] % mesh.axes_size(a) for l, a in assign.items()):
            continue
        specs = [ShardingSpec(tuple(assign[l] for l in ls), mesh.rank) for ls in operands]
        out_spec = ShardingSpec(tuple(assign[l] for l in out_labels), mesh.rank)
        reduce_axes = tuple(sorted(a for l, ax in assign.items() if l not in out_labels for a in ax))
        engaged = mesh.axes_size([a for ax in assign.values() for a in ax])
        fwd, bwd = _times(ctx, engaged)
        comm = 0.0
        if reduce_axes:
            comm = _all_reduce(mesh, reduce_axes, out_spec.local_bytes(out_meta, mesh)).time_s
        bwd_comm = []
        for labels_i, slot, spec in zip(operands, slots, specs):
            if slot in ctx.param_slots or not ctx.input_differentiable(slot):
                continue
            missing = [a for l, ax in assign.items() if l not in labels_i for a in ax]
            if missing and mesh.axes_size(missing) > 1:
                bwd_comm.append(_all_reduce(mesh, missing, spec.local_bytes(metas[slot], mesh)))
        input_specs: list[ShardingSpec | None] = [None] * len(ctx.node.inputs)
        for slot, spec in zip(slots, specs):
            input_specs[slot] = spec
        name = " x ".join(str(s) for s in specs) + f" -> {out_spec}" + (f" +all-reduce{list(reduce_axes)}" if reduce_axes else "")
        out.append(OpStrategy(
            node=ctx.node.id,
            name=name,
            input_specs=tuple(input_specs),
            output_spec=out_spec,
            compute_time_s=fwd,
            comm_time_s=comm,
            memory_bytes=out_spec.local_bytes(out_meta, mesh),
            partial_sum=bool(reduce_axes),
            reduce_axes=reduce_axes,
            bwd_compute_time_s=bwd,
            bwd_comm=tuple(bwd_comm),
        ))
    return out


def gen_matmul_family(ctx: GenContext) -> list[OpStrategy]:
    x, w = ctx.metas[0], ctx.metas[1]
    if ctx.node.kind is Kind.BMM:
        return einsum_strategies(ctx, [("b", "m", "k"), ("b", "k", "n")], ("b", "m", "n"), (0, 1))
    lead = tuple(f"d{i}" for i in range(x.rank - 2))
    return einsum_strategies(ctx, [lead + ("m", "k"), ("k", "n")], lead + ("m", "n"), (0, 1))


def gen_embedding(ctx: GenContext) -> list[OpStrategy]:
    ids = ctx.metas[1]
    idx = tuple(f"i{k}" for k in range(ids.rank))
    return einsum_strategies(ctx, [("v", "h"), idx], idx + ("h",), (0, 1))


# -- shape-preserving and layout operators ----------------------------------


def _simple(ctx: GenContext, in_specs: Sequence[ShardingSpec | None], out_spec: ShardingSpec,
            engaged: int | None = None, reduce_axes: Sequence[int] = ()) -> OpStrategy:
    mesh = ctx.mesh
    out_meta = ctx.node.out
    engaged = out_spec.shard_factor(mesh) if engaged is None else engaged
    fwd, bwd = _times(ctx, engaged)
    comm = 0.0
    if reduce_axes:
        comm = _all_reduce(mesh, reduce_axes, out_spec.local_bytes(out_meta, mesh)).time_s
    name = ", ".join(str(s) if s is not None else "*" for s in in_specs) + f" -> {out_spec}"
    return OpStrategy(
        node=ctx.node.id,
        name=name,
        input_specs=tuple(in_specs),
        output_spec=out_spec,
        compute_time_s=fwd,
        comm_time_s=comm,
        memory_bytes=out_spec.local_bytes(out_meta, mesh) if out_meta else 0,
        partial_sum=bool(reduce_axes),
        reduce_axes=tuple(sorted(reduce_axes)),
        bwd_compute_time_s=bwd,
    )


def gen_source(ctx: GenContext) -> list[OpStrategy]:
    out = ctx.node.out
    if out is None:
        return [_simple(ctx, (), scalar_spec(ctx.mesh.rank))]
    return [_simple(ctx, (), s) for s in enumerate_specs(out.shape, ctx.mesh, ordered_only=True)]


def gen_unary(ctx: GenContext) -> list[OpStrategy]:
    out = ctx.node.out
    return [_simple(ctx, (s,), s) for s in enumerate_specs(out.shape, ctx.mesh, ordered_only=True)]


def gen_binary(ctx: GenContext) -> list[OpStrategy]:
    out = ctx.node.out
    res = []
    for s in enumerate_specs(out.shape, ctx.mesh, ordered_only=True):
        ins = [align_spec(s, out.shape, m.shape) if m is not None else None for m in ctx.metas]
        res.append(_simple(ctx, ins, s))
    return res


def gen_transpose(ctx: GenContext) -> list[OpStrategy]:
    x = ctx.metas[0]
    perm = ctx.node.attrs["perm"]
    res = []
    for s in enumerate_specs(x.shape, ctx.mesh, ordered_only=True):
        out_spec = ShardingSpec(tuple(s.dims[p] for p in perm), s.mesh_rank)
        res.append(_simple(ctx, (s,), out_spec))
    return res


def reshape_groups(in_shape: Sequence[int], out_shape: Sequence[int]) -> list[tuple[list[int], list[int]]]:
    """Pair minimal runs of input and output dims with equal products."""
    groups: list[tuple[list[int], list[int]]] = []
    i = j = 0
    n, m = len(in_shape), len(out_shape)
    while i < n and j < m:
        gi, gj = [i], [j]
        pi, pj = in_shape[i], out_shape[j]
        i, j = i + 1, j + 1
        while pi != pj:
            if pi < pj:
                gi.append(i)
                pi *= in_shape[i]
                i += 1
            else:
                gj.append(j)
                pj *= out_shape[j]
                j += 1
        groups.append((gi, gj))
    # whatever is left is unit extents
    if i < n or j < m:
        if not groups:
            groups.append(([], []))
        groups[-1][0].extend(range(i, n))
        groups[-1][1].extend(range(j, m))
    return groups


def map_reshape_spec(in_shape: Sequence[int], out_shape: Sequence[int], spec: ShardingSpec,
                     mesh: DeviceMesh) -> ShardingSpec | None:
    """Output spec of a reshape whose input carries ``spec``; None if not expressible."""
    dims: list[tuple[int, ...]] = [REPLICATE] * len(out_shape)
    for gi, gj in reshape_groups(in_shape, out_shape):
        sharded = [i for i in gi if spec.dims[i]]
        if not sharded:
            continue
        major_in = next((i for i in gi if in_shape[i] > 1), None)
        major_out = next((j for j in gj if out_shape[j] > 1), None)
        if len(sharded) > 1 or sharded[0] != major_in or major_out is None:
            return None
        axes = spec.dims[sharded[0]]
        if out_shape[major_out] % mesh.axes_size(axes):
            return None
        dims[major_out] = axes
    return ShardingSpec(tuple(dims), spec.mesh_rank)


def gen_reshape(ctx: GenContext) -> list[OpStrategy]:
    x, out = ctx.metas[0], ctx.node.out
    res = []
    for s in enumerate_specs(x.shape, ctx.mesh, ordered_only=True):
        mapped = map_reshape_spec(x.shape, out.shape, s, ctx.mesh)
        if mapped is not None and mapped.is_valid(out.shape, ctx.mesh):
            res.append(_simple(ctx, (s,), mapped))
    return res


def gen_reduction(ctx: GenContext) -> list[OpStrategy]:
    x, out = ctx.metas[0], ctx.node.out
    axes = sorted({a % x.rank for a in ctx.node.attrs["axes"]})
    keep = ctx.node.attrs.get("keepdim", False)
    res = []
    for s in enumerate_specs(x.shape, ctx.mesh, ordered_only=True):
        reduce_axes = [a for i in axes for a in s.dims[i]]
        if keep:
            dims = tuple(REPLICATE if i in axes else d for i, d in enumerate(s.dims))
        else:
            dims = tuple(d for i, d in enumerate(s.dims) if i not in axes) or (REPLICATE,)
        out_spec = ShardingSpec(dims, s.mesh_rank)
        res.append(_simple(ctx, (s,), out_spec, engaged=s.shard_factor(ctx.mesh), reduce_axes=reduce_axes))
    return res


def gen_softmax(ctx: GenContext) -> list[OpStrategy]:
    x = ctx.metas[0]
    axis = ctx.node.attrs.get("axis", -1) % x.rank
    res = []
    for s in enumerate_specs(x.shape, ctx.mesh, ordered_only=True):
        if s.dims[axis]:
            continue
        ins = [s] + [align_spec(s, x.shape, m.shape) for m in ctx.metas[1:]]
        res.append(_simple(ctx, ins, s))
    return res


def gen_layernorm(ctx: GenContext) -> list[OpStrategy]:
    x = ctx.metas[0]
    res = []
    for s in enumerate_specs(x.shape, ctx.mesh, ordered_only=True):
        if s.dims[-1]:
            continue
        ins = [s] + [ShardingSpec.replicated(1, s.mesh_rank) for _ in ctx.metas[1:]]
        res.append(_simple(ctx, ins, s))
    return res


def gen_getitem(ctx: GenContext) -> list[OpStrategy]:
    x = ctx.metas[0]
    dim = ctx.node.attrs["dim"] % x.rank
    res = []
    for s in enumerate_specs(x.shape, ctx.mesh, ordered_only=True):
        if not s.dims[dim] and s.is_valid(ctx.node.out.shape, ctx.mesh):
            res.append(_simple(ctx, (s,), s))
    return res


def gen_nontensor(ctx: GenContext) -> list[OpStrategy]:
    return [_simple(ctx, (None,) * len(ctx.node.inputs), scalar_spec(ctx.mesh.rank), engaged=1)]


Generator = Callable[[GenContext], list[OpStrategy]]

GENERATORS: dict[str, Generator] = {
    "source": gen_source,
    "matmul-family": gen_matmul_family,
    "embedding": gen_embedding,
    "elementwise-unary": gen_unary,
    "elementwise-binary": gen_binary,
    "reshape": gen_reshape,
    "transpose": gen_transpose,
    "reduction": gen_reduction,
    "softmax": gen_softmax,
    "layernorm": gen_layernorm,
    "getitem": gen_getitem,
    "non-tensor": gen_nontensor,
}

DISPATCH: dict[Kind, str] = {
    Kind.PLACEHOLDER: "source",
    Kind.PARAMETER: "source",
    Kind.CONSTANT: "source",
    Kind.MATMUL: "matmul-family",
    Kind.BMM: "matmul-family",
    Kind.EMBEDDING: "embedding",
    Kind.UNARY: "elementwise-unary",
    Kind.BINARY: "elementwise-binary",
    Kind.RESHAPE: "reshape",
    Kind.TRANSPOSE: "transpose",
    Kind.REDUCTION: "reduction",
    Kind.SOFTMAX: "softmax",
    Kind.LAYERNORM: "layernorm",
    Kind.GETITEM: "getitem",
    Kind.GETATTR: "non-tensor",
    Kind.OUTPUT: "non-tensor",
}


def generate_strategies(graph: ComputationGraph, node_id: str, mesh: DeviceMesh,
                        param_slots: frozenset[int] = frozenset()) -> list[OpStrategy]:
    node = graph[node_id]
    try:
        gen = GENERATORS[DISPATCH[node.kind]]
    except KeyError:
        raise UnsupportedKindError(f"no strategy generator for kind {node.kind.value}") from None
    if node.kind in (Kind.UNARY, Kind.BINARY) and node.out is None:
        gen = gen_nontensor
    return gen(GenContext(graph, node, mesh, frozenset(param_slots)))
