"""Meta execution: propagate shapes/dtypes through the graph without touching data."""
from __future__ import annotations

import math

from ..errors import ShapeMismatchError, UnsupportedKindError
from .ir import NONDIFF_KINDS, ComputationGraph, GraphNode, Kind, TensorMeta, with_outputs

COMPARISON_OPS = frozenset({"eq", "ne", "lt", "le", "gt", "ge", "not", "and", "or", "xor"})


def broadcast_shapes(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    out = []
    for i in range(1, max(len(a), len(b)) + 1):
        x = a[-i] if i <= len(a) else 1
        y = b[-i] if i <= len(b) else 1
        if x != y and 1 not in (x, y):
            raise ShapeMismatchError(f"cannot broadcast {a} with {b}")
        out.append(max(x, y))
    return tuple(reversed(out))


def _norm_axis(axis: int, rank: int, nid: str) -> int:
    if not -rank <= axis < rank:
        raise ShapeMismatchError(f"{nid}: axis {axis} out of range for rank {rank}")
    return axis % rank


def resolve_reshape(src: tuple[int, ...], target: list[int], nid: str = "?") -> tuple[int, ...]:
    target = list(target)
    if target.count(-1) > 1:
        raise ShapeMismatchError(f"{nid}: at most one -1 allowed in reshape target {target}")
    total = math.prod(src)
    if -1 in target:
        known = math.prod(t for t in target if t != -1)
        if known == 0 or total % known:
            raise ShapeMismatchError(f"{nid}: cannot reshape {src} to {target}")
        target[target.index(-1)] = total // known
    if any(t < 1 for t in target) or math.prod(target) != total:
        raise ShapeMismatchError(f"{nid}: reshape {src} -> {target} changes element count")
    return tuple(target)


def _tensor_inputs(node: GraphNode, metas: list[TensorMeta | None], n: int) -> list[TensorMeta]:
    if len(metas) < n or any(m is None for m in metas[:n]):
        raise ShapeMismatchError(f"{node.id}: {node.kind.value} needs {n} tensor inputs")
    return metas[:n]  # type: ignore[return-value]


def infer_node(node: GraphNode, metas: list[TensorMeta | None]) -> tuple[TensorMeta, ...]:
    """Output metas of one node from its input metas."""
    k = node.kind
    a = node.attrs
    if k in (Kind.PLACEHOLDER, Kind.PARAMETER, Kind.CONSTANT):
        return node.outputs
    if k is Kind.OUTPUT or k is Kind.GETATTR:
        return ()
    if k is Kind.COLLECTIVE:
        (x,) = _tensor_inputs(node, metas, 1)
        return (x,)
    if k is Kind.MATMUL:
        x, w = _tensor_inputs(node, metas, 2)
        if x.rank < 2 or w.rank != 2:
            raise ShapeMismatchError(f"{node.id}: matmul expects [...,m,k] x [k,n], got {x.shape} x {w.shape}")
        if x.shape[-1] != w.shape[0]:
            raise ShapeMismatchError(f"{node.id}: matmul inner dims differ ({x.shape[-1]} vs {w.shape[0]})")
        return (TensorMeta(x.shape[:-1] + (w.shape[1],), x.dtype_bytes, x.requires_grad or w.requires_grad),)
    if k is Kind.BMM:
        x, y = _tensor_inputs(node, metas, 2)
        if x.rank != 3 or y.rank != 3 or x.shape[0] != y.shape[0]:
            raise ShapeMismatchError(f"{node.id}: bmm expects [b,m,k] x [b,k,n], got {x.shape} x {y.shape}")
        if x.shape[2] != y.shape[1]:
            raise ShapeMismatchError(f"{node.id}: bmm inner dims differ ({x.shape[2]} vs {y.shape[1]})")
        return (TensorMeta((x.shape[0], x.shape[1], y.shape[2]), x.dtype_bytes, x.requires_grad or y.requires_grad),)
    if k is Kind.UNARY:
        if not metas or metas[0] is None:
            return ()
        x = metas[0]
        dtype = "bool" if a.get("op") in COMPARISON_OPS else x.dtype
        return (TensorMeta(x.shape, 1 if dtype == "bool" else x.dtype_bytes, x.requires_grad and dtype == "float", dtype),)
    if k is Kind.BINARY:
        tensors = [m for m in metas if m is not None]
        if len(metas) != 2:
            raise ShapeMismatchError(f"{node.id}: binary op needs 2 inputs")
        if not tensors:
            return ()  # scalar arithmetic
        shape = tensors[0].shape if len(tensors) == 1 else broadcast_shapes(tensors[0].shape, tensors[1].shape)
        dtype = "bool" if a.get("op") in COMPARISON_OPS else tensors[0].dtype
        rg = any(t.requires_grad for t in tensors) and dtype == "float"
        return (TensorMeta(shape, 1 if dtype == "bool" else tensors[0].dtype_bytes, rg, dtype),)
    if k is Kind.RESHAPE:
        (x,) = _tensor_inputs(node, metas, 1)
        return (TensorMeta(resolve_reshape(x.shape, a["shape"], node.id), x.dtype_bytes, x.requires_grad, x.dtype),)
    if k is Kind.TRANSPOSE:
        (x,) = _tensor_inputs(node, metas, 1)
        perm = list(a["perm"])
        if sorted(perm) != list(range(x.rank)):
            raise ShapeMismatchError(f"{node.id}: perm {perm} is not a permutation of rank {x.rank}")
        return (TensorMeta(tuple(x.shape[p] for p in perm), x.dtype_bytes, x.requires_grad, x.dtype),)
    if k is Kind.REDUCTION:
        (x,) = _tensor_inputs(node, metas, 1)
        axes = sorted({_norm_axis(ax, x.rank, node.id) for ax in a["axes"]})
        if a.get("keepdim", False):
            shape = tuple(1 if i in axes else s for i, s in enumerate(x.shape))
        else:
            shape = tuple(s for i, s in enumerate(x.shape) if i not in axes) or (1,)
        return (TensorMeta(shape, x.dtype_bytes, x.requires_grad, x.dtype),)
    if k is Kind.SOFTMAX:
        x = _tensor_inputs(node, metas, 1)[0]
        _norm_axis(a.get("axis", -1), x.rank, node.id)
        if len(metas) > 1:
            mask = metas[1]
            if mask is None or broadcast_shapes(x.shape, mask.shape) != x.shape:
                raise ShapeMismatchError(f"{node.id}: mask does not broadcast to {x.shape}")
        return (TensorMeta(x.shape, x.dtype_bytes, x.requires_grad),)
    if k is Kind.LAYERNORM:
        x = _tensor_inputs(node, metas, 1)[0]
        for extra in metas[1:]:
            if extra is None or extra.shape != x.shape[-1:]:
                raise ShapeMismatchError(f"{node.id}: layernorm affine params must be [{x.shape[-1]}]")
        rg = x.requires_grad or any(m.requires_grad for m in metas[1:] if m is not None)
        return (TensorMeta(x.shape, x.dtype_bytes, rg),)
    if k is Kind.EMBEDDING:
        table, ids = _tensor_inputs(node, metas, 2)
        if table.rank != 2 or ids.dtype == "float":
            raise ShapeMismatchError(f"{node.id}: embedding expects table [V,H] and integer ids")
        return (TensorMeta(ids.shape + (table.shape[1],), table.dtype_bytes, table.requires_grad),)
    if k is Kind.GETITEM:
        (x,) = _tensor_inputs(node, metas, 1)
        dim = _norm_axis(a["dim"], x.rank, node.id)
        start = a.get("start", 0)
        stop = a.get("stop", x.shape[dim])
        if not 0 <= start < stop <= x.shape[dim]:
            raise ShapeMismatchError(f"{node.id}: slice [{start}:{stop}] out of range for extent {x.shape[dim]}")
        shape = list(x.shape)
        shape[dim] = stop - start
        return (TensorMeta(tuple(shape), x.dtype_bytes, x.requires_grad, x.dtype),)
    raise UnsupportedKindError(f"no shape rule for kind {k.value}")


def is_differentiable(node: GraphNode, outputs: tuple[TensorMeta, ...]) -> bool:
    if node.kind in NONDIFF_KINDS or not node.differentiable:
        return False
    if outputs and all(m.dtype != "float" for m in outputs):
        return False
    return True


def infer_meta(graph: ComputationGraph) -> ComputationGraph:
    """Annotate every node with inferred output metadata.

    Declared outputs on derived nodes are checked against the inferred ones.
    """
    annotated: dict[str, GraphNode] = dict(graph.nodes)
    for nid in graph.topo_order:
        node = annotated[nid]
        metas = []
        for src, idx in node.inputs:
            outs = annotated[src].outputs
            metas.append(outs[idx] if idx < len(outs) else None)
        outs = infer_node(node, metas)
        if node.outputs and node.kind not in (Kind.PLACEHOLDER, Kind.PARAMETER, Kind.CONSTANT):
            declared = tuple(m.shape for m in node.outputs)
            if declared != tuple(m.shape for m in outs):
                raise ShapeMismatchError(f"{nid}: declared output shapes {declared} != inferred {[m.shape for m in outs]}")
        annotated[nid] = with_outputs(node, outs, is_differentiable(node, outs))
    return ComputationGraph(annotated, graph.placeholders, graph.output)
