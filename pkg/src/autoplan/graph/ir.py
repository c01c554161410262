"""Computation-graph IR: tensor metadata, nodes, graphs and the JSON document schema."""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Mapping

from ..errors import CycleError, DanglingRefError, SchemaError, UnsupportedKindError

SCHEMA_VERSION = 1
DTYPES = ("float", "int", "bool")


class Kind(str, Enum):
    PLACEHOLDER = "placeholder"
    PARAMETER = "parameter"
    MATMUL = "matmul"
    BMM = "batched-matmul"
    UNARY = "elementwise-unary"
    BINARY = "elementwise-binary"
    RESHAPE = "reshape"
    TRANSPOSE = "transpose"
    REDUCTION = "reduction"
    SOFTMAX = "softmax"
    LAYERNORM = "layernorm"
    EMBEDDING = "embedding-lookup"
    GETITEM = "getitem"
    GETATTR = "getattr"
    CONSTANT = "constant"
    OUTPUT = "output"
    # inserted by the communication pass, never produced by tracing
    COLLECTIVE = "collective"


SOURCE_KINDS = frozenset({Kind.PLACEHOLDER, Kind.PARAMETER, Kind.CONSTANT})
NONDIFF_KINDS = frozenset({Kind.GETATTR, Kind.GETITEM, Kind.CONSTANT})

# allowed / required attribute keys per kind; anything else is a schema error
ATTR_KEYS: dict[Kind, tuple[frozenset[str], frozenset[str]]] = {
    Kind.PLACEHOLDER: (frozenset(), frozenset()),
    Kind.PARAMETER: (frozenset(), frozenset()),
    Kind.CONSTANT: (frozenset({"value"}), frozenset()),
    Kind.MATMUL: (frozenset(), frozenset()),
    Kind.BMM: (frozenset(), frozenset()),
    Kind.UNARY: (frozenset({"op"}), frozenset()),
    Kind.BINARY: (frozenset({"op"}), frozenset()),
    Kind.RESHAPE: (frozenset({"shape"}), frozenset({"shape"})),
    Kind.TRANSPOSE: (frozenset({"perm"}), frozenset({"perm"})),
    Kind.REDUCTION: (frozenset({"axes", "keepdim", "op"}), frozenset({"axes"})),
    Kind.SOFTMAX: (frozenset({"axis"}), frozenset()),
    Kind.LAYERNORM: (frozenset({"eps"}), frozenset()),
    Kind.EMBEDDING: (frozenset(), frozenset()),
    Kind.GETITEM: (frozenset({"dim", "start", "stop"}), frozenset({"dim"})),
    Kind.GETATTR: (frozenset({"name"}), frozenset()),
    Kind.OUTPUT: (frozenset(), frozenset()),
    Kind.COLLECTIVE: (
        frozenset({"collective", "axes", "bytes", "time_s", "src_spec", "dst_spec", "reason"}),
        frozenset({"collective", "axes"}),
    ),
}

NODE_KEYS = frozenset({"id", "kind", "inputs", "attrs", "outputs", "differentiable", "in_place"})
META_KEYS = frozenset({"shape", "dtype_bytes", "requires_grad", "dtype"})
GRAPH_KEYS = frozenset({"version", "placeholders", "nodes", "output"})


@dataclass(frozen=True)
class TensorMeta:
    shape: tuple[int, ...]
    dtype_bytes: int = 4
    requires_grad: bool = False
    dtype: str = "float"

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if any(s < 1 for s in self.shape):
            raise SchemaError(f"tensor extents must be >= 1, got {self.shape}")
        if self.dtype_bytes not in (1, 2, 4, 8):
            raise SchemaError(f"dtype_bytes must be one of 1,2,4,8, got {self.dtype_bytes}")
        if self.dtype not in DTYPES:
            raise SchemaError(f"unknown dtype {self.dtype!r}")

    @property
    def rank(self) -> int:
        return len(self.shape)

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.numel * self.dtype_bytes

    def to_dict(self) -> dict:
        d = {"shape": list(self.shape), "dtype_bytes": self.dtype_bytes, "requires_grad": self.requires_grad}
        if self.dtype != "float":
            d["dtype"] = self.dtype
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> TensorMeta:
        if not isinstance(d, Mapping):
            raise SchemaError(f"tensor meta must be an object, got {d!r}")
        extra = set(d) - META_KEYS
        if extra:
            raise SchemaError(f"unknown tensor meta keys {sorted(extra)}")
        if "shape" not in d or not isinstance(d["shape"], list):
            raise SchemaError("tensor meta requires a list 'shape'")
        if not all(isinstance(s, int) and not isinstance(s, bool) for s in d["shape"]):
            raise SchemaError(f"shape entries must be integers: {d['shape']}")
        return cls(
            shape=tuple(d["shape"]),
            dtype_bytes=int(d.get("dtype_bytes", 4)),
            requires_grad=bool(d.get("requires_grad", False)),
            dtype=d.get("dtype", "float"),
        )


@dataclass(frozen=True)
class GraphNode:
    id: str
    kind: Kind
    inputs: tuple[tuple[str, int], ...] = ()
    attrs: Mapping[str, Any] = field(default_factory=dict)
    outputs: tuple[TensorMeta, ...] = ()
    differentiable: bool = True
    in_place: bool = False

    @property
    def parents(self) -> list[str]:
        """Distinct producer ids in input order."""
        return list(dict.fromkeys(src for src, _ in self.inputs))

    @property
    def out(self) -> TensorMeta | None:
        return self.outputs[0] if self.outputs else None

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "kind": self.kind.value,
            "inputs": [[src, idx] for src, idx in self.inputs],
            "attrs": dict(self.attrs),
            "outputs": [m.to_dict() for m in self.outputs],
        }
        if not self.differentiable and self.kind not in NONDIFF_KINDS:
            d["differentiable"] = False
        if self.in_place:
            d["in_place"] = True
        return d


@dataclass(frozen=True, eq=False)
class ComputationGraph:
    nodes: Mapping[str, GraphNode]
    placeholders: tuple[str, ...]
    output: str

    @classmethod
    def build(cls, nodes: Iterable[GraphNode], output: str) -> ComputationGraph:
        nodes = list(nodes)
        table: dict[str, GraphNode] = {}
        for n in nodes:
            if n.id in table:
                raise SchemaError(f"duplicate node id {n.id!r}")
            table[n.id] = n
        ph = tuple(n.id for n in nodes if n.kind is Kind.PLACEHOLDER)
        g = cls(table, ph, output)
        g.validate()
        return g

    def validate(self) -> None:
        for n in self.nodes.values():
            for src, idx in n.inputs:
                if src not in self.nodes:
                    raise DanglingRefError(f"node {n.id!r} references missing node {src!r}")
                if idx < 0:
                    raise SchemaError(f"negative output index on edge {src}->{n.id}")
                prod = self.nodes[src]
                if prod.outputs and idx >= len(prod.outputs):
                    raise DanglingRefError(f"node {n.id!r} reads output {idx} of {src!r} which has {len(prod.outputs)}")
            if n.kind not in SOURCE_KINDS and not n.inputs:
                raise SchemaError(f"node {n.id!r} of kind {n.kind.value} has no inputs")
            if n.kind in SOURCE_KINDS and n.inputs:
                raise SchemaError(f"source node {n.id!r} cannot have inputs")
        if self.output not in self.nodes:
            raise DanglingRefError(f"graph output references missing node {self.output!r}")
        for p in self.placeholders:
            if p not in self.nodes or self.nodes[p].kind is not Kind.PLACEHOLDER:
                raise SchemaError(f"placeholder list names {p!r} which is not a placeholder node")
        self.topo_order  # raises CycleError

    def __getitem__(self, node_id: str) -> GraphNode:
        return self.nodes[node_id]

    def __iter__(self):
        return iter(self.topo_order)

    def __len__(self) -> int:
        return len(self.nodes)

    @cached_property
    def topo_order(self) -> tuple[str, ...]:
        """Kahn's algorithm; ties broken by document position so traced order is kept."""
        pos = {nid: i for i, nid in enumerate(self.nodes)}
        indeg = {nid: len(n.parents) for nid, n in self.nodes.items()}
        ready = [(pos[nid], nid) for nid, d in indeg.items() if d == 0]
        heapq.heapify(ready)
        order = []
        children = self.children_map
        while ready:
            _, nid = heapq.heappop(ready)
            order.append(nid)
            for c in dict.fromkeys(c for c, _ in children[nid]):
                indeg[c] -= 1
                if indeg[c] == 0:
                    heapq.heappush(ready, (pos[c], c))
        if len(order) != len(self.nodes):
            stuck = sorted(nid for nid, d in indeg.items() if d > 0)
            raise CycleError(f"graph has a cycle through {stuck}")
        return tuple(order)

    @cached_property
    def children_map(self) -> dict[str, list[tuple[str, int]]]:
        """producer id -> [(consumer id, input slot)] in document order."""
        out: dict[str, list[tuple[str, int]]] = {nid: [] for nid in self.nodes}
        for n in self.nodes.values():
            for slot, (src, _) in enumerate(n.inputs):
                out[src].append((n.id, slot))
        return out

    def children(self, node_id: str) -> list[str]:
        return list(dict.fromkeys(c for c, _ in self.children_map[node_id]))

    def input_metas(self, node_id: str) -> list[TensorMeta | None]:
        """Meta of every input edge; None for non-tensor values."""
        res = []
        for src, idx in self.nodes[node_id].inputs:
            outs = self.nodes[src].outputs
            res.append(outs[idx] if idx < len(outs) else None)
        return res

    def replace_nodes(self, updates: Mapping[str, GraphNode]) -> ComputationGraph:
        nodes = {nid: updates.get(nid, n) for nid, n in self.nodes.items()}
        return ComputationGraph(nodes, self.placeholders, self.output)

    def to_dict(self) -> dict:
        return {
            "version": SCHEMA_VERSION,
            "placeholders": list(self.placeholders),
            "nodes": [self.nodes[nid].to_dict() for nid in self.nodes],
            "output": self.output,
        }


def _parse_node(d: Any) -> GraphNode:
    if not isinstance(d, Mapping):
        raise SchemaError(f"node must be an object, got {d!r}")
    extra = set(d) - NODE_KEYS
    if extra:
        raise SchemaError(f"node {d.get('id')!r}: unknown keys {sorted(extra)}")
    nid = d.get("id")
    if not isinstance(nid, str) or not nid:
        raise SchemaError(f"node id must be a non-empty string, got {nid!r}")
    try:
        kind = Kind(d.get("kind"))
    except ValueError:
        raise UnsupportedKindError(f"node {nid!r}: unknown kind {d.get('kind')!r}") from None
    inputs = []
    for edge in d.get("inputs", []):
        if (
            not isinstance(edge, (list, tuple))
            or len(edge) != 2
            or not isinstance(edge[0], str)
            or not isinstance(edge[1], int)
        ):
            raise SchemaError(f"node {nid!r}: input edges must be [id, out_idx], got {edge!r}")
        inputs.append((edge[0], edge[1]))
    attrs = d.get("attrs", {})
    if not isinstance(attrs, Mapping):
        raise SchemaError(f"node {nid!r}: attrs must be an object")
    allowed, required = ATTR_KEYS[kind]
    if set(attrs) - allowed:
        raise SchemaError(f"node {nid!r}: unknown attrs {sorted(set(attrs) - allowed)} for kind {kind.value}")
    if required - set(attrs):
        raise SchemaError(f"node {nid!r}: missing attrs {sorted(required - set(attrs))}")
    outputs = d.get("outputs", [])
    if not isinstance(outputs, list):
        raise SchemaError(f"node {nid!r}: outputs must be a list")
    metas = tuple(TensorMeta.from_dict(m) for m in outputs)
    if kind in (Kind.PLACEHOLDER, Kind.PARAMETER) and not metas:
        raise SchemaError(f"node {nid!r}: {kind.value} requires output metadata")
    for flag in ("differentiable", "in_place"):
        if flag in d and not isinstance(d[flag], bool):
            raise SchemaError(f"node {nid!r}: {flag} must be boolean")
    return GraphNode(
        id=nid,
        kind=kind,
        inputs=tuple(inputs),
        attrs=dict(attrs),
        outputs=metas,
        differentiable=d.get("differentiable", True),
        in_place=d.get("in_place", False),
    )


def parse_graph(doc: str | bytes | Mapping[str, Any]) -> ComputationGraph:
    """Validate a graph document (JSON text or decoded mapping) into a ComputationGraph."""
    if isinstance(doc, (str, bytes)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"graph document is not valid JSON: {exc}") from None
    if not isinstance(doc, Mapping):
        raise SchemaError("graph document must be an object")
    extra = set(doc) - GRAPH_KEYS
    if extra:
        raise SchemaError(f"unknown top-level keys {sorted(extra)}")
    if doc.get("version") != SCHEMA_VERSION:
        raise SchemaError(f"unsupported graph schema version {doc.get('version')!r}")
    if not isinstance(doc.get("nodes"), list):
        raise SchemaError("'nodes' must be a list")
    nodes = [_parse_node(n) for n in doc["nodes"]]
    placeholders = doc.get("placeholders", [])
    if not isinstance(placeholders, list) or not all(isinstance(p, str) for p in placeholders):
        raise SchemaError("'placeholders' must be a list of node ids")
    output = doc.get("output")
    if not isinstance(output, str):
        raise SchemaError("'output' must be a node id")
    g = ComputationGraph.build(nodes, output)
    declared = tuple(placeholders)
    if set(declared) != set(g.placeholders):
        missing = sorted(set(g.placeholders) ^ set(declared))
        if any(p not in g.nodes for p in declared):
            raise DanglingRefError(f"placeholder list references missing nodes {missing}")
        raise SchemaError(f"placeholder list disagrees with placeholder nodes: {missing}")
    g = ComputationGraph(g.nodes, declared, g.output)
    return g


def load_graph(path: str | Path) -> ComputationGraph:
    return parse_graph(Path(path).read_text())


def with_outputs(node: GraphNode, outputs: Iterable[TensorMeta], differentiable: bool) -> GraphNode:
    return replace(node, outputs=tuple(outputs), differentiable=differentiable)
