from .ir import (
    SCHEMA_VERSION,
    SOURCE_KINDS,
    ComputationGraph,
    GraphNode,
    Kind,
    TensorMeta,
    load_graph,
    parse_graph,
)
from .meta import infer_meta
from .profile import GraphProfile, NodeProfile, profile_graph, profile_node, saved_tensors

__all__ = [
    "SCHEMA_VERSION",
    "SOURCE_KINDS",
    "ComputationGraph",
    "GraphNode",
    "GraphProfile",
    "Kind",
    "NodeProfile",
    "TensorMeta",
    "infer_meta",
    "load_graph",
    "parse_graph",
    "profile_graph",
    "profile_node",
    "saved_tensors",
]
