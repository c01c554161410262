"""Joint SPMD sharding and activation-checkpoint planning for computation graphs."""
from .ckpt import CheckpointSchedule, StageCost, linearize, propagate_common_nodes, rotor_solve
from .cluster import CollectiveKind, DeviceMesh, Topology, build_mesh, collective_cost
from .graph import ComputationGraph, TensorMeta, infer_meta, load_graph, parse_graph, profile_graph
from .intraop import IntraOpSolution, build_strategy_table, solve
from .layout import LayoutManager, ShardingSpec, find_transform_path
from .planner import ExecutionPlan, SweepConfig, emit_plan, sweep

__version__ = "0.1.0"

__all__ = [
    "CheckpointSchedule", "StageCost", "linearize", "propagate_common_nodes", "rotor_solve",
    "CollectiveKind", "DeviceMesh", "Topology", "build_mesh", "collective_cost",
    "ComputationGraph", "TensorMeta", "infer_meta", "load_graph", "parse_graph", "profile_graph",
    "IntraOpSolution", "build_strategy_table", "solve",
    "LayoutManager", "ShardingSpec", "find_transform_path",
    "ExecutionPlan", "SweepConfig", "emit_plan", "sweep",
]
