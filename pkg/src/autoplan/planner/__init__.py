"""Budget sweep, compilation passes and plan emission."""
from .passes import ParamShard, ReshapeRewrites, distributed_reshapes, insert_comm_nodes, rewrite_reshapes, shard_parameters
from .plan import ExecutionPlan, assemble_plan, dumps_plan, emit_plan, format_report, loads_plan, replay_memory, schedule_trace
from .sweep import Candidate, SweepConfig, bisect_min_budget, evaluate_candidate, sweep

__all__ = [
    "ParamShard", "ReshapeRewrites", "distributed_reshapes", "insert_comm_nodes", "rewrite_reshapes", "shard_parameters",
    "ExecutionPlan", "assemble_plan", "dumps_plan", "emit_plan", "format_report", "loads_plan", "replay_memory",
    "schedule_trace",
    "Candidate", "SweepConfig", "bisect_min_budget", "evaluate_candidate", "sweep",
]
