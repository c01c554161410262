"""Activation checkpointing: chain linearization, stage costs and the optimal schedule."""
from .common import NodeGroup, check_linear, default_seeds, linearize, propagate_common_nodes
from .rotor import CheckpointSchedule, Decision, rotor_solve, schedule_decisions, tree_memory, tree_time
from .stages import StageCost, StageModel, build_stages, resident_bytes, stage_costs

__all__ = [
    "NodeGroup", "check_linear", "default_seeds", "linearize", "propagate_common_nodes",
    "CheckpointSchedule", "Decision", "rotor_solve", "schedule_decisions", "tree_memory", "tree_time",
    "StageCost", "StageModel", "build_stages", "resident_bytes", "stage_costs",
]
