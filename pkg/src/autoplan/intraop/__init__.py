"""Intra-operator parallelism: strategies, strategy table and exact selection."""
from .generators import GENERATORS, CommOp, OpStrategy, align_spec, generate_strategies, map_reshape_spec
from .ilp import IntraOpSolution, load_solution, min_feasible_budget, solve, solve_problem
from .simplify import SimplifiedGraph, simplify_graph
from .table import EdgeCost, SolverProblem, StrategyTable, build_strategy_table

__all__ = [
    "GENERATORS", "CommOp", "OpStrategy", "align_spec", "generate_strategies", "map_reshape_spec",
    "IntraOpSolution", "load_solution", "min_feasible_budget", "solve", "solve_problem",
    "SimplifiedGraph", "simplify_graph",
    "EdgeCost", "SolverProblem", "StrategyTable", "build_strategy_table",
]
