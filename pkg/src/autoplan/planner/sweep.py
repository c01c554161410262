"""Two-stage search: intra-op solutions over a geometric budget ladder, each followed by a checkpoint solve."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

from ..ckpt.rotor import rotor_solve
from ..ckpt.stages import build_stages
from ..cluster import DeviceMesh
from ..errors import InfeasibleError
from ..graph.ir import ComputationGraph
from ..intraop.ilp import min_feasible_budget, solve
from ..intraop.table import StrategyTable, build_strategy_table
from ..layout import LayoutManager
from .passes import distributed_reshapes, insert_comm_nodes, shard_parameters
from .plan import ExecutionPlan, assemble_plan

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SweepConfig:
    alpha: float = 0.3
    n_max: int = 9
    base_budget_bytes: float | None = None  # default: smallest budget the intra-op solver accepts
    slot_bytes: float | None = None  # checkpoint DP memory slot; default budget / 500
    include_prefix_comm: bool = False
    # give the checkpoint solver B_n instead of the device budget
    shared_budget: bool = False

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.n_max < 0:
            raise ValueError("n_max must be non-negative")

    def budgets(self, base: float) -> list[float]:
        return [base * (1 + self.alpha) ** n for n in range(self.n_max + 1)]


@dataclass
class Candidate:
    n: int
    budget_bytes: float
    status: str  # "ok" | "over-device-budget" | "intraop-infeasible" | "ckpt-infeasible"
    total_time_s: float | None = None
    peak_memory_bytes: int | None = None
    plan: ExecutionPlan | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"n": self.n, "budget_bytes": self.budget_bytes, "status": self.status,
                "total_time_s": self.total_time_s, "peak_memory_bytes": self.peak_memory_bytes}


def bisect_min_budget(table: StrategyTable, lo: float = 0.0, hi: float | None = None, rel_tol: float = 1e-6) -> float:
    """Smallest budget accepted by ``solve`` found by bisection (feasibility is monotone)."""
    hi = float(hi) if hi is not None else float(sum(max(s.memory_bytes for s in v) for v in table.strategies.values()))

    def feasible(b: float) -> bool:
        try:
            solve(table, b)
            return True
        except InfeasibleError:
            return False

    if not feasible(hi):
        raise InfeasibleError("upper bisection bound is infeasible")
    while hi - lo > rel_tol * max(hi, 1.0):
        mid = (lo + hi) / 2
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    return hi


def evaluate_candidate(table: StrategyTable, n: int, budget: float, device_budget_bytes: int, cfg: SweepConfig,
                       layout: LayoutManager, sweep_info: dict) -> Candidate:
    try:
        sol = solve(table, budget)
    except InfeasibleError:
        return Candidate(n, budget, "intraop-infeasible")
    dg = insert_comm_nodes(table, sol, layout)
    model = build_stages(dg)
    ck_budget = (min(budget, device_budget_bytes) if cfg.shared_budget else device_budget_bytes) - model.resident_bytes
    try:
        if ck_budget <= 0:
            raise InfeasibleError("resident bytes exceed the device budget")
        schedule = rotor_solve(model.stages, ck_budget, cfg.slot_bytes, cfg.include_prefix_comm)
    except InfeasibleError:
        return Candidate(n, budget, "ckpt-infeasible")
    plan = assemble_plan(dg, sol, model, schedule, shard_parameters(dg), distributed_reshapes(dg, layout),
                         device_budget_bytes, {**sweep_info, "chosen_n": n})
    return Candidate(n, budget, "ok", plan.total_time_s, plan.peak_memory_bytes, plan)


def sweep(graph: ComputationGraph, mesh: DeviceMesh, device_budget_bytes: int, cfg: SweepConfig | None = None,
          verbose: bool = False, table: StrategyTable | None = None,
          layout: LayoutManager | None = None) -> tuple[ExecutionPlan, list[Candidate]]:
    """Best plan over the budget ladder; the candidate list is always returned, and also embedded when verbose."""
    cfg = cfg or SweepConfig()
    layout = layout or LayoutManager()
    table = table or build_strategy_table(graph, mesh, layout)
    base = cfg.base_budget_bytes if cfg.base_budget_bytes is not None else float(min_feasible_budget(table))
    info = {"alpha": cfg.alpha, "n_max": cfg.n_max, "base_budget_bytes": base,
            "checkpoint_budget": "shared" if cfg.shared_budget else "device"}
    candidates = []
    for n, b in enumerate(cfg.budgets(base)):
        if b > device_budget_bytes:
            candidates.append(Candidate(n, b, "over-device-budget"))
            continue
        c = evaluate_candidate(table, n, b, device_budget_bytes, cfg, layout, info)
        log.info("sweep n=%d budget=%.0f status=%s total=%s", n, b, c.status, c.total_time_s)
        candidates.append(c)
    best = None
    for c in candidates:
        if c.status == "ok" and (best is None or c.total_time_s < best.total_time_s):
            best = c
    if best is None:
        raise InfeasibleError("no budget in the sweep yields a feasible intra-op and checkpoint pair")
    plan = best.plan
    if verbose:
        plan.sweep["candidates"] = [c.to_dict() for c in candidates]
    return plan, candidates
