"""Exact strategy selection: minimise compute + comm + resharding under a memory budget.

Depth-first branch and bound over solver nodes in topological order. The
bound for a partial assignment is the exact cheapest completion of the
remaining nodes with the shared memory budget relaxed to a per-node
feasibility filter, computed by min-sum variable elimination. Among equal-cost optima the
lexicographically smallest assignment (by strategy index in node order) wins,
so results do not depend on search order.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from ..cluster import DeviceMesh
from ..errors import InfeasibleError, SchemaError
from .table import SolverProblem, StrategyTable

log = logging.getLogger(__name__)

REL_TOL = 1e-12  # bounds are summed in search order, totals exactly


@dataclass
class IntraOpSolution:
    selection: dict[str, int]
    strategy_names: dict[str, str]
    total_time_s: float
    peak_memory_bytes: int
    budget_bytes: float
    nodes_explored: int = 0
    mesh: DeviceMesh | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = {
            "selection": dict(self.selection),
            "strategies": dict(self.strategy_names),
            "total_time_s": self.total_time_s,
            "peak_memory_bytes": self.peak_memory_bytes,
            "budget_bytes": self.budget_bytes,
        }
        if self.mesh is not None:
            d["mesh"] = self.mesh.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> IntraOpSolution:
        try:
            return cls(
                selection={k: int(v) for k, v in d["selection"].items()},
                strategy_names=dict(d.get("strategies", {})),
                total_time_s=float(d["total_time_s"]),
                peak_memory_bytes=int(d["peak_memory_bytes"]),
                budget_bytes=float(d["budget_bytes"]),
                mesh=DeviceMesh.from_dict(d["mesh"]) if "mesh" in d else None,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed intra-op solution: {exc!r}") from None


def load_solution(path: str | Path) -> IntraOpSolution:
    return IntraOpSolution.from_dict(json.loads(Path(path).read_text()))


def min_feasible_budget(problem: SolverProblem | StrategyTable) -> int:
    """Smallest budget admitting any assignment (memory is additive per node)."""
    if isinstance(problem, StrategyTable):
        problem = problem.problem()
    return int(sum(int(m.min()) for m in problem.memory))


def _greedy(problem: SolverProblem, budget: float, order_min_mem: np.ndarray) -> list[int] | None:
    n = len(problem.nodes)
    fwd: list[list[tuple[int, np.ndarray]]] = [[] for _ in range(n)]
    bwd: list[list[tuple[int, np.ndarray]]] = [[] for _ in range(n)]
    for i, j, mat in problem.edges:
        fwd[i].append((j, mat))
        bwd[j].append((i, mat))
    choice: list[int] = []
    used = 0
    for k in range(n):
        score = problem.cost[k].copy()
        for i, mat in bwd[k]:
            score += mat[choice[i]]
        room = budget - used - order_min_mem[k + 1]
        score[problem.memory[k] > room] = np.inf
        if not np.isfinite(score).any():
            return None
        c = int(np.argmin(score))
        choice.append(c)
        used += int(problem.memory[k][c])
    return choice


MAX_FACTOR = 1 << 20


def _elimination_order(n: int, edges: list[tuple[int, int, np.ndarray]]) -> list[int]:
    """Greedy min-degree order over the edge interaction graph."""
    adj = {v: set() for v in range(n)}
    for i, j, _ in edges:
        adj[i].add(j)
        adj[j].add(i)
    order = []
    while adj:
        v = min(adj, key=lambda u: (len(adj[u]), u))
        nbrs = adj.pop(v)
        for a in nbrs:
            adj[a].discard(v)
            adj[a] |= nbrs - {a}
        order.append(v)
    return order


def _min_sum(factors: list[tuple[tuple[int, ...], np.ndarray]], order: list[int],
             sizes: list[int]) -> tuple[float, dict[int, int] | None]:
    """Min over all variables of a sum of factors, by variable elimination.

    Returns the minimum and a minimising assignment. A combination that would
    exceed MAX_FACTOR entries is relaxed by minimising each factor separately;
    the value is then only a lower bound and no assignment is returned.
    """
    pool = list(factors)
    total = 0.0
    exact = True
    trail: list[tuple[int, tuple[int, ...], np.ndarray]] = []
    for v in order:
        touching = [f for f in pool if v in f[0]]
        if not touching:
            continue
        pool = [f for f in pool if v not in f[0]]
        scope = tuple(sorted({u for sc, _ in touching for u in sc}))
        if int(np.prod([sizes[u] for u in scope], dtype=np.int64)) > MAX_FACTOR:
            exact = False
            for sc, arr in touching:
                rest = tuple(u for u in sc if u != v)
                out = arr.min(axis=sc.index(v))
                if rest:
                    pool.append((rest, out))
                else:
                    total += float(out)
            continue
        acc = np.zeros([sizes[u] for u in scope])
        for sc, arr in touching:
            perm = sorted(range(len(sc)), key=lambda i: sc[i])
            shape = [sizes[u] if u in sc else 1 for u in scope]
            acc = acc + np.transpose(arr, perm).reshape(shape)
        trail.append((v, scope, acc))
        out = acc.min(axis=scope.index(v))
        rest = tuple(u for u in scope if u != v)
        if rest:
            pool.append((rest, out))
        else:
            total += float(out)
    for _, arr in pool:
        total += float(arr.min())
    if not exact or not math.isfinite(total):
        return total, None
    assign: dict[int, int] = {}
    for v, scope, acc in reversed(trail):
        index = tuple(slice(None) if u == v else assign[u] for u in scope)
        assign[v] = int(np.argmin(acc[index]))
    return total, assign


def branching_order(problem: SolverProblem) -> list[int]:
    """Nodes with the widest memory range first (ties: node order)."""
    spread = [int(m.max() - m.min()) for m in problem.memory]
    return sorted(range(len(problem.nodes)), key=lambda i: (-spread[i], i))


def permute(problem: SolverProblem, order: list[int]) -> SolverProblem:
    where = {old: new for new, old in enumerate(order)}
    return SolverProblem(
        [problem.nodes[i] for i in order],
        [problem.cost[i] for i in order],
        [problem.memory[i] for i in order],
        [(where[i], where[j], mat) for i, j, mat in problem.edges],
    )


class _Search:
    """Branch and bound state for one (problem, budget) instance."""

    def __init__(self, problem: SolverProblem, budget: float):
        self.p = problem
        self.budget = budget
        n = self.n = len(problem.nodes)
        self.cost = problem.cost
        self.mem = problem.memory
        self.sizes = [len(c) for c in self.cost]
        mins = np.array([int(m.min()) for m in self.mem], dtype=np.int64)
        self.suffix = np.concatenate([np.cumsum(mins[::-1])[::-1], [0]])
        self.excess = [m - mk for m, mk in zip(self.mem, mins)]
        self.fwd: list[list[tuple[int, np.ndarray]]] = [[] for _ in range(n)]
        for i, j, mat in problem.edges:
            self.fwd[i].append((j, mat))
        self.elim = _elimination_order(n, problem.edges)
        self.acc = [np.zeros(sz) for sz in self.sizes]
        spread = float(max(e.max() for e in self.excess))
        scale = float(sum(c.max() for c in self.cost) + sum(m.max() for _, _, m in problem.edges))
        self.lam_hi = scale / spread if spread > 0 else 0.0
        self.root_lam = 0.0
        self.choice = [0] * n
        self.best = math.inf
        self.best_choice: list[int] | None = None
        self.explored = 0

    def tol(self, v: float) -> float:
        return REL_TOL * abs(v) if math.isfinite(v) else 0.0

    def offer(self, full: list[int]) -> None:
        total, used = self.p.evaluate(full)
        if used > self.budget:
            return
        best = self.best
        if total < best or (total == best and (self.best_choice is None or full < self.best_choice)):
            self.best = total
            self.best_choice = list(full)

    def relaxed(self, k: int, slack: float, lam: float, completion: bool = False) -> float:
        """Lagrangian bound on nodes after ``k`` using at most ``slack`` bytes beyond their minima."""
        factors = []
        for j in range(k + 1, self.n):
            u = self.cost[j] + self.acc[j] + lam * self.excess[j]
            factors.append(((j,), np.where(self.excess[j] <= slack, u, np.inf)))
        for i, j, mat in self.p.edges:
            if i > k:
                factors.append(((i, j), mat))
        value, assign = _min_sum(factors, [v for v in self.elim if v > k], self.sizes)
        if completion and assign is not None:
            self.offer(self.choice[: k + 1] + [assign[j] for j in range(k + 1, self.n)])
        return value - lam * slack

    def tune(self, k: int, slack: float, iters: int) -> float:
        """Multiplier maximising the concave Lagrangian bound of the subproblem after ``k``."""
        if self.lam_hi <= 0 or k + 1 >= self.n:
            return 0.0
        lo, hi = 0.0, self.lam_hi
        for _ in range(iters):
            a, b = lo + (hi - lo) / 3, hi - (hi - lo) / 3
            if self.relaxed(k, slack, a) < self.relaxed(k, slack, b):
                lo = a
            else:
                hi = b
        return lo

    def run(self) -> None:
        greedy = _greedy(self.p, self.budget, self.suffix)
        if greedy is not None:
            self.offer(greedy)
        self.root_lam = self.tune(-1, float(self.budget - self.suffix[0]), 30)
        self.dfs(0, 0.0, 0)

    def dfs(self, k: int, partial: float, used: int) -> None:
        self.explored += 1
        n = self.n
        if k == n:
            self.offer(list(self.choice))
            return
        acc, choice = self.acc, self.choice
        local = self.cost[k] + acc[k]
        room = self.budget - used - self.suffix[k + 1]
        lams = {0.0, self.root_lam}
        if 0 < k < n - 1:
            lams.add(self.tune(k - 1, float(self.budget - used - self.suffix[k]), 8))
        children = []
        for s in range(self.sizes[k]):
            m = int(self.mem[k][s])
            if m > room:
                continue
            c = partial + float(local[s])
            choice[k] = s
            if k + 1 < n:
                saved = [(j, acc[j]) for j, _ in self.fwd[k]]
                for j, mat in self.fwd[k]:
                    acc[j] = acc[j] + mat[s]
                bound = c + max(self.relaxed(k, float(room - m), lam, completion=True) for lam in sorted(lams))
                for j, row in saved:
                    acc[j] = row
            else:
                bound = c
            children.append((bound, s, c, m))
        children.sort(key=lambda t: (t[0], t[1]))
        for bound, s, c, m in children:
            choice[k] = s
            best = self.best
            if bound > best + self.tol(best):
                break
            if bound >= best - self.tol(best) and self.best_choice is not None and choice[: k + 1] > self.best_choice[: k + 1]:
                continue
            saved = [(j, acc[j]) for j, _ in self.fwd[k]]
            for j, mat in self.fwd[k]:
                acc[j] = acc[j] + mat[s]
            self.dfs(k + 1, c, used + m)
            for j, row in saved:
                acc[j] = row


def solve_problem(problem: SolverProblem, budget: float) -> tuple[list[int], float, int, int]:
    """Returns (choice, total time, memory, search nodes explored)."""
    if not problem.nodes:
        return [], 0.0, 0, 0
    minimum = sum(int(m.min()) for m in problem.memory)
    if minimum > budget:
        raise InfeasibleError(f"memory budget {budget:.0f} B below minimum feasible {minimum} B")
    # beyond the largest possible total the budget is irrelevant; an infinite slack would void the bounds
    budget = min(budget, sum(int(m.max()) for m in problem.memory))
    order = branching_order(problem)
    search = _Search(permute(problem, order), budget)
    search.run()
    if search.best_choice is None:
        raise InfeasibleError(f"no strategy assignment fits the memory budget {budget:.0f} B")
    choice = [0] * len(order)
    for pos, node in enumerate(order):
        choice[node] = search.best_choice[pos]
    total, used = problem.evaluate(choice)
    return choice, total, used, search.explored


def solve(table: StrategyTable | SolverProblem, budget: float) -> IntraOpSolution:
    problem = table.problem() if isinstance(table, StrategyTable) else table
    choice, total, used, explored = solve_problem(problem, budget)
    selection = dict(zip(problem.nodes, choice))
    names = {}
    mesh = None
    if isinstance(table, StrategyTable):
        names = {n: table.strategies[n][c].name for n, c in selection.items()}
        mesh = table.mesh
    log.debug("intra-op solve: %d nodes, %d search nodes, %.6g s", len(choice), explored, total)
    return IntraOpSolution(selection, names, total, used, budget, explored, mesh)
