"""Optimal persistent checkpoint schedule for a chain of stages.

The DP runs over a discretised memory axis.  With slot size ``q``, every
byte quantity is rounded up to whole slots and the budget is rounded down,
so a schedule the DP accepts never exceeds the true budget.

C[s][t][m] is the best time to run forward and backward over stages s..t
with m free slots.  Two moves exist: checkpoint the input of stage s and
sweep forward to s' (storing only a^{s'-1}), or run stage s keeping all of
its intermediates ā^s.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from ..errors import InfeasibleError
from .stages import StageCost

DEFAULT_SLOTS = 500


class Decision(str, Enum):
    ALL = "F_all"
    CK = "F_ck"
    NONE = "F_none"


# schedule tree nodes:
#   ("leaf", s)                      run stage s with everything stored
#   ("all", s, rest)                 F_all on s, then the chain s+1..t
#   ("ck", s, s2, right, left)       keep a^{s2-1}, solve s2..t, then re-solve s..s2-1
Tree = tuple


@dataclass
class Thresholds:
    """m_all[s][t] and m_none[s][t] in the same unit as the stage costs (0-based, inclusive)."""

    m_all: np.ndarray
    m_none: np.ndarray


def thresholds(stages: Sequence[StageCost], field=lambda st, name: getattr(st, name)) -> Thresholds:
    L = len(stages)
    g = lambda s, name: field(stages[s], name)  # noqa: E731
    m_all = np.zeros((L, L), dtype=object)
    m_none = np.zeros((L, L), dtype=object)
    for s in range(L):
        for t in range(s, L):
            m_all[s, t] = max(g(t, "w_delta") + g(s, "w_abar") + g(s, "o_f") + g(s, "o_fcomm"),
                              g(s, "w_delta") + g(s, "w_abar") + g(s, "o_b") + g(s, "o_bcomm"))
            first = g(t, "w_delta") + g(s, "w_a") + g(s, "o_f") + g(s, "o_fcomm")
            inner = [g(j - 1, "w_a") + g(j, "w_a") + g(j, "o_f") + g(j, "o_fcomm") for j in range(s + 1, t)]
            m_none[s, t] = max([first] + [g(t, "w_delta") + x for x in inner])
    return Thresholds(m_all, m_none)


@dataclass
class CheckpointSchedule:
    decisions: list[Decision]
    blocks: list[int | None]  # checkpoint block index per stage, None for F_all stages
    tree: Tree
    total_time_s: float
    peak_memory_bytes: int
    budget_bytes: int
    slot_bytes: float

    def to_dict(self) -> dict:
        return {
            "decisions": [d.value for d in self.decisions],
            "blocks": list(self.blocks),
            "sequence": tree_to_list(self.tree),
            "total_time_s": self.total_time_s,
            "peak_memory_bytes": self.peak_memory_bytes,
            "budget_bytes": self.budget_bytes,
            "slot_bytes": self.slot_bytes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> CheckpointSchedule:
        return cls([Decision(x) for x in d["decisions"]], list(d["blocks"]), tree_from_list(d["sequence"]),
                   float(d["total_time_s"]), int(d["peak_memory_bytes"]), int(d["budget_bytes"]),
                   float(d["slot_bytes"]))


def tree_to_list(tree: Tree) -> list:
    if tree[0] == "leaf":
        return ["leaf", tree[1]]
    if tree[0] == "all":
        return ["all", tree[1], tree_to_list(tree[2])]
    return ["ck", tree[1], tree[2], tree_to_list(tree[3]), tree_to_list(tree[4])]


def tree_from_list(doc: list) -> Tree:
    if doc[0] == "leaf":
        return ("leaf", int(doc[1]))
    if doc[0] == "all":
        return ("all", int(doc[1]), tree_from_list(doc[2]))
    return ("ck", int(doc[1]), int(doc[2]), tree_from_list(doc[3]), tree_from_list(doc[4]))


def tree_span(tree: Tree) -> tuple[int, int]:
    if tree[0] == "leaf":
        return tree[1], tree[1]
    if tree[0] == "all":
        return tree[1], tree_span(tree[2])[1]
    return tree[1], tree_span(tree[3])[1]


def tree_time(tree: Tree, stages: Sequence[StageCost], include_prefix_comm: bool = False) -> float:
    """Time of a schedule tree, summed in the same order as the DP."""
    kind = tree[0]
    if kind == "leaf":
        st = stages[tree[1]]
        return st.u_f + st.u_fcomm + st.u_b + st.u_bcomm
    if kind == "all":
        st = stages[tree[1]]
        return st.u_f + st.u_fcomm + tree_time(tree[2], stages, include_prefix_comm) + st.u_b + st.u_bcomm
    s, s2 = tree[1], tree[2]
    return (_prefix(stages, s, s2, include_prefix_comm) + tree_time(tree[3], stages, include_prefix_comm)
            + tree_time(tree[4], stages, include_prefix_comm))


def tree_memory(tree: Tree, stages: Sequence[StageCost], th: Thresholds | None = None) -> int:
    """Smallest memory under which every threshold along the tree is met."""
    th = th or thresholds(stages)
    s, t = tree_span(tree)
    kind = tree[0]
    if kind == "leaf":
        return th.m_all[s, s]
    if kind == "all":
        return max(th.m_all[s, t], tree_memory(tree[2], stages, th) + stages[s].w_abar)
    s2 = tree[2]
    return max(th.m_none[s, t], tree_memory(tree[3], stages, th) + stages[s2 - 1].w_a, tree_memory(tree[4], stages, th))


def _prefix(stages, s, s2, include_comm):
    total = 0.0
    for k in range(s, s2):
        total += stages[k].u_f
        if include_comm:
            total += stages[k].u_fcomm
    return total


def _shift(arr: np.ndarray, w: int) -> np.ndarray:
    """out[m] = arr[m - w], +inf where m < w."""
    out = np.full_like(arr, np.inf)
    if w < len(arr):
        out[w:] = arr[: len(arr) - w]
    return out


def quantize(stages: Sequence[StageCost], slot: float) -> list[dict]:
    names = ("o_f", "o_b", "o_fcomm", "o_bcomm", "w_a", "w_abar", "w_delta")
    return [{n: math.ceil(getattr(st, n) / slot - 1e-12) for n in names} for st in stages]


def rotor_solve(stages: Sequence[StageCost], budget_bytes: float, slot_bytes: float | None = None,
                include_prefix_comm: bool = False) -> CheckpointSchedule:
    L = len(stages)
    if L == 0:
        raise ValueError("empty chain")
    if budget_bytes <= 0:
        raise InfeasibleError("non-positive checkpoint budget")
    slot = float(slot_bytes) if slot_bytes else budget_bytes / DEFAULT_SLOTS
    q = quantize(stages, slot)
    M = int(math.floor(budget_bytes / slot + 1e-9))
    th = thresholds(q, field=lambda d, name: d[name])
    m = np.arange(M + 1)
    cost = [[None] * L for _ in range(L)]
    # choice[s][t][m]: -1 infeasible, 0 = F_all, s2 > s = checkpoint split
    choice = [[None] * L for _ in range(L)]
    for s in range(L):
        st = stages[s]
        c = np.where(m >= th.m_all[s, s], st.u_f + st.u_fcomm + st.u_b + st.u_bcomm, np.inf)
        cost[s][s] = c
        choice[s][s] = np.where(np.isfinite(c), 0, -1)
    for length in range(2, L + 1):
        for s in range(0, L - length + 1):
            t = s + length - 1
            st = stages[s]
            best = np.full(M + 1, np.inf)
            arg = np.full(M + 1, -1)
            if th.m_none[s, t] <= M:
                ok = m >= th.m_none[s, t]
                for s2 in range(s + 1, t + 1):
                    c = _prefix(stages, s, s2, include_prefix_comm) + _shift(cost[s2][t], q[s2 - 1]["w_a"]) + cost[s][s2 - 1]
                    c = np.where(ok, c, np.inf)
                    better = c < best
                    best = np.where(better, c, best)
                    arg = np.where(better, s2, arg)
            c_all = st.u_f + st.u_fcomm + _shift(cost[s + 1][t], q[s]["w_abar"]) + st.u_b + st.u_bcomm
            c_all = np.where(m >= th.m_all[s, t], c_all, np.inf)
            better = c_all < best
            best = np.where(better, c_all, best)
            arg = np.where(better, 0, arg)
            cost[s][t] = best
            choice[s][t] = arg
    if not np.isfinite(cost[0][L - 1][M]):
        raise InfeasibleError(f"no checkpoint schedule fits {budget_bytes:.0f} bytes")

    def back(s: int, t: int, mm: int) -> Tree:
        if s == t:
            return ("leaf", s)
        a = int(choice[s][t][mm])
        if a == 0:
            return ("all", s, back(s + 1, t, mm - q[s]["w_abar"]))
        return ("ck", s, a, back(a, t, mm - q[a - 1]["w_a"]), back(s, a - 1, mm))

    tree = back(0, L - 1, M)
    decisions, blocks = schedule_decisions(tree, L)
    return CheckpointSchedule(decisions, blocks, tree, float(cost[0][L - 1][M]), int(tree_memory(tree, stages)),
                              int(budget_bytes), slot)


def schedule_decisions(tree: Tree, L: int) -> tuple[list[Decision], list[int | None]]:
    """Per-stage type of its first forward execution, plus checkpoint block numbering."""
    first: list[Decision | None] = [None] * L

    def visit(node: Tree) -> None:
        kind = node[0]
        if kind == "leaf":
            first[node[1]] = first[node[1]] or Decision.ALL
        elif kind == "all":
            first[node[1]] = first[node[1]] or Decision.ALL
            visit(node[2])
        else:
            s, s2 = node[1], node[2]
            first[s] = first[s] or Decision.CK
            for k in range(s + 1, s2):
                first[k] = first[k] or Decision.NONE
            visit(node[3])
            visit(node[4])

    visit(tree)
    blocks: list[int | None] = []
    nxt = -1
    for d in first:
        if d is Decision.CK:
            nxt += 1
            blocks.append(nxt)
        elif d is Decision.NONE:
            blocks.append(nxt)
        else:
            blocks.append(None)
    return list(first), blocks


def no_recompute_time(stages: Sequence[StageCost]) -> float:
    return sum(st.u_f + st.u_fcomm + st.u_b + st.u_bcomm for st in stages)
