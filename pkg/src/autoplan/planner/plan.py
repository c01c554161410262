"""Execution plan document: construction, deterministic serialization, report and memory replay."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from ..ckpt.common import NodeGroup
from ..ckpt.rotor import CheckpointSchedule, Decision, Tree
from ..ckpt.stages import StageCost, StageModel
from ..cluster import DeviceMesh
from ..distributed import CommRecord, DistributedGraph
from ..errors import SchemaError
from ..graph.ir import SOURCE_KINDS, Kind
from ..intraop.ilp import IntraOpSolution
from ..layout import ShardingSpec
from .passes import ParamShard, ReshapeRewrites

PLAN_VERSION = 1
FLOAT_DIGITS = 12


@dataclass
class ExecutionPlan:
    mesh: DeviceMesh
    intraop: IntraOpSolution
    schedule: CheckpointSchedule
    groups: list[NodeGroup]
    stages: list[StageCost]
    inserted_comm_nodes: list[CommRecord]
    param_shards: dict[str, ParamShard]
    reshape_rewrites: dict[str, dict]
    reshape_fallbacks: dict[str, list[str]]
    # every node of the distributed graph: kind, spec, group index, checkpoint block
    nodes: dict[str, dict]
    resident_bytes: int
    forward_time_s: float
    backward_time_s: float
    recompute_time_s: float
    total_time_s: float
    peak_memory_bytes: int
    device_budget_bytes: int
    sweep: dict = field(default_factory=dict)

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        intraop = self.intraop.to_dict()
        intraop.pop("mesh", None)
        return {
            "version": PLAN_VERSION,
            "mesh": self.mesh.to_dict(),
            "intraop": intraop,
            "schedule": self.schedule.to_dict(),
            "chain": [
                {"index": g.index, "members": list(g.members), "cost": s.to_dict()}
                for g, s in zip(self.groups, self.stages)
            ],
            "inserted_comm_nodes": [c.to_dict() for c in self.inserted_comm_nodes],
            "param_shards": {k: v.to_dict() for k, v in self.param_shards.items()},
            "reshape_rewrites": self.reshape_rewrites,
            "reshape_fallbacks": self.reshape_fallbacks,
            "nodes": self.nodes,
            "summary": {
                "resident_bytes": self.resident_bytes,
                "forward_time_s": self.forward_time_s,
                "backward_time_s": self.backward_time_s,
                "recompute_time_s": self.recompute_time_s,
                "total_time_s": self.total_time_s,
                "peak_memory_bytes": self.peak_memory_bytes,
                "device_budget_bytes": self.device_budget_bytes,
            },
            "sweep": self.sweep,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ExecutionPlan:
        try:
            if d.get("version") != PLAN_VERSION:
                raise SchemaError(f"unsupported plan version {d.get('version')!r}")
            mesh = DeviceMesh.from_dict(d["mesh"])
            intraop = IntraOpSolution.from_dict({**d["intraop"], "mesh": d["mesh"]})
            s = d["summary"]
            return cls(
                mesh=mesh,
                intraop=intraop,
                schedule=CheckpointSchedule.from_dict(d["schedule"]),
                groups=[NodeGroup(tuple(c["members"]), int(c["index"])) for c in d["chain"]],
                stages=[StageCost.from_dict(c["cost"]) for c in d["chain"]],
                inserted_comm_nodes=[CommRecord.from_dict(c) for c in d["inserted_comm_nodes"]],
                param_shards={
                    k: ParamShard(ShardingSpec.parse(v["spec"], mesh.rank), v["gradient"], tuple(v["axes"]))
                    for k, v in d["param_shards"].items()
                },
                reshape_rewrites={k: dict(v) for k, v in d["reshape_rewrites"].items()},
                reshape_fallbacks={k: list(v) for k, v in d["reshape_fallbacks"].items()},
                nodes={k: dict(v) for k, v in d["nodes"].items()},
                resident_bytes=int(s["resident_bytes"]),
                forward_time_s=float(s["forward_time_s"]),
                backward_time_s=float(s["backward_time_s"]),
                recompute_time_s=float(s["recompute_time_s"]),
                total_time_s=float(s["total_time_s"]),
                peak_memory_bytes=int(s["peak_memory_bytes"]),
                device_budget_bytes=int(s["device_budget_bytes"]),
                sweep=dict(d.get("sweep", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed plan document: {exc!r}") from None


def _normalize(x: Any) -> Any:
    if isinstance(x, float):
        return float(f"{x:.{FLOAT_DIGITS}g}")
    if isinstance(x, Mapping):
        return {str(k): _normalize(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_normalize(v) for v in x]
    if isinstance(x, (set, frozenset)):
        return sorted(_normalize(v) for v in x)
    return x


def dumps_plan(plan: ExecutionPlan) -> str:
    """Stable text form: sorted keys, floats at a fixed number of significant digits."""
    return json.dumps(_normalize(plan.to_dict()), sort_keys=True, indent=2) + "\n"


def loads_plan(text: str) -> ExecutionPlan:
    try:
        return ExecutionPlan.from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"plan is not valid JSON: {exc}") from None


def emit_plan(plan: ExecutionPlan, path: str | Path | None = None) -> tuple[str, str]:
    """(plan document, report); writes the document when ``path`` is given."""
    doc = dumps_plan(plan)
    if path is not None:
        Path(path).write_text(doc)
    return doc, format_report(plan)


# -- construction --------------------------------------------------------

def _recompute(total: float, forward: float, backward: float) -> float:
    r = total - forward - backward
    # rounding residue of the subtraction, not actual recomputation
    return 0.0 if abs(r) <= 1e-12 * abs(total) else r


def assemble_plan(dg: DistributedGraph, solution: IntraOpSolution, model: StageModel, schedule: CheckpointSchedule,
                  params: dict[str, ParamShard], reshapes: ReshapeRewrites, device_budget_bytes: int,
                  sweep: dict | None = None) -> ExecutionPlan:
    g = dg.graph
    group_of = {m: grp.index for grp in model.groups for m in grp.members}
    nodes = {}
    for nid in g.nodes:
        node = g[nid]
        if node.kind is Kind.OUTPUT:
            continue
        gi = group_of.get(nid)
        nodes[nid] = {
            "kind": node.kind.value,
            "spec": str(dg.specs[nid]) if nid in dg.specs else None,
            "group": gi,
            "common": nid in model.common,
            "checkpoint_block": schedule.blocks[gi] if gi is not None else None,
        }
    forward = sum(s.u_f + s.u_fcomm for s in model.stages)
    backward = sum(s.u_b + s.u_bcomm for s in model.stages)
    return ExecutionPlan(
        mesh=dg.mesh,
        intraop=solution,
        schedule=schedule,
        groups=list(model.groups),
        stages=list(model.stages),
        inserted_comm_nodes=list(dg.comms),
        param_shards=params,
        reshape_rewrites=reshapes.rewrites,
        reshape_fallbacks={k: [str(s) for s in p.steps] for k, p in reshapes.fallbacks.items()},
        nodes=nodes,
        resident_bytes=model.resident_bytes,
        forward_time_s=forward,
        backward_time_s=backward,
        recompute_time_s=_recompute(schedule.total_time_s, forward, backward),
        total_time_s=schedule.total_time_s,
        peak_memory_bytes=model.resident_bytes + schedule.peak_memory_bytes,
        device_budget_bytes=int(device_budget_bytes),
        sweep=sweep or {},
    )


# -- memory replay -------------------------------------------------------

def schedule_trace(tree: Tree, stages: list[StageCost]) -> list[tuple[str, int, int]]:
    """Operation sequence of a schedule tree with the bytes held while each op runs.

    Counts stored activations, the gradient slot reserved for the segment
    being processed, and the op's transient overhead.  A segment's own input
    activation is owned by the caller and is not counted.
    """
    ops: list[tuple[str, int, int]] = []

    def span(node):
        if node[0] == "leaf":
            return node[1], node[1]
        if node[0] == "all":
            return node[1], span(node[2])[1]
        return node[1], span(node[3])[1]

    def run(node, held: int) -> None:
        s, t = span(node)
        st = stages[s]
        fwd_all = held + stages[t].w_delta + st.w_abar + st.o_f + st.o_fcomm
        bwd = held + st.w_delta + st.w_abar + st.o_b + st.o_bcomm
        if node[0] == "leaf":
            ops.extend([(Decision.ALL.value, s, fwd_all), ("B", s, bwd)])
        elif node[0] == "all":
            ops.append((Decision.ALL.value, s, fwd_all))
            run(node[2], held + st.w_abar)
            ops.append(("B", s, bwd))
        else:
            s2 = node[2]
            ops.append((Decision.CK.value, s, held + stages[t].w_delta + st.w_a + st.o_f + st.o_fcomm))
            for j in range(s + 1, s2):
                sj = stages[j]
                ops.append((Decision.NONE.value, j,
                            held + stages[t].w_delta + stages[j - 1].w_a + sj.w_a + sj.o_f + sj.o_fcomm))
            run(node[3], held + stages[s2 - 1].w_a)
            run(node[4], held)

    run(tree, 0)
    return ops


def replay_memory(plan: ExecutionPlan, graph=None) -> int:
    """Peak per-device bytes of a plan, recomputed from its document.

    Resident bytes come from the emitted specs of sources and common nodes
    (needs the original graph); the schedule part is replayed op by op.
    """
    resident = plan.resident_bytes
    if graph is not None:
        resident = _resident_from_specs(plan, graph)
    ops = schedule_trace(plan.schedule.tree, plan.stages)
    return resident + max(b for _, _, b in ops)


def _resident_from_specs(plan: ExecutionPlan, graph) -> int:
    producer = {c.id: c.producer for c in plan.inserted_comm_nodes}
    total = 0
    for nid, info in plan.nodes.items():
        if info["spec"] is None or not (Kind(info["kind"]) in SOURCE_KINDS or info.get("common")):
            continue
        meta = graph[producer.get(nid, nid)].out
        if meta is not None:
            total += ShardingSpec.parse(info["spec"], plan.mesh.rank).local_bytes(meta, plan.mesh)
    return total


# -- report --------------------------------------------------------------

def _fmt_bytes(n: float) -> str:
    for unit in ("B", "KiB", "MiB", "GiB"):
        if abs(n) < 1024 or unit == "GiB":
            return f"{n:.1f}{unit}" if unit != "B" else f"{int(n)}B"
        n /= 1024
    return str(n)


def format_report(plan: ExecutionPlan) -> str:
    lines = [
        f"execution plan v{PLAN_VERSION}",
        f"mesh {'x'.join(map(str, plan.mesh.shape))}  alpha {list(plan.mesh.alpha)}  beta_inv {list(plan.mesh.beta_inv)}",
        f"total time      {plan.total_time_s:.6e} s  (forward {plan.forward_time_s:.3e}, backward "
        f"{plan.backward_time_s:.3e}, recompute {plan.recompute_time_s:.3e})",
        f"peak memory     {_fmt_bytes(plan.peak_memory_bytes)} of {_fmt_bytes(plan.device_budget_bytes)} "
        f"(resident {_fmt_bytes(plan.resident_bytes)})",
        f"intra-op budget {_fmt_bytes(plan.intraop.budget_bytes)}  (sweep n={plan.sweep.get('chosen_n')})",
        "",
        f"{'stage':>5} {'decision':<8} {'block':>5} {'u_f':>10} {'u_fcomm':>10} {'u_b':>10} {'u_bcomm':>10} "
        f"{'w_a':>10} {'w_abar':>10}  members",
    ]
    for g, s, d, b in zip(plan.groups, plan.stages, plan.schedule.decisions, plan.schedule.blocks):
        members = ",".join(g.members)
        if len(members) > 48:
            members = members[:45] + "..."
        lines.append(
            f"{g.index:>5} {d.value:<8} {'-' if b is None else b:>5} {s.u_f:>10.3e} {s.u_fcomm:>10.3e} "
            f"{s.u_b:>10.3e} {s.u_bcomm:>10.3e} {_fmt_bytes(s.w_a):>10} {_fmt_bytes(s.w_abar):>10}  {members}"
        )
    lines += ["", f"{len(plan.inserted_comm_nodes)} inserted collectives"]
    for c in plan.inserted_comm_nodes:
        lines.append(f"  {c.position:>4} {c.kind.value:<14} axes {list(c.axes)!s:<8} {_fmt_bytes(c.nbytes):>10} "
                     f"{c.time_s:.3e} s  {c.src_spec} -> {c.dst_spec}  ({c.id})")
    if plan.param_shards:
        lines += ["", "parameters"]
        for k, v in plan.param_shards.items():
            sync = f"all-reduce over axes {list(v.axes)}" if v.gradient == "all-reduce" else "none"
            lines.append(f"  {k:<16} {str(v.spec):<10} gradient sync: {sync}")
    return "\n".join(lines) + "\n"
