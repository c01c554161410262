"""``plan`` command line: profile, mesh, convert, intraop, ckpt, run."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .ckpt import build_stages, rotor_solve
from .cluster import DeviceMesh, build_mesh, load_topology
from .errors import InfeasibleError, InputError, PlanError
from .graph import TensorMeta, infer_meta, load_graph, profile_graph
from .intraop import build_strategy_table, load_solution, solve
from .layout import LayoutManager, ShardingSpec, heuristic_diff
from .planner import SweepConfig, emit_plan, insert_comm_nodes, sweep

EXIT_OK, EXIT_INFEASIBLE, EXIT_INPUT = 0, 2, 3


def parse_extents(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.lower().replace(",", "x").split("x") if x]
    except ValueError:
        raise InputError(f"cannot parse extents {text!r}; expected e.g. 2x4") from None
    if not vals or any(v < 1 for v in vals):
        raise InputError(f"extents must be positive: {text!r}")
    return vals


def _graph(path: str):
    return infer_meta(load_graph(path))


def _mesh(args) -> DeviceMesh:
    return build_mesh(load_topology(args.topology), parse_extents(args.mesh))


def _write(out: str | None, text: str) -> None:
    if out:
        Path(out).write_text(text)


def cmd_profile(args) -> int:
    g = _graph(args.graph)
    rate = load_topology(args.topology).device_flops_per_s if args.topology else None
    prof = profile_graph(g, rate)
    print(f"{'node':<18} {'kind':<20} {'flops':>14} {'out bytes':>12} {'saved bytes':>12} {'fwd s':>10} {'bwd s':>10}")
    for nid in g.topo_order:
        p = prof[nid]
        print(f"{nid:<18} {g[nid].kind.value:<20} {p.flops:>14} {p.fwd_out_bytes:>12} "
              f"{p.saved_intermediate_bytes:>12} {p.fwd_time_s:>10.3e} {p.bwd_time_s:>10.3e}")
    print(f"total flops {prof.total_flops}  backward flops {prof.total_bwd_flops}  "
          f"params {prof.param_bytes} B  serial forward peak {prof.peak_fwd_bytes} B")
    return EXIT_OK


def cmd_mesh(args) -> int:
    mesh = build_mesh(load_topology(args.topology), parse_extents(args.shape))
    print(f"mesh shape {'x'.join(map(str, mesh.shape))}")
    for coord, dev in sorted(mesh.assignment.items()):
        print(f"  {coord} -> {dev}")
    for a in range(mesh.rank):
        print(f"axis {a}: extent {mesh.shape[a]}  alpha {mesh.alpha[a]:.3e} s  beta_inv {mesh.beta_inv[a]:.3e} s/B")
    for w in mesh.warnings:
        print(f"warning: {w}")
    return EXIT_OK


def cmd_convert(args) -> int:
    shape = parse_extents(args.mesh)
    if args.topology:
        mesh = build_mesh(load_topology(args.topology), shape)
    else:
        mesh = DeviceMesh.uniform(shape, args.alpha, args.beta_inv)
    meta = TensorMeta(tuple(parse_extents(args.shape)), args.dtype_bytes)
    src = ShardingSpec.parse(args.src, mesh.rank)
    tgt = ShardingSpec.parse(args.tgt, mesh.rank)
    src.check(meta.shape, mesh)
    tgt.check(meta.shape, mesh)
    path = LayoutManager().cached_path(src, tgt, mesh, meta)
    print(f"{src} -> {tgt}  heuristic diff {heuristic_diff(src, tgt)}")
    for i, step in enumerate(path.steps):
        print(f"  {i}: {step}")
    print(f"steps {len(path)}  cost {path.comm_cost_s:.6e} s")
    return EXIT_OK


def cmd_intraop(args) -> int:
    g = _graph(args.graph)
    mesh = _mesh(args)
    table = build_strategy_table(g, mesh)
    sol = solve(table, args.budget_bytes)
    specs = table.node_specs(sol.selection)
    print(f"{'node':<18} {'strategy':<28} spec")
    for nid in g.topo_order:
        if nid in specs:
            host = table.simplified.host_of.get(nid, nid)
            name = sol.strategy_names.get(host, "-") if host == nid else f"(with {host})"
            print(f"{nid:<18} {name:<28} {specs[nid]}")
    print(f"total {sol.total_time_s:.6e} s  memory {sol.peak_memory_bytes} B of {args.budget_bytes:.0f} B  "
          f"explored {sol.nodes_explored}")
    _write(args.output, json.dumps(sol.to_dict(), sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def cmd_ckpt(args) -> int:
    g = _graph(args.graph)
    sol = load_solution(args.intraop_solution)
    if sol.mesh is None:
        raise InputError("intra-op solution carries no mesh")
    table = build_strategy_table(g, sol.mesh)
    dg = insert_comm_nodes(table, sol)
    model = build_stages(dg)
    budget = args.budget_bytes - model.resident_bytes
    if budget <= 0:
        raise InfeasibleError(f"resident bytes {model.resident_bytes} exceed the budget")
    sched = rotor_solve(model.stages, budget, args.slot_bytes, args.include_prefix_comm)
    print(f"{'stage':>5} {'decision':<8} {'u_f':>10} {'u_fcomm':>10} {'u_b':>10} {'u_bcomm':>10} "
          f"{'w_a':>10} {'w_abar':>10}  members")
    for grp, st, d in zip(model.groups, model.stages, sched.decisions):
        print(f"{grp.index:>5} {d.value:<8} {st.u_f:>10.3e} {st.u_fcomm:>10.3e} {st.u_b:>10.3e} "
              f"{st.u_bcomm:>10.3e} {st.w_a:>10} {st.w_abar:>10}  {','.join(grp.members)}")
    print(f"total {sched.total_time_s:.6e} s  schedule peak {sched.peak_memory_bytes} B  resident "
          f"{model.resident_bytes} B")
    _write(args.output, json.dumps(sched.to_dict(), sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def cmd_run(args) -> int:
    g = _graph(args.graph)
    mesh = _mesh(args)
    cfg = SweepConfig(args.alpha, args.n_max, args.base_budget_bytes, slot_bytes=args.slot_bytes,
                      include_prefix_comm=args.include_prefix_comm, shared_budget=args.shared_budget)
    plan, _ = sweep(g, mesh, args.device_budget_bytes, cfg, verbose=args.verbose)
    doc, report = emit_plan(plan, args.output)
    print(report, end="")
    if args.report:
        Path(args.report).write_text(report)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="plan", description="Sharding and checkpoint planner")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("profile", help="per-node profile table and totals")
    s.add_argument("--graph", required=True)
    s.add_argument("--topology", help="adds time estimates from the device rate")
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("mesh", help="build a device mesh from a topology")
    s.add_argument("--topology", required=True)
    s.add_argument("--shape", required=True, help="e.g. 4x2")
    s.set_defaults(func=cmd_mesh)

    s = sub.add_parser("convert", help="layout conversion path between two specs")
    s.add_argument("--from", dest="src", required=True)
    s.add_argument("--to", dest="tgt", required=True)
    s.add_argument("--mesh", required=True)
    s.add_argument("--shape", required=True)
    s.add_argument("--dtype-bytes", type=int, default=4)
    s.add_argument("--topology")
    s.add_argument("--alpha", type=float, default=1e-5, help="per-axis latency for a uniform mesh")
    s.add_argument("--beta-inv", type=float, default=1e-9, help="per-axis seconds per byte for a uniform mesh")
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("intraop", help="solve intra-op sharding under a memory budget")
    s.add_argument("--graph", required=True)
    s.add_argument("--topology", required=True)
    s.add_argument("--mesh", required=True)
    s.add_argument("--budget-bytes", type=float, required=True)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_intraop)

    s = sub.add_parser("ckpt", help="checkpoint schedule for a solved intra-op plan")
    s.add_argument("--graph", required=True)
    s.add_argument("--intraop-solution", required=True)
    s.add_argument("--budget-bytes", type=float, required=True)
    s.add_argument("--slot-bytes", type=float)
    s.add_argument("--include-prefix-comm", action="store_true")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_ckpt)

    s = sub.add_parser("run", help="full two-stage search and plan emission")
    s.add_argument("--graph", required=True)
    s.add_argument("--topology", required=True)
    s.add_argument("--mesh", required=True)
    s.add_argument("--device-budget-bytes", type=int, required=True)
    s.add_argument("--alpha", type=float, default=0.3)
    s.add_argument("--n-max", type=int, default=9)
    s.add_argument("--base-budget-bytes", type=float)
    s.add_argument("--slot-bytes", type=float)
    s.add_argument("--include-prefix-comm", action="store_true")
    s.add_argument("--shared-budget", action="store_true", help="checkpoint solver gets B_n, not the device budget")
    s.add_argument("--verbose", action="store_true", help="keep every sweep candidate in the plan")
    s.add_argument("--report", help="also write the text report here")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_run)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (InputError, OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except PlanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
