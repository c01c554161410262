"""Activation checkpointing on a sharded graph.

The sharded graph is first cut into a chain of stages. A bool attention mask
and everything derived only from it are treated as common nodes, which keeps
the two transformer blocks in separate stages. A dynamic program then labels
each stage: F_all stores everything the backward pass needs. F_ck keeps only
the stage input as a checkpoint and recomputes from it later. F_none keeps
nothing and is recomputed from an earlier checkpoint. The leading stages only
convert layouts and hold nothing beyond their output, so F_ck is free there.
"""
from autoplan import build_strategy_table, infer_meta, linearize, rotor_solve, solve
from autoplan.ckpt import build_stages, default_seeds, propagate_common_nodes
from autoplan.cluster import DeviceMesh
from autoplan.errors import InfeasibleError
from autoplan.fixtures import load_fixture_graph
from autoplan.planner import insert_comm_nodes

graph = infer_meta(load_fixture_graph("transformer_2block"))
common = propagate_common_nodes(graph, default_seeds(graph))
print("common nodes:", sorted(common))
print("groups with common nodes:   ", len(linearize(graph, common)))
print("groups without common nodes:", len(linearize(graph, set())))

mesh = DeviceMesh.uniform([2], alpha=1e-5, beta_inv=1e-10)
table = build_strategy_table(graph, mesh)
dg = insert_comm_nodes(table, solve(table, float("inf")))
model = build_stages(dg)
no_recompute = sum(s.u_f + s.u_fcomm + s.u_b + s.u_bcomm for s in model.stages)
need = sum(s.w_abar for s in model.stages)

for frac in (2.0, 1.4, 1.1, 0.8):
    budget = int(frac * need)
    try:
        sched = rotor_solve(model.stages, budget)
    except InfeasibleError as exc:
        print(f"\nbudget {budget:>9} B: {exc}")
        continue
    print(f"\nbudget {budget:>9} B: {sched.total_time_s * 1e6:.1f} us "
          f"({sched.total_time_s / no_recompute - 1:+.1%} vs no recomputation)")
    print("   ", " ".join(d.value for d in sched.decisions))
