"""Full planning run: budget sweep, sharding, checkpointing and the plan document.

The planner solves the sharding problem at a ladder of memory budgets. Each
candidate is then checkpointed against the device budget, and the fastest
pair wins. The emitted JSON is deterministic and can be replayed to check its
memory accounting.
"""
from autoplan import SweepConfig, build_mesh, emit_plan, infer_meta, sweep
from autoplan.fixtures import load_fixture_graph, load_fixture_topology
from autoplan.planner import loads_plan, replay_memory

graph = infer_meta(load_fixture_graph("gpt_block"))
mesh = build_mesh(load_fixture_topology("topology_8gpu"), [4, 2])
budget = 24_000_000

plan, candidates = sweep(graph, mesh, budget, SweepConfig(alpha=0.3, n_max=9))
for c in candidates:
    t = f"{c.total_time_s * 1e3:.3f} ms" if c.total_time_s is not None else "-"
    print(f"n={c.n}  budget {c.budget_bytes / 1e6:7.2f} MB  {c.status:<20} {t}")

doc, report = emit_plan(plan)
print()
print(report)
print("replayed peak:", replay_memory(loads_plan(doc), graph), "B of", budget)
