"""Choosing one sharding strategy per operator under a per-device memory budget.

On the 4x2 mesh the inner axis is fast. With room for replicated weights the
cheapest plan is plain data parallelism. Once the budget forces the weights to
be split, the solver shards them over the fast axis and keeps the batch split
over the slow axis.
"""
from autoplan import build_mesh, build_strategy_table, infer_meta, solve
from autoplan.fixtures import load_fixture_graph, load_fixture_topology
from autoplan.intraop import min_feasible_budget

graph = infer_meta(load_fixture_graph("mlp_2layer"))
mesh = build_mesh(load_fixture_topology("topology_8gpu"), [4, 2])
table = build_strategy_table(graph, mesh)
print(f"{len(table.nodes)} solver nodes, {sum(len(v) for v in table.strategies.values())} candidate strategies")
print(f"smallest feasible budget {min_feasible_budget(table) / 2**20:.0f} MiB")

for mib in (1024, 300, 200):
    sol = solve(table, mib * 2**20)
    specs = table.node_specs(sol.selection)
    layout = ", ".join(f"{n}={specs[n]}" for n in ("w1", "fc1", "w2", "fc2"))
    print(f"\nbudget {mib:>4} MiB: {sol.total_time_s * 1e3:.3f} ms using {sol.peak_memory_bytes / 2**20:.0f} MiB")
    print("   ", layout)
