"""Profiling a computation graph without allocating any tensor payloads.

The graph is a JSON document of nodes. ``infer_meta`` propagates shapes and
dtypes only, and ``profile_graph`` derives FLOPs and byte counts in closed form.
"""
from autoplan import infer_meta, profile_graph
from autoplan.fixtures import load_fixture_graph, load_fixture_topology

graph = infer_meta(load_fixture_graph("gpt_block"))
rate = load_fixture_topology("topology_8gpu").device_flops_per_s
prof = profile_graph(graph, rate)

print(f"{'node':<14} {'kind':<20} {'shape':<18} {'flops':>12} {'saved B':>10}")
for nid in graph.topo_order:
    node, p = graph[nid], prof[nid]
    shape = "x".join(map(str, node.out.shape)) if node.out else "-"
    print(f"{nid:<14} {node.kind.value:<20} {shape:<18} {p.flops:>12} {p.saved_intermediate_bytes:>10}")

# The same numbers scale exactly with the batch size, since nothing is materialized.
print(f"\nforward flops {prof.total_flops:,}, backward flops {prof.total_bwd_flops:,}")
print(f"parameters {prof.param_bytes:,} B, serial forward peak {prof.peak_fwd_bytes:,} B")
