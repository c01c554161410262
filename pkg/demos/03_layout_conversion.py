"""Converting between sharding specs with a heuristic path search.

A spec such as ``S01R`` shards tensor dim 0 over mesh axes 0 and 1 and
replicates dim 1. The layout manager finds a sequence of single collectives
that turns one spec into another and caches the result.
"""
from autoplan import DeviceMesh, LayoutManager, ShardingSpec, TensorMeta
from autoplan.layout import one_step_transforms

mesh = DeviceMesh.uniform([2, 4], alpha=1e-5, beta_inv=1e-9)
meta = TensorMeta((1024, 1024), 4)
manager = LayoutManager()

print("one step from S0R:", sorted(str(s) for s, _ in one_step_transforms(ShardingSpec.parse("S0R", 2), mesh, meta)))

for src, tgt in [("S0R", "RS0"), ("S01R", "RR"), ("RS1", "S0S1"), ("S1S0", "S0S1")]:
    path = manager.cached_path(ShardingSpec.parse(src, 2), ShardingSpec.parse(tgt, 2), mesh, meta)
    print(f"\n{src} -> {tgt}: {len(path)} steps, {path.comm_cost_s * 1e3:.3f} ms")
    for step in path.steps:
        print("  ", step)

# Identical requests are answered from the cache.
manager.cached_path(ShardingSpec.parse("S0R", 2), ShardingSpec.parse("RS0", 2), mesh, meta)
print(f"\n{len(manager)} cached paths, {manager.searches} searches run")
