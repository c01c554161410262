"""From a physical topology to a logical device mesh with per-axis link costs.

The 8-device topology has four pairs of devices on fast links. Building a 4x2
mesh puts each fast pair on the inner axis, so axis 1 gets the low per-byte cost.
"""
from autoplan import CollectiveKind, build_mesh, collective_cost
from autoplan.fixtures import load_fixture_topology

topo = load_fixture_topology("topology_8gpu")
mesh = build_mesh(topo, [4, 2])

for coord, dev in sorted(mesh.assignment.items()):
    print(coord, "->", dev)
for axis in range(mesh.rank):
    print(f"axis {axis}: alpha {mesh.alpha[axis]:.1e} s, beta_inv {mesh.beta_inv[axis]:.2e} s/B")

# Ring collectives priced with the alpha-beta model: 64 MiB over each axis.
nbytes = 64 * 2**20
for kind in (CollectiveKind.ALL_REDUCE, CollectiveKind.ALL_GATHER, CollectiveKind.ALL_TO_ALL):
    times = [collective_cost(mesh, (axis,), kind, nbytes) for axis in range(mesh.rank)]
    print(f"{kind.value:<15} axis0 {times[0] * 1e3:8.3f} ms   axis1 {times[1] * 1e3:8.3f} ms")
