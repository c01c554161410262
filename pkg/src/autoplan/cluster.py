"""Device topology, logical device meshes and alpha-beta collective pricing."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations
from pathlib import Path
from typing import Any, Mapping, Sequence

from .errors import AxisError, HeterogeneityError, SchemaError, ShapeError, TopologyError

log = logging.getLogger(__name__)

UNIFORMITY_TOL = 0.10


class CollectiveKind(str, Enum):
    ALL_GATHER = "all-gather"
    ALL_REDUCE = "all-reduce"
    REDUCE_SCATTER = "reduce-scatter"
    ALL_TO_ALL = "all-to-all"
    SHARD_SLICE = "shard-slice"


@dataclass(frozen=True)
class Link:
    latency_s: float
    bandwidth_Bps: float


@dataclass(frozen=True)
class Topology:
    devices: tuple[str, ...]
    device_flops_per_s: float
    links: Mapping[frozenset, Link]
    default_link: Link | None = None

    def __post_init__(self):
        if len(set(self.devices)) != len(self.devices):
            raise TopologyError("duplicate device ids")
        if self.device_flops_per_s <= 0:
            raise TopologyError("device_flops_per_s must be positive")
        for pair, link in self.links.items():
            if not pair <= set(self.devices):
                raise TopologyError(f"link references unknown device(s) {sorted(pair - set(self.devices))}")
            if link.latency_s < 0 or link.bandwidth_Bps <= 0:
                raise TopologyError(f"invalid link {sorted(pair)}: latency must be >= 0, bandwidth > 0")

    def link(self, a: str, b: str) -> Link:
        try:
            return self.links[frozenset((a, b))]
        except KeyError:
            if self.default_link is not None:
                return self.default_link
            raise TopologyError(f"no link declared between {a!r} and {b!r}") from None

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> Topology:
        allowed = {"devices", "device_flops_per_s", "links", "default_link"}
        if not isinstance(doc, Mapping) or set(doc) - allowed:
            raise SchemaError(f"topology keys must be within {sorted(allowed)}")
        try:
            devices = tuple(str(d) for d in doc["devices"])
            links: dict[frozenset, Link] = {}
            for entry in doc.get("links", []):
                a, b = str(entry["a"]), str(entry["b"])
                if a == b:
                    raise TopologyError(f"self-link on {a!r}")
                links[frozenset((a, b))] = Link(float(entry["latency_s"]), float(entry["bandwidth_Bps"]))
            default = doc.get("default_link")
            default_link = Link(float(default["latency_s"]), float(default["bandwidth_Bps"])) if default else None
            return cls(devices, float(doc["device_flops_per_s"]), links, default_link)
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed topology document: {exc!r}") from None

    def to_dict(self) -> dict:
        links = []
        pos = {d: i for i, d in enumerate(self.devices)}
        for pair in sorted(self.links, key=lambda p: sorted(pos[d] for d in p)):
            a, b = sorted(pair, key=pos.get)
            link = self.links[pair]
            links.append({"a": a, "b": b, "latency_s": link.latency_s, "bandwidth_Bps": link.bandwidth_Bps})
        d = {"devices": list(self.devices), "device_flops_per_s": self.device_flops_per_s, "links": links}
        if self.default_link:
            d["default_link"] = {"latency_s": self.default_link.latency_s, "bandwidth_Bps": self.default_link.bandwidth_Bps}
        return d


def load_topology(path: str | Path) -> Topology:
    return Topology.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class DeviceMesh:
    """Row-major logical mesh; ``devices[i]`` sits at ``coords(i)``."""

    shape: tuple[int, ...]
    devices: tuple[str, ...]
    alpha: tuple[float, ...]
    beta_inv: tuple[float, ...]
    device_flops_per_s: float = 1e12
    warnings: tuple[HeterogeneityError, ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if any(s < 1 for s in self.shape) or math.prod(self.shape) != len(self.devices):
            raise ShapeError(f"mesh shape {self.shape} does not hold {len(self.devices)} devices")
        if len(self.alpha) != len(self.shape) or len(self.beta_inv) != len(self.shape):
            raise ShapeError("need one alpha/beta_inv per mesh axis")

    @classmethod
    def uniform(cls, shape: Sequence[int], alpha: float | Sequence[float] = 1e-5,
                beta_inv: float | Sequence[float] = 1e-9, device_flops_per_s: float = 1e12) -> DeviceMesh:
        n = len(shape)
        a = tuple(alpha) if isinstance(alpha, Sequence) else (alpha,) * n
        b = tuple(beta_inv) if isinstance(beta_inv, Sequence) else (beta_inv,) * n
        return cls(tuple(shape), tuple(str(i) for i in range(math.prod(shape))), a, b, device_flops_per_s)

    @property
    def rank(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return len(self.devices)

    @property
    def key(self) -> tuple:
        return (self.shape, self.alpha, self.beta_inv)

    def axes_size(self, axes: Sequence[int]) -> int:
        return math.prod(self.shape[a] for a in axes)

    def coords(self, index: int) -> tuple[int, ...]:
        out = []
        for extent in reversed(self.shape):
            out.append(index % extent)
            index //= extent
        return tuple(reversed(out))

    @property
    def assignment(self) -> dict[tuple[int, ...], str]:
        return {self.coords(i): d for i, d in enumerate(self.devices)}

    def lines(self, axis: int) -> list[list[str]]:
        """Device groups that differ only in their coordinate on ``axis``."""
        groups: dict[tuple, list[str]] = {}
        for i, d in enumerate(self.devices):
            c = self.coords(i)
            groups.setdefault(c[:axis] + c[axis + 1:], []).append(d)
        return [groups[k] for k in sorted(groups)]

    def to_dict(self) -> dict:
        return {
            "shape": list(self.shape),
            "devices": list(self.devices),
            "alpha_s": list(self.alpha),
            "beta_inv_s_per_byte": list(self.beta_inv),
            "device_flops_per_s": self.device_flops_per_s,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> DeviceMesh:
        try:
            return cls(tuple(d["shape"]), tuple(d["devices"]), tuple(d["alpha_s"]),
                       tuple(d["beta_inv_s_per_byte"]), float(d["device_flops_per_s"]))
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed mesh document: {exc!r}") from None


def _group_units(units: list[list[str]], extent: int, topo: Topology) -> list[list[str]]:
    """Greedily cluster ``units`` into groups of ``extent`` maximising the weakest intra-group link."""
    if extent == 1:
        return [[*u] for u in units]
    n = len(units)

    def quality(i: int, j: int) -> tuple[float, float]:
        links = [topo.link(a, b) for a in units[i] for b in units[j]]
        return (min(l.bandwidth_Bps for l in links), max(l.latency_s for l in links))

    pairs = sorted(combinations(range(n), 2), key=lambda p: (-quality(*p)[0], quality(*p)[1], p))
    parent = list(range(n))
    size = [1] * n

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, j in pairs:
        ri, rj = find(i), find(j)
        if ri != rj and size[ri] + size[rj] <= extent:
            if rj < ri:
                ri, rj = rj, ri
            parent[rj] = ri
            size[ri] += size[rj]
    clusters: dict[int, list[int]] = {}
    for i in range(n):
        clusters.setdefault(find(i), []).append(i)
    full = [c for c in clusters.values() if len(c) == extent]
    # incomplete clusters are dissolved and refilled in order; sizes always add up
    rest = sorted(i for c in clusters.values() if len(c) < extent for i in c)
    full += [rest[k:k + extent] for k in range(0, len(rest), extent)]
    full.sort(key=lambda c: c[0])
    return [[d for i in c for d in units[i]] for c in full]


def build_mesh(topology: Topology, target_shape: Sequence[int]) -> DeviceMesh:
    """Arrange devices so the fastest links sit on the innermost axes.

    Each axis gets the worst (max latency, min bandwidth) link among device
    pairs on its lines. Axes whose links spread more than 10% carry a
    HeterogeneityError in ``mesh.warnings``.
    """
    shape = tuple(int(s) for s in target_shape)
    if any(s < 1 for s in shape) or math.prod(shape) != len(topology.devices):
        raise ShapeError(f"mesh shape {shape} holds {math.prod(shape)} devices, topology has {len(topology.devices)}")
    units = [[d] for d in topology.devices]
    for extent in reversed(shape):
        units = _group_units(units, extent, topology)
    order = tuple(units[0]) if units else ()
    probe = DeviceMesh(shape, order, (0.0,) * len(shape), (0.0,) * len(shape), topology.device_flops_per_s)
    alphas, betas, warns = [], [], []
    for axis in range(len(shape)):
        links = [topology.link(a, b) for line in probe.lines(axis) for a, b in combinations(line, 2)]
        if not links:
            alphas.append(0.0)
            betas.append(0.0)
            continue
        bw = [l.bandwidth_Bps for l in links]
        lat = [l.latency_s for l in links]
        alphas.append(max(lat))
        betas.append(1.0 / min(bw))
        spread_bw = min(bw) < (1 - UNIFORMITY_TOL) * max(bw)
        spread_lat = max(lat) > 0 and min(lat) < (1 - UNIFORMITY_TOL) * max(lat)
        if spread_bw or spread_lat:
            w = HeterogeneityError(
                f"mesh axis {axis}: bandwidth {min(bw):.3g}..{max(bw):.3g} B/s, latency {min(lat):.3g}..{max(lat):.3g} s"
            )
            log.warning("%s", w)
            warns.append(w)
    return DeviceMesh(shape, order, tuple(alphas), tuple(betas), topology.device_flops_per_s, tuple(warns))


def collective_cost(mesh: DeviceMesh, axes: Sequence[int], kind: CollectiveKind | str, nbytes: float) -> float:
    """Ring alpha-beta estimate in seconds; the slowest involved axis sets alpha and beta."""
    kind = CollectiveKind(kind)
    axes = list(axes)
    if len(set(axes)) != len(axes) or any(not 0 <= a < mesh.rank for a in axes):
        raise AxisError(f"invalid axes {axes} for mesh of rank {mesh.rank}")
    if nbytes < 0:
        raise ValueError("nbytes must be non-negative")
    p = mesh.axes_size(axes)
    if p == 1 or kind is CollectiveKind.SHARD_SLICE:
        return 0.0
    alpha = max(mesh.alpha[a] for a in axes)
    beta = max(mesh.beta_inv[a] for a in axes)
    one_pass = (p - 1) * alpha + (p - 1) / p * nbytes * beta
    if kind is CollectiveKind.ALL_REDUCE:
        return 2 * one_pass
    return one_pass
