"""Sharding-spec algebra and layout conversion search.

A spec assigns each tensor dimension either ``R`` (replicated) or ``S`` with
an ordered tuple of mesh axes, e.g. ``S01R``: dim 0 split over mesh axes 0
then 1, dim 1 replicated.
"""
from __future__ import annotations

import heapq
import itertools
import math
import re
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

from .cluster import CollectiveKind, DeviceMesh, collective_cost
from .errors import RankMismatchError, SpecError
from .graph.ir import TensorMeta

DimSpec = tuple[int, ...]  # () is R
REPLICATE: DimSpec = ()

_TOKEN = re.compile(r"R|S(\d+)")


@dataclass(frozen=True, order=True)
class ShardingSpec:
    dims: tuple[DimSpec, ...]
    mesh_rank: int = field(default=2, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(tuple(int(a) for a in d) for d in self.dims))
        used = [a for d in self.dims for a in d]
        if len(used) != len(set(used)):
            raise SpecError(f"mesh axis used twice in {self}")
        if any(not 0 <= a < self.mesh_rank for a in used):
            raise SpecError(f"{self} uses an axis outside mesh rank {self.mesh_rank}")

    @classmethod
    def replicated(cls, rank: int, mesh_rank: int) -> ShardingSpec:
        return cls((REPLICATE,) * rank, mesh_rank)

    @classmethod
    def parse(cls, text: str, mesh_rank: int) -> ShardingSpec:
        text = text.strip()
        if text in ("", "-"):
            return cls((), mesh_rank)
        dims, pos = [], 0
        while pos < len(text):
            m = _TOKEN.match(text, pos)
            if not m:
                raise SpecError(f"cannot parse sharding spec {text!r} at {pos}")
            dims.append(tuple(int(c) for c in m.group(1)) if m.group(1) else ())
            pos = m.end()
        return cls(tuple(dims), mesh_rank)

    def __str__(self) -> str:
        if not self.dims:
            return "-"
        return "".join("R" if not d else "S" + "".join(map(str, d)) for d in self.dims)

    def __repr__(self) -> str:
        return f"ShardingSpec({self})"

    @property
    def rank(self) -> int:
        return len(self.dims)

    @property
    def used_axes(self) -> frozenset[int]:
        return frozenset(a for d in self.dims for a in d)

    def replace_dim(self, i: int, dim: DimSpec) -> ShardingSpec:
        dims = list(self.dims)
        dims[i] = tuple(dim)
        return ShardingSpec(tuple(dims), self.mesh_rank)

    def shard_factor(self, mesh: DeviceMesh) -> int:
        return mesh.axes_size(sorted(self.used_axes))

    def dim_factor(self, i: int, mesh: DeviceMesh) -> int:
        return mesh.axes_size(self.dims[i])

    def is_valid(self, shape: Sequence[int], mesh: DeviceMesh) -> bool:
        if len(shape) != self.rank or self.mesh_rank != mesh.rank:
            return False
        return all(extent % mesh.axes_size(d) == 0 for extent, d in zip(shape, self.dims))

    def check(self, shape: Sequence[int], mesh: DeviceMesh) -> None:
        if len(shape) != self.rank:
            raise RankMismatchError(f"spec {self} has rank {self.rank}, tensor shape {tuple(shape)}")
        if not self.is_valid(shape, mesh):
            raise SpecError(f"spec {self} invalid for shape {tuple(shape)} on mesh {mesh.shape}")

    def local_shape(self, shape: Sequence[int], mesh: DeviceMesh) -> tuple[int, ...]:
        return tuple(extent // mesh.axes_size(d) for extent, d in zip(shape, self.dims))

    def local_bytes(self, meta: TensorMeta, mesh: DeviceMesh) -> int:
        if not self.dims:
            return meta.nbytes
        return math.prod(self.local_shape(meta.shape, mesh)) * meta.dtype_bytes


def scalar_spec(mesh_rank: int) -> ShardingSpec:
    return ShardingSpec((), mesh_rank)


def enumerate_specs(shape: Sequence[int], mesh: DeviceMesh, ordered_only: bool = False) -> list[ShardingSpec]:
    """Every valid spec of a tensor on ``mesh``.

    ``ordered_only`` keeps a single (ascending) axis order per dimension.
    """
    rank = len(shape)
    out: list[ShardingSpec] = []
    seen = set()
    for choice in itertools.product(range(-1, rank), repeat=mesh.rank):
        buckets: list[list[int]] = [[] for _ in range(rank)]
        for axis, dim in enumerate(choice):
            if dim >= 0:
                buckets[dim].append(axis)
        perms = [[tuple(b)] if ordered_only else list(itertools.permutations(b)) for b in buckets]
        for dims in itertools.product(*perms):
            spec = ShardingSpec(tuple(dims), mesh.rank)
            if spec not in seen and spec.is_valid(shape, mesh):
                seen.add(spec)
                out.append(spec)
    return sorted(out, key=lambda s: (len(s.used_axes), s.dims))


@dataclass(frozen=True)
class TransformStep:
    kind: CollectiveKind
    axis: int
    src_dim: int | None
    dst_dim: int | None
    result: ShardingSpec

    def __str__(self) -> str:
        where = {
            CollectiveKind.ALL_GATHER: f"dim{self.src_dim}",
            CollectiveKind.SHARD_SLICE: f"dim{self.dst_dim}",
            CollectiveKind.ALL_TO_ALL: f"dim{self.src_dim}->dim{self.dst_dim}",
        }[self.kind]
        return f"{self.kind.value}(axis {self.axis}, {where}) -> {self.result}"


def apply_step(spec: ShardingSpec, step: TransformStep) -> ShardingSpec:
    """Replay ``step`` on ``spec`` from its kind/axis/dims alone."""
    if step.kind is CollectiveKind.ALL_GATHER:
        d = spec.dims[step.src_dim]
        if not d or d[-1] != step.axis:
            raise SpecError(f"cannot all-gather axis {step.axis} from {spec}")
        return spec.replace_dim(step.src_dim, d[:-1])
    if step.kind is CollectiveKind.SHARD_SLICE:
        if step.axis in spec.used_axes:
            raise SpecError(f"axis {step.axis} already used in {spec}")
        return spec.replace_dim(step.dst_dim, spec.dims[step.dst_dim] + (step.axis,))
    if step.kind is CollectiveKind.ALL_TO_ALL:
        d = spec.dims[step.src_dim]
        if not d or d[-1] != step.axis:
            raise SpecError(f"cannot move axis {step.axis} out of {spec}")
        mid = spec.replace_dim(step.src_dim, d[:-1])
        return mid.replace_dim(step.dst_dim, mid.dims[step.dst_dim] + (step.axis,))
    raise SpecError(f"{step.kind} does not change a sharding spec")


def one_step_transforms(spec: ShardingSpec, mesh: DeviceMesh, meta: TensorMeta) -> list[tuple[ShardingSpec, TransformStep]]:
    """All specs one all-gather, shard-slice or all-to-all away, filtered by divisibility."""
    out: list[tuple[ShardingSpec, TransformStep]] = []
    seen = {spec}

    def emit(kind, axis, src, dst):
        step_result = apply_step(spec, TransformStep(kind, axis, src, dst, spec))
        if step_result in seen or not step_result.is_valid(meta.shape, mesh):
            return
        seen.add(step_result)
        out.append((step_result, TransformStep(kind, axis, src, dst, step_result)))

    for i, d in enumerate(spec.dims):
        if d:
            emit(CollectiveKind.ALL_GATHER, d[-1], i, None)
    free = [a for a in range(mesh.rank) if a not in spec.used_axes]
    for i in range(spec.rank):
        for axis in free:
            emit(CollectiveKind.SHARD_SLICE, axis, None, i)
    for i, d in enumerate(spec.dims):
        if d:
            for j in range(spec.rank):
                if j != i:
                    emit(CollectiveKind.ALL_TO_ALL, d[-1], i, j)
    return out


@dataclass(frozen=True)
class DiffWeights:
    """Unitless weights of the layout-distance heuristic; all-gather must outweigh shard."""

    all_gather: float = 2.0
    shard: float = 1.0
    all_to_all: float = 2.0
    step_penalty: float = 2.0


DEFAULT_WEIGHTS = DiffWeights()


def dim_diff(src: DimSpec, tgt: DimSpec, weights: DiffWeights = DEFAULT_WEIGHTS) -> float:
    """Cost of the shortest per-dimension gather/shard sequence from ``src`` to ``tgt``."""
    src, tgt = tuple(src), tuple(tgt)
    common = 0
    while common < min(len(src), len(tgt)) and src[common] == tgt[common]:
        common += 1
    gathers = len(src) - common
    shards = len(tgt) - common
    steps = gathers + shards
    return gathers * weights.all_gather + shards * weights.shard + max(0, steps - 1) * weights.step_penalty


def heuristic_diff(src: ShardingSpec, tgt: ShardingSpec, weights: DiffWeights = DEFAULT_WEIGHTS) -> float:
    if src.rank != tgt.rank:
        raise RankMismatchError(f"cannot compare {src} (rank {src.rank}) with {tgt} (rank {tgt.rank})")
    return sum(dim_diff(s, t, weights) for s, t in zip(src.dims, tgt.dims))


@dataclass(frozen=True)
class TransformPath:
    source: ShardingSpec
    target: ShardingSpec
    steps: tuple[TransformStep, ...]
    comm_cost_s: float

    def __len__(self) -> int:
        return len(self.steps)

    def specs(self) -> Iterator[ShardingSpec]:
        yield self.source
        for s in self.steps:
            yield s.result

    def replay(self) -> ShardingSpec:
        spec = self.source
        for step in self.steps:
            spec = apply_step(spec, step)
        return spec

    def __str__(self) -> str:
        return " -> ".join(str(s) for s in self.specs())


def conversion_cost(path: TransformPath | Iterable[TransformStep], mesh: DeviceMesh, meta: TensorMeta,
                    source: ShardingSpec | None = None) -> float:
    """Sum of step costs; each step moves the per-device shard it starts from."""
    if isinstance(path, TransformPath):
        spec, steps = path.source, path.steps
    else:
        spec, steps = source, list(path)
    total = 0.0
    for step in steps:
        total += collective_cost(mesh, [step.axis], step.kind, spec.local_bytes(meta, mesh))
        spec = step.result
    return total


def find_transform_path(src: ShardingSpec, tgt: ShardingSpec, mesh: DeviceMesh, meta: TensorMeta,
                        weights: DiffWeights = DEFAULT_WEIGHTS, stats: dict | None = None) -> TransformPath:
    """Greedy best-first search on ``heuristic_diff`` with a closed set.

    Always picks the frontier spec closest to the target (ties: shallower,
    then generation order); the closed set backtracks out of plateaus, so the
    search visits every valid spec at most once.
    """
    if src.rank != tgt.rank:
        raise RankMismatchError(f"cannot convert rank {src.rank} spec {src} to rank {tgt.rank} spec {tgt}")
    src.check(meta.shape, mesh)
    tgt.check(meta.shape, mesh)
    if src == tgt:
        return TransformPath(src, tgt, (), 0.0)
    parent: dict[ShardingSpec, tuple[ShardingSpec, TransformStep] | None] = {src: None}
    tie = itertools.count()
    frontier = [(heuristic_diff(src, tgt, weights), 0, next(tie), src)]
    expanded = 0
    while frontier:
        _, depth, _, cur = heapq.heappop(frontier)
        expanded += 1
        for nxt, step in one_step_transforms(cur, mesh, meta):
            if nxt in parent:
                continue
            parent[nxt] = (cur, step)
            if nxt == tgt:
                steps = []
                node = nxt
                while parent[node] is not None:
                    prev, st = parent[node]
                    steps.append(st)
                    node = prev
                steps.reverse()
                if stats is not None:
                    stats["expanded"] = expanded
                path = TransformPath(src, tgt, tuple(steps), 0.0)
                return TransformPath(src, tgt, path.steps, conversion_cost(path, mesh, meta))
            heapq.heappush(frontier, (heuristic_diff(nxt, tgt, weights), depth + 1, next(tie), nxt))
    raise AssertionError(f"no path from {src} to {tgt}; transform graph should be connected")


def bfs_path_length(src: ShardingSpec, tgt: ShardingSpec, mesh: DeviceMesh, meta: TensorMeta) -> int:
    """Fewest one-step transforms between two specs (exhaustive search)."""
    if src == tgt:
        return 0
    dist = {src: 0}
    queue = deque([src])
    while queue:
        cur = queue.popleft()
        for nxt, _ in one_step_transforms(cur, mesh, meta):
            if nxt not in dist:
                dist[nxt] = dist[cur] + 1
                if nxt == tgt:
                    return dist[nxt]
                queue.append(nxt)
    raise AssertionError(f"{tgt} unreachable from {src}")


class LayoutManager:
    """Memoises conversion paths; safe to share between threads."""

    def __init__(self, weights: DiffWeights = DEFAULT_WEIGHTS):
        self.weights = weights
        self._cache: dict[tuple, TransformPath] = {}
        self._lock = threading.Lock()
        self.searches = 0

    @staticmethod
    def key(src: ShardingSpec, tgt: ShardingSpec, mesh: DeviceMesh, meta: TensorMeta) -> tuple:
        return (src, tgt, mesh.key, meta.shape, meta.dtype_bytes)

    def cached_path(self, src: ShardingSpec, tgt: ShardingSpec, mesh: DeviceMesh, meta: TensorMeta) -> TransformPath:
        k = self.key(src, tgt, mesh, meta)
        with self._lock:
            hit = self._cache.get(k)
        if hit is not None:
            return hit
        path = find_transform_path(src, tgt, mesh, meta, self.weights)
        with self._lock:
            self.searches += 1
            return self._cache.setdefault(k, path)

    def cost(self, src: ShardingSpec, tgt: ShardingSpec, mesh: DeviceMesh, meta: TensorMeta) -> float:
        if src == tgt:
            return 0.0
        return self.cached_path(src, tgt, mesh, meta).comm_cost_s

    def clear(self) -> None:
        with self._lock:
            self._cache.clear()

    def __len__(self) -> int:
        return len(self._cache)


_default_manager = LayoutManager()


def cached_path(src: ShardingSpec, tgt: ShardingSpec, mesh: DeviceMesh, meta: TensorMeta) -> TransformPath:
    return _default_manager.cached_path(src, tgt, mesh, meta)
