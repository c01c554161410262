import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autoplan.cluster import CollectiveKind, DeviceMesh
from autoplan.errors import RankMismatchError, SpecError
from autoplan.graph import TensorMeta
from autoplan.layout import (LayoutManager, ShardingSpec, TransformPath, bfs_path_length, conversion_cost, dim_diff,
                             enumerate_specs, find_transform_path, heuristic_diff, one_step_transforms)

MESH = DeviceMesh.uniform([2, 4])
META = TensorMeta((8, 8), 4)


def S(text, rank=2):
    return ShardingSpec.parse(text, rank)


def results(spec, mesh=MESH, meta=META):
    return {str(s) for s, _ in one_step_transforms(spec, mesh, meta)}


def test_parse_and_print():
    assert str(S("S01R")) == "S01R"
    assert S("RS1").dims == ((), (1,))
    with pytest.raises(SpecError):
        S("S0S0")
    with pytest.raises(SpecError):
        S("S2R")


def test_one_step_of_s0r():
    assert results(S("S0R")) == {"RR", "S0S1", "S01R", "RS0"}


def test_one_step_of_rr_is_shard_only():
    out = one_step_transforms(S("RR"), MESH, META)
    assert {str(s) for s, _ in out} == {"S0R", "S1R", "RS0", "RS1"}
    assert all(step.kind is CollectiveKind.SHARD_SLICE for _, step in out)


def test_divisibility_excludes_odd_dim():
    assert "S0R" not in results(S("RR"), meta=TensorMeta((3, 8), 4))
    assert "RS0" in results(S("RR"), meta=TensorMeta((3, 8), 4))


def test_rank0_has_no_transforms():
    assert one_step_transforms(ShardingSpec((), 2), MESH, TensorMeta((), 4)) == []


def test_dim_diff_values():
    assert dim_diff((), ()) == 0
    assert dim_diff((0,), (1,)) == 5
    assert dim_diff((0,), ()) == 2
    assert dim_diff((), (0,)) == 1


def test_heuristic_diff_values():
    assert heuristic_diff(S("S0R"), S("S0R")) == 0
    assert heuristic_diff(S("S0R"), S("RS0")) == 3
    assert heuristic_diff(S("S0S1"), S("RR")) == 4
    with pytest.raises(RankMismatchError):
        heuristic_diff(S("S0R"), S("R"))


def test_identity_path():
    p = find_transform_path(S("S0R"), S("S0R"), MESH, META)
    assert len(p) == 0 and p.comm_cost_s == 0


def test_s0r_to_rs0_is_one_all_to_all():
    p = find_transform_path(S("S0R"), S("RS0"), MESH, META)
    assert [s.kind for s in p.steps] == [CollectiveKind.ALL_TO_ALL]


def test_s01r_to_rr_gathers_inner_axis_first():
    p = find_transform_path(S("S01R"), S("RR"), MESH, META)
    assert [(s.kind, s.axis) for s in p.steps] == [(CollectiveKind.ALL_GATHER, 1), (CollectiveKind.ALL_GATHER, 0)]
    assert bfs_path_length(S("S01R"), S("RR"), MESH, META) == 2


def test_rank_mismatch_path():
    with pytest.raises(RankMismatchError):
        find_transform_path(S("S0R"), S("S0"), MESH, META)


def test_conversion_cost_examples():
    mesh = DeviceMesh.uniform([4], 1e-5, 1e-9)
    meta = TensorMeta((1024, 1024), 4)
    p = find_transform_path(S("S0R", 1), S("RR", 1), mesh, meta)
    assert conversion_cost(p, mesh, meta) == pytest.approx(3e-5 + 0.75 * 1_048_576 * 1e-9)
    assert p.comm_cost_s == pytest.approx(8.164e-4, rel=1e-3)
    empty = TransformPath(S("RR", 1), S("RR", 1), (), 0.0)
    assert conversion_cost(empty, mesh, meta) == 0


def test_two_step_cost_is_additive():
    mesh = DeviceMesh.uniform([2, 4], [1e-5, 2e-6], [1e-9, 3e-10])
    meta = TensorMeta((64, 64), 4)
    p = find_transform_path(S("S01R"), S("RR"), mesh, meta)
    spec, parts = p.source, []
    for step in p.steps:
        parts.append(conversion_cost([step], mesh, meta, source=spec))
        spec = step.result
    assert p.comm_cost_s == pytest.approx(sum(parts))


def test_cache_counts_searches():
    lm = LayoutManager()
    a = lm.cached_path(S("S0R"), S("RS1"), MESH, META)
    b = lm.cached_path(S("S0R"), S("RS1"), MESH, META)
    assert a is b and lm.searches == 1
    other = DeviceMesh.uniform([2, 4], 2e-5, 1e-9)
    assert lm.key(S("S0R"), S("RS1"), MESH, META) != lm.key(S("S0R"), S("RS1"), other, META)
    lm.cached_path(S("S0R"), S("RS1"), other, META)
    assert lm.searches == 2
    lm.clear()
    assert lm.cached_path(S("S0R"), S("RS1"), MESH, META) == a


def test_expansions_bounded_by_spec_count():
    specs = enumerate_specs(META.shape, MESH)
    for tgt in specs:
        stats = {}
        find_transform_path(S("S01R"), tgt, MESH, META, stats=stats)
        assert stats.get("expanded", 0) <= len(specs)


@st.composite
def spec_pairs(draw):
    mesh_shape = draw(st.lists(st.sampled_from([1, 2, 3]), min_size=1, max_size=3))
    rank = draw(st.integers(1, 3))
    shape = tuple(draw(st.sampled_from([6, 12, 18])) for _ in range(rank))
    mesh = DeviceMesh.uniform(mesh_shape)
    specs = enumerate_specs(shape, mesh)
    return mesh, TensorMeta(shape, 4), draw(st.sampled_from(specs)), draw(st.sampled_from(specs))


@settings(max_examples=150, deadline=None)
@given(spec_pairs())
def test_paths_replay(case):
    mesh, meta, src, tgt = case
    path = find_transform_path(src, tgt, mesh, meta)
    assert path.replay() == tgt
    for spec in path.specs():
        assert spec.is_valid(meta.shape, mesh)
    assert (heuristic_diff(src, tgt) == 0) == (src == tgt)
