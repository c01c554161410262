import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autoplan.ckpt import (Decision, StageCost, build_stages, check_linear, default_seeds, linearize,
                           propagate_common_nodes, rotor_solve, schedule_decisions, tree_memory, tree_time)
from autoplan.ckpt.rotor import CheckpointSchedule, no_recompute_time, thresholds
from autoplan.cluster import DeviceMesh
from autoplan.errors import InfeasibleError, NonDagError, SeedError
from autoplan.fixtures import load_fixture_graph
from autoplan.graph import ComputationGraph, Kind, infer_meta
from autoplan.intraop import build_strategy_table
from autoplan.planner import insert_comm_nodes

from builders import chain, graph, op, param, src
from oracles import best_schedule, rotor_reference

FIELDS = ("u_f", "u_b", "u_fcomm", "u_bcomm", "o_f", "o_b", "o_fcomm", "o_bcomm", "w_a", "w_abar", "w_delta")


def stage(**kw):
    return StageCost(**kw)


def as_dicts(stages):
    return [s.to_dict() for s in stages]


def pick(table, host, name):
    return next(i for i, s in enumerate(table.strategies[host]) if s.name == name or s.name == f" -> {name}")


# -- common nodes --------------------------------------------------------------

def masked_graph():
    return graph(
        src("x", (4, 8, 16), grad=True),
        src("mask", (4, 8, 8), dtype_bytes=1, dtype="bool"),
        op("mask_r", "reshape", "mask", shape=[4, 64]),
        op("mask_s", "getitem", "mask", dim=0, start=0, stop=4),
        op("kt", "transpose", "x", perm=[0, 2, 1]),
        op("scores", "batched-matmul", "x", "kt"),
        op("probs", "softmax", "scores", "mask", axis=-1),
        op("mixed", "elementwise-binary", "scores", "mask_s", op="add"),
        output_of="probs",
    )


def test_no_seeds_no_common():
    assert propagate_common_nodes(chain(3)) == set()


def test_mask_closure():
    g = masked_graph()
    common = propagate_common_nodes(g, default_seeds(g))
    assert {"mask", "mask_r", "mask_s"} <= common
    assert "probs" not in common and "mixed" not in common and "scores" not in common


def test_closure_is_fixpoint():
    g = infer_meta(load_fixture_graph("transformer_2block"))
    once = propagate_common_nodes(g, default_seeds(g))
    assert propagate_common_nodes(g, once) == once


def test_seed_checks():
    g = masked_graph()
    with pytest.raises(SeedError):
        propagate_common_nodes(g, {"x"})
    with pytest.raises(SeedError):
        propagate_common_nodes(g, {"nope"})


# -- linearization -------------------------------------------------------------

def test_chain_gives_one_group_per_op():
    groups = linearize(chain(4))
    assert [g.members for g in groups] == [("a0",), ("a1",), ("a2",), ("a3",)]


def test_residual_block_is_one_group():
    g = graph(src("x0", (8, 8), grad=True), op("x", "elementwise-unary", "x0", op="relu"),
              op("A", "elementwise-unary", "x", op="relu"), op("B", "elementwise-unary", "A", op="relu"),
              op("add", "elementwise-binary", "x", "B", op="add"))
    groups = linearize(g)
    # x empties the pool before its own children are counted, so it ends the previous group
    assert [grp.members for grp in groups] == [("x",), ("A", "B", "add")]
    assert groups[-1].last == "add"


def test_in_place_child_sticks_to_parent():
    g = graph(src("x", (8, 8), grad=True), op("a", "elementwise-unary", "x", op="relu"),
              op("b", "elementwise-unary", "a", op="relu", in_place=True),
              op("c", "elementwise-unary", "b", op="relu"))
    assert [grp.members for grp in linearize(g)] == [("a", "b"), ("c",)]


def test_transformer_splits_per_block():
    g = infer_meta(load_fixture_graph("transformer_2block"))
    common = propagate_common_nodes(g, default_seeds(g))
    assert "mask_r" in common
    groups = linearize(g, common)
    assert len(groups) > 3
    for grp in groups:
        assert len({m.split("_")[0] for m in grp.members if m != "mask_r"}) <= 1
    assert check_linear(g, groups, common) == []
    # without the mask being common, one group swallows most of both blocks
    merged = linearize(g, set())
    assert any({"b0_ln", "b1_ln"} <= set(grp.members) for grp in merged)


def test_cycle_is_non_dag():
    g = chain(2)
    nodes = dict(g.nodes)
    nodes["a0"] = nodes["a0"].__class__(**{**nodes["a0"].__dict__, "inputs": (("a1", 0),)})
    with pytest.raises(NonDagError):
        linearize(ComputationGraph(nodes, g.placeholders, g.output))


OPS = ["elementwise-unary", "elementwise-binary"]


@st.composite
def random_dags(draw):
    n = draw(st.integers(1, 12))
    nodes = [src("x", (4, 4), grad=True)]
    if draw(st.booleans()):
        nodes.append(src("m", (4, 4), dtype_bytes=1, dtype="bool"))
    ids = [nd["id"] for nd in nodes]
    for i in range(n):
        kind = draw(st.sampled_from(OPS))
        if kind == "elementwise-unary":
            nodes.append(op(f"n{i}", kind, draw(st.sampled_from(ids)), op="relu",
                            in_place=draw(st.booleans()) and i > 0))
        else:
            a, b = draw(st.sampled_from(ids)), draw(st.sampled_from(ids))
            nodes.append(op(f"n{i}", kind, a, b, op="add"))
        ids.append(f"n{i}")
    return graph(*nodes)


@settings(max_examples=200, deadline=None)
@given(random_dags())
def test_linearization_is_sound(g):
    common = propagate_common_nodes(g, default_seeds(g))
    groups = linearize(g, common)
    assert check_linear(g, groups, common) == []
    members = [m for grp in groups for m in grp.members]
    assert len(members) == len(set(members))
    assert set(members) == {n for n in g.topo_order if g[n].kind not in (Kind.PLACEHOLDER, Kind.OUTPUT)}


# -- stage costs ---------------------------------------------------------------

def test_replicated_elementwise_group_has_no_comm():
    g = graph(src("x", (8, 8), grad=True), op("a", "matmul", "x", "x"), op("r", "elementwise-unary", "a", op="relu"),
              op("b", "matmul", "r", "r"))
    mesh = DeviceMesh.uniform([2])
    table = build_strategy_table(g, mesh)
    sel = {h: pick(table, h, name) for h, name in
           (("x", "RR"), ("a", "RR x RR -> RR"), ("b", "RR x RR -> RR"))}
    model = build_stages(insert_comm_nodes(table, sel))
    assert all(s.u_fcomm == 0 and s.o_fcomm == 0 for s in model.stages)


def test_split_k_group_carries_all_reduce():
    g = graph(src("x", (64, 128)), param("w", (128, 256)), op("c", "matmul", "x", "w"))
    mesh = DeviceMesh.uniform([2])
    table = build_strategy_table(g, mesh)
    k = pick(table, "c", "RS0 x S0R -> RR +all-reduce[0]")
    sel = {"x": pick(table, "x", "RS0"), "c": k}
    dg = insert_comm_nodes(table, sel)
    [grp] = [grp for grp in build_stages(dg).groups if "c" in grp.members]
    assert "c__allreduce" in grp.members
    st_ = build_stages(dg).stages[grp.index]
    assert st_.u_fcomm == pytest.approx(table.strategies["c"][k].comm_time_s)
    assert st_.o_fcomm == 64 * 256 * 4


def test_boundary_bytes_of_sharded_tensor():
    g = graph(src("x", (1024, 1024), grad=True), op("a", "matmul", "x", "x"),
              op("b", "elementwise-unary", "a", op="relu"), op("c", "matmul", "b", "b"))
    mesh = DeviceMesh.uniform([4, 2])
    table = build_strategy_table(g, mesh)
    a = next(i for i, s in enumerate(table.strategies["a"]) if str(s.output_spec) == "S0R")
    c = next(i for i, s in enumerate(table.strategies["c"]) if str(s.input_specs[0]) == "S0R")
    x = next(i for i, s in enumerate(table.strategies["x"]) if str(s.output_spec) == "RR")
    dg = insert_comm_nodes(table, {"x": x, "a": a, "c": c})
    model = build_stages(dg)
    first = next(i for i, grp in enumerate(model.groups) if "a" in grp.members)
    assert str(dg.specs["b"]) == "S0R"
    assert model.stages[first].w_a == 1024 * 1024 * 4 // 4


# -- checkpoint DP -------------------------------------------------------------

def test_single_stage():
    s = stage(u_f=1, u_fcomm=0.5, u_b=2, u_bcomm=0.25, w_abar=4, w_a=2, w_delta=2, o_f=1, o_b=1)
    need = thresholds([s]).m_all[0, 0]
    sched = rotor_solve([s], need, slot_bytes=1)
    assert sched.total_time_s == 3.75
    assert sched.decisions == [Decision.ALL]
    with pytest.raises(InfeasibleError):
        rotor_solve([s], need - 1, slot_bytes=1)


def test_bad_inputs():
    with pytest.raises(ValueError):
        rotor_solve([], 10)
    with pytest.raises(InfeasibleError):
        rotor_solve([stage()], 0)


def test_uniform_chain_matches_oracle():
    chain_ = [stage(u_f=1, u_b=1, w_a=1, w_abar=3, w_delta=1) for _ in range(4)]
    for budget in range(1, 16):
        ref = best_schedule(as_dicts(chain_), budget)
        if ref is None:
            with pytest.raises(InfeasibleError):
                rotor_solve(chain_, budget, slot_bytes=1)
        else:
            sched = rotor_solve(chain_, budget, slot_bytes=1)
            assert sched.total_time_s == ref
            assert tree_time(sched.tree, chain_) == sched.total_time_s
            assert sched.peak_memory_bytes <= budget


def test_ample_budget_means_no_recompute():
    chain_ = [stage(u_f=1, u_b=2, u_fcomm=0.5, w_a=1, w_abar=3, w_delta=1, o_f=1) for _ in range(5)]
    sched = rotor_solve(chain_, 10_000, slot_bytes=1)
    assert sched.total_time_s == no_recompute_time(chain_)
    assert all(d is Decision.ALL for d in sched.decisions)


def test_schedule_round_trip():
    chain_ = [stage(u_f=1, u_b=1, w_a=1, w_abar=3, w_delta=1) for _ in range(4)]
    sched = rotor_solve(chain_, 8, slot_bytes=1)
    again = CheckpointSchedule.from_dict(sched.to_dict())
    assert again == sched


def random_chain(rng, comm=True, L=None):
    L = L or rng.randint(1, 5)
    out = []
    for _ in range(L):
        v = {f: rng.randint(0, 10) for f in FIELDS}
        if not comm:
            v.update(u_fcomm=0, u_bcomm=0, o_fcomm=0, o_bcomm=0)
        v["w_delta"] = v["w_a"]
        out.append(StageCost(**{k: (float(x) if k.startswith("u_") else x) for k, x in v.items()}))
    return out


def budgets_over(stages):
    th = thresholds(stages)
    hi = sum(s.w_abar for s in stages) + int(max(max(th.m_all.flat), max(th.m_none.flat))) + 2
    return range(1, hi + 1)


@settings(max_examples=120, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dp_equals_exhaustive(seed):
    rng = random.Random(seed)
    stages = random_chain(rng)
    budget = rng.choice(list(budgets_over(stages)))
    ref = best_schedule(as_dicts(stages), budget)
    if ref is None:
        with pytest.raises(InfeasibleError):
            rotor_solve(stages, budget, slot_bytes=1)
        return
    sched = rotor_solve(stages, budget, slot_bytes=1)
    assert sched.total_time_s == ref
    assert sched.peak_memory_bytes == tree_memory(sched.tree, stages) <= budget


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_zero_comm_matches_original_recurrence(seed):
    rng = random.Random(seed)
    stages = random_chain(rng, comm=False)
    for budget in budgets_over(stages):
        ref = rotor_reference(as_dicts(stages), budget)
        try:
            got = rotor_solve(stages, budget, slot_bytes=1).total_time_s
        except InfeasibleError:
            got = None
        assert got == ref


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_budget_monotone(seed):
    rng = random.Random(seed)
    stages = random_chain(rng)
    prev = None
    for budget in budgets_over(stages):
        try:
            t = rotor_solve(stages, budget, slot_bytes=1).total_time_s
        except InfeasibleError:
            assert prev is None
            continue
        assert prev is None or t <= prev
        prev = t
    assert prev == no_recompute_time(stages)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.3, 7.0))
def test_quantized_schedule_fits_true_budget(seed, slot):
    rng = random.Random(seed)
    stages = [StageCost(**{**s.to_dict(), **{k: getattr(s, k) * 1000 + rng.randint(0, 999)
                                              for k in ("o_f", "o_b", "w_abar")}})
              for s in (random_chain(rng))]
    budget = rng.randint(1000, 60_000)
    try:
        sched = rotor_solve(stages, budget, slot_bytes=slot * 100)
    except InfeasibleError:
        return
    assert sched.peak_memory_bytes <= budget


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_blocks_contiguous(seed):
    rng = random.Random(seed)
    stages = random_chain(rng, L=5)
    budget = rng.choice(list(budgets_over(stages)))
    try:
        sched = rotor_solve(stages, budget, slot_bytes=1)
    except InfeasibleError:
        return
    decisions, blocks = schedule_decisions(sched.tree, len(stages))
    assert decisions == sched.decisions and blocks == sched.blocks
    used = [b for b in blocks if b is not None]
    assert used == sorted(used) and set(used) == set(range(len(set(used))))
    for d, b in zip(decisions, blocks):
        assert (b is None) == (d is Decision.ALL)
