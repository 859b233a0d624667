from __future__ import annotations

import itertools
import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orchardplan.bench import gen_instance
from orchardplan.decoder import RobotProfile, decode
from orchardplan.geo import load_farm
from orchardplan.mission import TASK_TYPES
from orchardplan.simulator import BUDGET_VIOLATED, execute
from orchardplan.sop import (
    INFEASIBLE,
    TOO_LARGE,
    UNKNOWN_NODE,
    MatrixEdgeModel,
    OnlineGuard,
    OnlinePolicy,
    OnlineState,
    SOPError,
    SOPInstance,
    SOPNode,
    adversarial_instance,
    build_instance,
    evaluate,
    online_plan,
    paired_pvalue,
    route_plan,
    solve_exact,
    solve_greedy_offline,
    solve_online_step,
    trial_multipliers,
)

from conftest import farm_geojson, grid_geojson

GRID = load_farm(grid_geojson(2, 2))


def inst_of(points, budget, variance=0.0, rewards=None):
    """Instance from raw coordinates; first point is start, last is end."""
    ids = ["s"] + [f"t{i}" for i in range(len(points) - 2)] + ["z"]
    rewards = rewards or [1.0] * (len(points) - 2)
    w = [0.0] + list(rewards) + [0.0]
    nodes = tuple(SOPNode(i, float(x), float(y), r) for i, (x, y), r in zip(ids, points, w))
    return SOPInstance(nodes, "s", "z", budget, variance)


def pdist_max(inst):
    return float(inst.D.max())


# ---------------------------------------------------------------- build


def test_build_normalizes_grid():
    inst = build_instance(GRID, GRID.tree_ids, budget=2.0, start="g00", end="g11")
    assert pdist_max(inst) == pytest.approx(1.0, abs=1e-12)
    assert inst.scale_m == pytest.approx(math.hypot(10, 10))
    assert inst.budget == 2.0


def test_default_rewards_and_explicit():
    inst = build_instance(GRID, GRID.tree_ids)
    assert [n.reward for n in inst.nodes if n.id != "home"] == [1.0] * 4
    assert inst.nodes[0].id == "home" and inst.start == inst.end == "home"
    inst = build_instance(GRID, ["g00", "g01"], rewards=[2.0, 3.0])
    assert inst.route_reward(("home", "g00", "g01", "home")) == 5.0


def test_unknown_target():
    with pytest.raises(SOPError) as err:
        build_instance(GRID, ["g00", "nope"])
    assert err.value.code == UNKNOWN_NODE


@settings(max_examples=40, deadline=None)
@given(st.floats(0.1, 50.0), st.lists(st.tuples(st.integers(-40, 40), st.integers(-40, 40)), min_size=2, max_size=6,
                                      unique=True))
def test_normalization_is_scale_free(k, pts):
    """A uniformly scaled farm gives the same normalized instance."""
    def farm(scale):
        trees = {f"t{i}": (x * scale, y * scale) for i, (x, y) in enumerate(pts)}
        h = 45 * scale
        return load_farm(farm_geojson(trees, [(-h, -h), (h, -h), (h, h), (-h, h)], (0.0, 0.0)))

    a = build_instance(farm(1.0), [f"t{i}" for i in range(len(pts))])
    b = build_instance(farm(k), [f"t{i}" for i in range(len(pts))])
    np.testing.assert_allclose(a.P, b.P, atol=1e-6)
    assert b.scale_m == pytest.approx(a.scale_m * k, rel=1e-6)


def test_instance_json_round_trip():
    inst = adversarial_instance()
    again = SOPInstance.from_json(inst.to_json())
    assert again == inst
    assert json.loads(inst.to_json())["budget"] == 1.8


# ---------------------------------------------------------------- greedy


def test_greedy_collinear():
    inst = inst_of([(0, 0), (0.25, 0), (0.5, 0), (1, 0)], budget=1.0)
    assert solve_greedy_offline(inst) == ("s", "t0", "t1", "z")


def test_greedy_boundary_budget():
    inst = inst_of([(0, 0), (0.5, 0.3), (1, 0)], budget=1.0)
    route = solve_greedy_offline(inst)
    assert route == ("s", "z")
    m = evaluate(route, inst, 10)
    assert (m.R, m.F) == (0.0, 0.0)


def test_greedy_infeasible():
    inst = inst_of([(0, 0), (0.5, 0.3), (1, 0)], budget=0.99)
    with pytest.raises(SOPError) as err:
        solve_greedy_offline(inst)
    assert err.value.code == INFEASIBLE


def test_greedy_prefers_ratio():
    # t0 is close with reward 1, t1 farther with reward 4: ratio favours t1
    inst = inst_of([(0, 0), (0.1, 0), (0.3, 0.0), (1, 0)], budget=1.0, rewards=[1.0, 4.0])
    assert solve_greedy_offline(inst)[1] == "t1"


# ---------------------------------------------------------------- online step


@pytest.mark.parametrize("scoring", ["plan", "ratio"])
def test_online_exactly_affordable(scoring):
    inst = inst_of([(0, 0), (0.3, 0.4), (1, 0)], budget=10.0)
    need = 0.5 + math.hypot(0.7, 0.4)
    state = OnlineState("s", need, frozenset({"t0"}))
    assert solve_online_step(state, inst, policy=OnlinePolicy(scoring=scoring)) == "t0"
    state = OnlineState("s", need - 1e-9, frozenset({"t0"}))
    assert solve_online_step(state, inst, policy=OnlinePolicy(scoring=scoring)) == "z"


def test_online_returns_end_when_nothing_safe():
    inst = inst_of([(0, 0), (0.5, 0.5), (0.5, -0.5), (1, 0)], budget=3.0, variance=0.1)
    state = OnlineState("s", 1.2, frozenset({"t0", "t1"}))
    assert solve_online_step(state, inst) == "z"
    assert solve_online_step(OnlineState("s", 1.2, frozenset()), inst) == "z"


@pytest.mark.parametrize("scoring", ["plan", "ratio"])
def test_online_tie_by_id(scoring):
    inst = inst_of([(0, 0), (0.5, 0.2), (0.5, -0.2), (1, 0)], budget=1.2)
    state = OnlineState("s", 1.2, frozenset({"t0", "t1"}))
    assert solve_online_step(state, inst, policy=OnlinePolicy(scoring=scoring)) == "t0"
    swapped = inst_of([(0, 0), (0.5, -0.2), (0.5, 0.2), (1, 0)], budget=1.2)
    assert solve_online_step(state, swapped, policy=OnlinePolicy(scoring=scoring)) == "t0"


def test_online_risk_filter_tightens_with_variance():
    """A leg that just fits on the mean is rejected once it is random."""
    inst = inst_of([(0, 0), (0.5, 0.3), (1, 0)], budget=1.2, variance=0.2)
    need = 2 * math.hypot(0.5, 0.3)
    state = OnlineState("s", need + 0.01, frozenset({"t0"}))
    assert solve_online_step(state, inst, delta=0.1) == "z"
    assert solve_online_step(state, inst, delta=0.9) == "t0"


def test_online_rejects_negative_budget():
    inst = inst_of([(0, 0), (1, 0)], budget=1.0)
    with pytest.raises(ValueError):
        solve_online_step(OnlineState("s", -0.1, frozenset()), inst)


def test_rollout_feasibility_agrees_in_the_easy_case():
    inst = inst_of([(0, 0), (0.2, 0.1), (1, 0)], budget=2.0, variance=0.1)
    state = OnlineState("s", 2.0, frozenset({"t0"}))
    assert solve_online_step(state, inst, policy=OnlinePolicy(feasibility="rollout")) == "t0"


# ---------------------------------------------------------------- exact


def brute_force(inst: SOPInstance) -> float:
    """Best reward over every ordered subset with mean length within budget (v = 0)."""
    ids = [n.id for n in inst.nodes if n.id not in (inst.start, inst.end)]
    best = 0.0
    for k in range(len(ids) + 1):
        for perm in itertools.permutations(ids, k):
            route = (inst.start, *perm, inst.end)
            if inst.route_length(route) <= inst.budget:
                best = max(best, inst.route_reward(route))
    return best


def test_exact_full_tour():
    inst = inst_of([(0, 0), (0.2, 0.3), (0.6, -0.2), (0.8, 0.4), (1, 0)], budget=5.0, rewards=[1.0, 2.0, 3.0])
    route = solve_exact(inst, 20)
    assert set(route[1:-1]) == {"t0", "t1", "t2"}
    assert inst.route_reward(route) == brute_force(inst) == 6.0


def test_exact_single_detour():
    pts = [(0, 0), (0.5, 0.2), (0.5, -0.25), (0.5, 0.3), (1, 0)]
    inst = inst_of(pts, budget=2 * math.hypot(0.5, 0.3) + 1e-9, rewards=[1.0, 2.0, 5.0])
    route = solve_exact(inst, 20)
    assert route == ("s", "t2", "z")
    assert inst.route_reward(route) == brute_force(inst) == 5.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6), st.floats(1.0, 2.5))
def test_exact_matches_brute_force_deterministic(seed, n, budget):
    inst = replace(gen_instance(n, seed), variance=0.0, budget=budget)
    assert inst.route_reward(solve_exact(inst, 5)) == pytest.approx(brute_force(inst))


def test_exact_too_large():
    with pytest.raises(SOPError) as err:
        solve_exact(gen_instance(11, 0))
    assert err.value.code == TOO_LARGE
    solve_exact(gen_instance(10, 0, budget=1.3), 5)


def test_exact_dominates_greedy():
    for seed in range(5):
        inst = gen_instance(7, seed)
        ex = evaluate(solve_exact(inst, 100, seed), inst, 100, seed)
        gr = evaluate(solve_greedy_offline(inst), inst, 100, seed)
        assert ex.R >= gr.R - 2 * math.hypot(ex.R_stderr, gr.R_stderr)


# ---------------------------------------------------------------- evaluate


def test_evaluate_in_budget_deterministic():
    inst = inst_of([(0, 0), (0.25, 0), (0.5, 0), (1, 0)], budget=1.0, rewards=[2.0, 3.0])
    m = evaluate(("s", "t0", "t1", "z"), inst, 50)
    assert (m.R, m.F, m.R_stderr) == (5.0, 0.0, 0.0)


def test_evaluate_always_over():
    inst = inst_of([(0, 0), (0.5, 3.0), (1, 0)], budget=1.0)
    m = evaluate(("s", "t0", "z"), inst, 30)
    assert m.F == 1.0 and m.R == 0.0


def test_evaluate_eleven_failures():
    inst = inst_of([(0, 0), (0.5, 0.5), (1, 0)], budget=10.0, variance=0.2)
    legs = [(0, 1), (1, 2)]
    totals = sorted(sum(inst.D[a, b] * trial_multipliers(inst, 3, t)[a, b] for a, b in legs) for t in range(100))
    budget = (totals[88] + totals[89]) / 2
    m = evaluate(("s", "t0", "z"), replace(inst, budget=budget), 100, seed=3)
    assert m.F == 0.11
    assert sum(m.failures) == 11


def test_evaluate_single_trial_stderr():
    m = evaluate(("s", "z"), inst_of([(0, 0), (1, 0)], 1.0), 1)
    assert math.isnan(m.R_stderr) and m.stderr_text() == "n/a" and m.to_dict()["R_stderr"] is None
    with pytest.raises(ValueError):
        evaluate(("s", "z"), inst_of([(0, 0), (1, 0)], 1.0), 0)


def test_evaluate_seeded():
    inst = gen_instance(12, 4)
    a = evaluate(OnlinePolicy(), inst, 20, 9)
    b = evaluate(OnlinePolicy(), inst, 20, 9)
    assert a.samples == b.samples and a == b


def test_paired_pvalue_edges():
    inst = inst_of([(0, 0), (0.25, 0), (1, 0)], budget=1.0)
    full = evaluate(("s", "t0", "z"), inst, 5)
    empty = evaluate(("s", "z"), inst, 5)
    assert paired_pvalue(full, empty) == 0.0
    assert paired_pvalue(empty, full) == 1.0


# ---------------------------------------------------------------- invariants


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 15), st.floats(1.0, 3.0))
def test_online_safe_without_noise(seed, n, budget):
    inst = gen_instance(n, seed, budget=budget, variance=0.0)
    m = evaluate(OnlinePolicy(0.1), inst, 3)
    assert m.F == 0.0
    assert m.R <= float(inst.r.sum()) + 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 20), st.floats(0.02, 0.5))
def test_failure_rate_monotone_in_budget(seed, n, v):
    inst = gen_instance(n, seed, variance=v)
    route = solve_greedy_offline(inst)
    grid = np.linspace(1.0, 3.0, 9)
    fs = [evaluate(route, replace(inst, budget=float(b)), 40, seed).F for b in grid]
    assert all(a >= b for a, b in zip(fs, fs[1:]))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 25), st.floats(0.0, 0.4))
def test_metrics_ranges(seed, n, v):
    inst = gen_instance(n, seed, variance=v)
    for strat in (solve_greedy_offline(inst), OnlinePolicy()):
        m = evaluate(strat, inst, 10, seed)
        assert 0.0 <= m.F <= 1.0
        assert 0.0 <= m.R <= float(inst.r.sum()) + 1e-9


def test_adversarial_ordering():
    inst = adversarial_instance()
    greedy = solve_greedy_offline(inst)
    # greedy reaches the far cluster with a large mean-cost slack it can no longer use
    assert inst.budget - inst.route_length(greedy) > 0.5
    g = evaluate(greedy, inst, 100, 0)
    o = evaluate(OnlinePolicy(), inst, 100, 0)
    assert o.R > g.R
    assert paired_pvalue(o, g) < 0.01


# ---------------------------------------------------------------- executor equivalence


def farm_instance(variance):
    farm = load_farm(grid_geojson(3, 4, deploy=(-20.0, -15.0)))
    inst = build_instance(farm, farm.tree_ids, budget=2.2, variance=variance)
    return farm, inst


def executable(plan, farm, inst):
    ex = decode(plan, RobotProfile(frozenset(TASK_TYPES), inst.budget), farm)
    return replace(ex, scale_m=inst.scale_m)


@pytest.mark.parametrize("variance", [0.0, 0.15])
def test_route_evaluation_matches_executor(variance):
    farm, inst = farm_instance(variance)
    route = solve_greedy_offline(inst)
    m = evaluate(route, inst, 25, 2)
    plan = executable(route_plan(inst, route), farm, inst)
    for t in range(25):
        trace = execute(plan, farm, MatrixEdgeModel(inst, trial_multipliers(inst, 2, t)))
        assert trace.collected == m.samples[t]
        assert (trace.outcome == BUDGET_VIOLATED) == m.failures[t]


@pytest.mark.parametrize("variance", [0.0, 0.15])
def test_online_evaluation_matches_executor(variance):
    farm, inst = farm_instance(variance)
    policy = OnlinePolicy()
    m = evaluate(policy, inst, 15, 5)
    plan = executable(online_plan(inst), farm, inst)
    for t in range(15):
        trace = execute(plan, farm, MatrixEdgeModel(inst, trial_multipliers(inst, 5, t)),
                        guard=OnlineGuard(inst, policy))
        assert trace.collected == m.samples[t]
        assert (trace.outcome == BUDGET_VIOLATED) == m.failures[t]
