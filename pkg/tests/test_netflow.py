import math

import numpy as np
import pytest

from gdalloc import Campaign, SupplyNode, build_graph, make_feasible
from gdalloc import FlowProblem, InfeasibleError, SideConstraint, solve_min_cost_flow, solve_with_side_constraints
from gdalloc.linear import allocation_flow, solve_linear_stage
from gdalloc.netflow import METHODS
from gdalloc.qp import Floor, ngd_floor

from _support import flow_lp_oracle, lp_oracle, random_instance, two_by_one


def random_flow_problem(rng, max_nodes=8, negative=True):
    n = int(rng.integers(3, max_nodes + 1))
    b = rng.integers(-5, 6, n).astype(float)
    b[-1] -= b.sum()
    m = int(rng.integers(n, 3 * n))
    tail = rng.integers(0, n, m)
    head = (tail + rng.integers(1, n, m)) % n
    lo = -5 if negative else 0
    cost = rng.integers(lo, 10, m).astype(float) + rng.random(m) * 0.5
    cap = rng.integers(1, 12, m).astype(float)
    cap[rng.random(m) < 0.2] = math.inf
    # uncapacitated arcs keep non-negative cost so no cycle is unbounded
    cost[np.isinf(cap)] = np.abs(cost[np.isinf(cap)])
    return FlowProblem(b, tail, head, cost, cap, maximize=bool(rng.random() < 0.3))


def _check_optimality(problem, sol, tol=1e-7):
    x = sol.flow
    n = problem.num_nodes
    net = np.bincount(problem.tail, weights=x, minlength=n) - np.bincount(problem.head, weights=x, minlength=n)
    scale = max(1.0, float(np.abs(problem.supply).sum()))
    assert np.max(np.abs(net - problem.supply)) <= 1e-9 * scale
    rc = sol.reduced_costs(problem)
    eps = tol * (1.0 + float(np.abs(problem.cost).max(initial=0.0)))
    at_lo = x <= 1e-9 * scale
    at_hi = x >= problem.capacity - 1e-9 * scale
    assert np.all(rc[at_lo & ~at_hi] >= -eps)
    assert np.all(rc[at_hi & ~at_lo] <= eps)
    assert np.all(np.abs(rc[~at_lo & ~at_hi]) <= eps)


# -- worked examples -----------------------------------------------------------


def _priced_pair(d=10.0):
    return build_graph([SupplyNode("a", 10.0, 2.0), SupplyNode("b", 10.0, 0.5)], [Campaign("c", d)])


def test_guaranteed_demand_takes_cheap_supply():
    g = _priced_pair()
    res = solve_linear_stage(g, None, g.price)
    np.testing.assert_allclose(res.allocation.y, [0.0, 10.0])
    assert res.objective == pytest.approx(20.0)


def test_no_demand_sells_everything():
    g = _priced_pair(0.0)
    res = solve_linear_stage(g, None, g.price)
    np.testing.assert_allclose(res.allocation.z, g.supply_weight)
    assert res.objective == pytest.approx(float(g.price @ g.supply_weight))


def test_inactive_side_constraint():
    g = two_by_one()
    free = solve_linear_stage(g, g.value, None)
    res = solve_linear_stage(g, g.value, None, floors=[ngd_floor(g, 0.5 * float(g.price @ free.allocation.z))])
    np.testing.assert_allclose(res.allocation.y, free.allocation.y)
    assert res.multipliers[0] == 0.0


def _grid_click_under_ngd_floor(w, r, floor, n=4001):
    """Exhaustive 1-D search: y = (t, 4 - t), z = (4 - t, t)."""
    t = np.linspace(0.0, 4.0, n)
    clicks = w[0] * t + w[1] * (4.0 - t)
    ngd = r[0] * (4.0 - t) + r[1] * t
    k = np.argmax(np.where(ngd >= floor - 1e-12, clicks, -np.inf))
    return np.array([t[k], 4.0 - t[k]])


@pytest.mark.parametrize("pc, expected", [((0.0, 0.1), (0.0, 4.0)), ((0.1, 0.0), (1.0, 3.0))])
def test_click_with_ngd_floor_two_by_one(pc, expected):
    g = two_by_one(pc=pc)
    res = solve_linear_stage(g, g.value, None, floors=[ngd_floor(g, 3.0)])
    want = _grid_click_under_ngd_floor(10 * np.array(pc), (1.0, 0.0), 3.0)
    np.testing.assert_allclose(want, expected, atol=1e-12)
    np.testing.assert_allclose(res.allocation.y, want, atol=1e-9)


# -- oracle equivalence --------------------------------------------------------


@pytest.mark.parametrize("method", METHODS)
@pytest.mark.parametrize("seed", range(50))
def test_pure_flow_matches_lp(seed, method):
    problem = random_flow_problem(np.random.default_rng(seed))
    want, _ = flow_lp_oracle(problem)
    if want is None:
        with pytest.raises(InfeasibleError):
            solve_min_cost_flow(problem, method=method)
        return
    sol = solve_min_cost_flow(problem, method=method)
    assert sol.objective == pytest.approx(want, rel=1e-6, abs=1e-6)
    _check_optimality(problem, sol)
    assert sol.optimality_gap <= 1e-6 * (1.0 + abs(want))


def _feasible_problem(rng, **kw):
    while True:
        p = random_flow_problem(rng, **kw)
        if flow_lp_oracle(p)[0] is not None:
            return p


def _row_coef(rng, problem):
    coef = rng.integers(-3, 6, problem.num_arcs).astype(float)
    # bounded over the polytope: uncapacitated arcs carry no weight
    coef[np.isinf(problem.capacity)] = 0.0
    return coef


def _random_side(rng, problem, sense=">="):
    coef = _row_coef(rng, problem)
    probe = SideConstraint(coef, 0.0)
    # range of coef @ x over the flow polytope, via the oracle
    lo_p = FlowProblem(problem.supply, problem.tail, problem.head, coef, problem.capacity)
    hi_p = FlowProblem(problem.supply, problem.tail, problem.head, coef, problem.capacity, maximize=True)
    lo, hi = flow_lp_oracle(lo_p)[0], flow_lp_oracle(hi_p)[0]
    t = rng.uniform(0.1, 0.95)
    bound = lo + t * (hi - lo) if sense == ">=" else hi - t * (hi - lo)
    probe.bound, probe.sense = bound, sense
    return probe


@pytest.mark.parametrize("method", METHODS)
@pytest.mark.parametrize("seed", range(50))
def test_one_side_constraint_matches_lp(seed, method):
    rng = np.random.default_rng(10_000 + seed)
    problem = _feasible_problem(rng)
    side = _random_side(rng, problem, ">=" if seed % 2 else "<=")
    want, _ = flow_lp_oracle(problem, [side])
    sol = solve_with_side_constraints(problem, [side], method=method)
    assert sol.objective == pytest.approx(want, rel=1e-6, abs=1e-6)
    coef, bound = side.normalized()
    slack = coef @ sol.flow - bound
    assert slack >= -1e-7 * (1.0 + abs(bound))
    m = sol.multipliers[0]
    assert m >= 0.0
    assert m * max(slack, 0.0) <= 1e-6 * (1.0 + abs(want))
    _check_optimality(problem, sol)


@pytest.mark.parametrize("seed", range(25))
def test_two_side_constraints_match_lp(seed):
    rng = np.random.default_rng(20_000 + seed)
    problem = _feasible_problem(rng)
    rows = [_random_side(rng, problem, ">="), None]
    # the second row is drawn relative to the polytope cut by the first
    coef = _row_coef(rng, problem)
    lo = flow_lp_oracle(FlowProblem(problem.supply, problem.tail, problem.head, coef, problem.capacity), [rows[0]])[0]
    hi = flow_lp_oracle(FlowProblem(problem.supply, problem.tail, problem.head, coef, problem.capacity,
                                    maximize=True), [rows[0]])[0]
    rows[1] = SideConstraint(coef, lo + rng.uniform(0.1, 0.9) * (hi - lo))
    want, _ = flow_lp_oracle(problem, rows)
    sol = solve_with_side_constraints(problem, rows)
    assert sol.objective == pytest.approx(want, rel=1e-6, abs=1e-6)
    for k, m in zip(rows, sol.multipliers):
        slack = k.coef @ sol.flow - k.bound
        assert slack >= -1e-7 * (1.0 + abs(k.bound))
        assert m >= 0 and m * max(slack, 0.0) <= 1e-6 * (1.0 + abs(want))


@pytest.mark.parametrize("seed", range(20))
def test_allocation_stage_matches_lp(seed):
    rng = np.random.default_rng(seed)
    g = random_instance(rng, integer=False)
    g = make_feasible(g).apply(g)
    want, _ = lp_oracle(g, g.value, g.price)
    res = solve_linear_stage(g, g.value, g.price)
    assert res.objective == pytest.approx(want, rel=1e-6, abs=1e-6)
    fl = [Floor(np.zeros(g.num_edges), g.price, 0.9 * lp_oracle(g, None, g.price)[0], "F3")]
    want2, _ = lp_oracle(g, g.value, None, fl)
    res2 = solve_linear_stage(g, g.value, None, floors=fl)
    assert res2.objective == pytest.approx(want2, rel=1e-6, abs=1e-6)


# -- structure -------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(10))
def test_simplex_and_ssp_agree(seed):
    problem = _feasible_problem(np.random.default_rng(300 + seed))
    a = solve_min_cost_flow(problem, method="simplex")
    b = solve_min_cost_flow(problem, method="ssp")
    assert a.objective == pytest.approx(b.objective, rel=1e-9, abs=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_scaling_supplies(seed):
    rng = np.random.default_rng(700 + seed)
    problem = _feasible_problem(rng, negative=False)
    big = FlowProblem(10 * problem.supply, problem.tail, problem.head, problem.cost, 10 * problem.capacity,
                      problem.maximize)
    a = solve_min_cost_flow(problem)
    b = solve_min_cost_flow(big)
    np.testing.assert_allclose(b.flow, 10 * a.flow, rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(b.potential, a.potential, rtol=1e-9, atol=1e-9)


def test_deterministic():
    problem = _feasible_problem(np.random.default_rng(5))
    a, b = solve_min_cost_flow(problem), solve_min_cost_flow(problem)
    np.testing.assert_array_equal(a.flow, b.flow)
    np.testing.assert_array_equal(a.potential, b.potential)


def test_infeasible_flow_raises():
    p = FlowProblem([3.0, -3.0], [0], [1], [1.0], [2.0])
    with pytest.raises(InfeasibleError):
        solve_min_cost_flow(p)


def test_inconsistent_side_constraint_raises():
    p = FlowProblem([2.0, -2.0], [0, 0], [1, 1], [1.0, 2.0], [2.0, 2.0])
    with pytest.raises(InfeasibleError):
        solve_with_side_constraints(p, [SideConstraint([1.0, 1.0], 5.0, name="too-high")])


def test_at_most_two_rows():
    p = FlowProblem([1.0, -1.0], [0], [1], [1.0], [1.0])
    rows = [SideConstraint([1.0], 0.0) for _ in range(3)]
    with pytest.raises(ValueError):
        solve_with_side_constraints(p, rows)


def test_arc_list_dump():
    g = _priced_pair()
    text = allocation_flow(g, None, g.price).to_text()
    lines = text.splitlines()
    assert lines[0].startswith("# nodes")
    assert sum(1 for ln in lines if ln.startswith("a ")) == allocation_flow(g, None, g.price).num_arcs
