import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from gdalloc import (
    Allocation,
    Campaign,
    DualSolution,
    InfeasibleError,
    NonConvergenceError,
    SupplyNode,
    UndefinedGammaError,
    build_graph,
    compute_metrics,
    kkt_residuals,
    primal_from_duals,
    recover_gamma,
    solve_f1_with_floors,
    solve_weighted,
    validate_allocation,
)
from gdalloc.qp import Floor, QpStageSpec, click_floor, monetary_floor, ngd_floor, solve_stage

from _support import ZERO_TOL, assert_kkt, feasible_random, qp_oracle, two_by_one


def _kkt(g, alloc, duals, gamma=1.0, xi=0.0, f2=True, f3=True, floors=()):
    return kkt_residuals(g, alloc, duals, gamma, xi, include_f3=f3, include_f2=f2, floors=floors, zero_tol=ZERO_TOL)


def _weighted(g, gamma, xi=0.0, **kw):
    alloc, duals, stats = solve_weighted(g, gamma, xi, **kw)
    assert_kkt(_kkt(g, alloc, duals, gamma, xi), stats.objective)
    assert validate_allocation(g, alloc, 1e-7 * max(1.0, g.supply_weight.max())).passed
    return alloc, duals, stats


def _with_floors(g, floors, **kw):
    alloc, duals, stats = solve_f1_with_floors(g, floors, **kw)
    assert_kkt(_kkt(g, alloc, duals, f2=False, f3=False, floors=floors), stats.objective)
    return alloc, duals, stats


# -- 1-D reduction of the 2x1 instance ----------------------------------------
# y = (t, 4 - t), theta = (2, 2), V = 1  =>  F1 = -(t - 2)^2 / 2,  F3 = 4 - t


def _f1(t):
    return -0.5 * (t - 2.0) ** 2


def _argmax_1d(fun, lo=0.0, hi=4.0):
    grid = np.linspace(lo, hi, 40001)
    k = int(np.argmax(fun(grid)))
    res = minimize_scalar(lambda t: -fun(t), bounds=(grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]),
                          method="bounded", options={"xatol": 1e-12})
    return res.x


def test_two_by_one_weighted():
    t = _argmax_1d(lambda t: _f1(t) + (4.0 - t))
    assert t == pytest.approx(1.0, abs=1e-6)
    g = two_by_one()
    alloc, duals, _ = _weighted(g, 1.0, 0.0)
    np.testing.assert_allclose(alloc.y, [1.0, 3.0], atol=1e-9)
    np.testing.assert_allclose(alloc.z, [3.0, 1.0], atol=1e-9)
    f1, f2, f3 = compute_metrics(g, alloc)
    assert f1 == pytest.approx(-0.5, abs=1e-9)
    assert f3 == pytest.approx(3.0, abs=1e-9)


def test_two_by_one_floor_binds_with_unit_multiplier():
    g = two_by_one()
    alloc, duals, _ = _with_floors(g, [ngd_floor(g, 3.0)])
    np.testing.assert_allclose(alloc.y, [1.0, 3.0], atol=1e-9)
    # dF1*/d(bound) by central differences of the 1-D oracle
    def best(b):
        # exhaustive grid over the feasible interval t <= 4 - b
        return float(_f1(np.linspace(0.0, 4.0 - b, 40001)).max())
    h = 1e-4
    slope = (best(3.0 + h) - best(3.0 - h)) / (2 * h)
    assert slope == pytest.approx(-1.0, abs=1e-6)
    assert duals.rho[0] == pytest.approx(-slope, abs=1e-6)


def test_theta_is_optimal_when_feasible():
    g = build_graph([SupplyNode("a", 5.0), SupplyNode("b", 5.0)], [Campaign("c", 4.0), Campaign("d", 2.0)])
    alloc, _, _ = _weighted(g, 1.0)
    np.testing.assert_allclose(alloc.y, g.theta, atol=1e-12)
    assert abs(compute_metrics(g, alloc)[0]) <= 1e-10


@pytest.mark.parametrize("gamma, xi", [(0.1, 0.0), (1.0, 2.0), (50.0, 0.5)])
def test_demand_pins_single_edge(gamma, xi):
    g = build_graph([SupplyNode("a", 10.0, 1.0)], [Campaign("c", 4.0, click_value=10.0)], [("a", "c", 0.1, 0.0)])
    alloc, _, _ = _weighted(g, gamma, xi)
    assert alloc.y[0] == pytest.approx(4.0) and alloc.z[0] == pytest.approx(6.0)


def test_slack_floor_changes_nothing():
    g = two_by_one()
    free, _, _ = _with_floors(g, [])
    alloc, duals, _ = _with_floors(g, [ngd_floor(g, 0.5)])
    np.testing.assert_allclose(alloc.y, free.y, atol=1e-10)
    assert duals.rho[0] == 0.0


def test_both_floors_full_pin_single_supply():
    g = build_graph([SupplyNode("a", 10.0, 2.0)], [Campaign("c", 4.0, click_value=10.0)], [("a", "c", 0.1, 0.0)])
    floors = [ngd_floor(g, 12.0), click_floor(g, 4.0)]
    alloc, _, _ = _with_floors(g, floors)
    assert alloc.y[0] == pytest.approx(4.0) and alloc.z[0] == pytest.approx(6.0)


# -- closed-form primal map ----------------------------------------------------


def test_primal_from_duals_formula():
    g = build_graph([SupplyNode("a", 4.0)], [Campaign("c", 2.0)])
    y = primal_from_duals(g, 1.0, 0.0, [0.5], [0.2])
    assert y[0] == pytest.approx(2.0 * 1.3)


def test_primal_from_duals_clips():
    g = build_graph([SupplyNode("a", 4.0)], [Campaign("c", 2.0)])
    assert primal_from_duals(g, 1.0, 0.0, [0.0], [1.5])[0] == 0.0


def test_primal_from_duals_zero_target():
    g = build_graph([SupplyNode("a", 0.0), SupplyNode("b", 3.0)], [Campaign("c", 2.0)])
    assert primal_from_duals(g, 1.0, 0.0, [5.0], [0.0, 0.0])[0] == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_primal_from_duals_reproduces_solver(seed):
    g = feasible_random(np.random.default_rng(seed), integer=False)
    for gamma, xi in ((1.0, 0.0), (0.3, 1.0)):
        alloc, duals, _ = _weighted(g, gamma, xi)
        y = primal_from_duals(g, gamma, xi, duals.alpha, duals.beta)
        np.testing.assert_allclose(y, alloc.y, atol=1e-6)


# -- residual report -----------------------------------------------------------


def _analytic_duals():
    # y = (1, 3) > 0 and z = (3, 1) > 0: mu = 0 so beta = r = (1, 0); edge 1
    # gives (1/2)(1 - 2) - alpha + 1 = 0, so alpha = 1/2
    return DualSolution(np.array([0.5]), np.array([1.0, 0.0]), np.zeros(2), np.zeros(2), [])


def test_analytic_duals_have_zero_residual():
    g = two_by_one()
    rep = _kkt(g, Allocation(np.array([1.0, 3.0]), np.array([3.0, 1.0])), _analytic_duals())
    assert max(rep.stationarity, rep.complementarity, rep.primal) <= 1e-9


def test_solver_duals_match_analytic():
    g = two_by_one()
    _, duals, _ = _weighted(g, 1.0)
    np.testing.assert_allclose(duals.alpha, [0.5], atol=1e-9)
    np.testing.assert_allclose(duals.beta, [1.0, 0.0], atol=1e-9)


def test_beta_perturbation_shows_in_stationarity():
    g = two_by_one()
    d = _analytic_duals()
    d.beta = d.beta + np.array([0.1, 0.0])
    rep = _kkt(g, Allocation(np.array([1.0, 3.0]), np.array([3.0, 1.0])), d)
    assert rep.stationarity == pytest.approx(0.1, abs=1e-12)


def test_empty_instance_residuals():
    g = build_graph([SupplyNode("a", 3.0, 1.0)], [])
    alloc, duals, _ = solve_weighted(g, 1.0)
    rep = _kkt(g, alloc, duals)
    assert (rep.stationarity, rep.complementarity, rep.primal) == (0.0, 0.0, 0.0)


# -- equivalent weight ---------------------------------------------------------


def test_recover_gamma():
    assert recover_gamma(0.5) == 2.0
    with pytest.raises(UndefinedGammaError):
        recover_gamma(0.0)


def test_unit_multiplier_reproduces_weighted():
    g = two_by_one()
    _, duals, _ = _with_floors(g, [ngd_floor(g, 3.0)])
    gamma = recover_gamma(duals.rho[0])
    assert gamma == pytest.approx(1.0, abs=1e-6)
    alloc, _, _ = _weighted(g, gamma)
    np.testing.assert_allclose(alloc.y, [1.0, 3.0], atol=1e-6)


# -- properties on random instances --------------------------------------------


@pytest.mark.parametrize("seed", range(20))
def test_random_weighted_kkt_and_bounds(seed):
    g = feasible_random(np.random.default_rng(100 + seed), integer=False)
    for gamma, xi in ((1.0, 0.0), (0.2, 1.0), (5.0, 3.0)):
        alloc, duals, stats = _weighted(g, gamma, xi)
        assert np.all(duals.beta >= g.price - 1e-7)
        assert np.all(duals.lam >= -1e-9) and np.all(duals.mu >= -1e-9)
        f1 = compute_metrics(g, alloc)[0]
        assert f1 <= 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_weighted_matches_qp_oracle(seed):
    g = feasible_random(np.random.default_rng(200 + seed), integer=False)
    for gamma, xi in ((1.0, 0.0), (0.5, 1.0)):
        _, _, stats = _weighted(g, gamma, xi)
        want, _, _ = qp_oracle(g, gamma, xi)
        assert stats.objective == pytest.approx(want, rel=1e-6, abs=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_iteration_order_does_not_matter(seed):
    g = feasible_random(np.random.default_rng(300 + seed), integer=False)
    a, _, _ = _weighted(g, 0.7, 1.0)
    b, _, _ = _weighted(g, 0.7, 1.0, reverse=True)
    np.testing.assert_allclose(a.y, b.y, atol=1e-6)


def test_f1_zero_iff_theta():
    g = two_by_one(r=(0.0, 0.0))
    alloc, _, _ = _weighted(g, 1.0)
    assert compute_metrics(g, alloc)[0] == 0.0
    np.testing.assert_array_equal(alloc.y, g.theta)
    shifted = Allocation.from_y(g, g.theta + np.array([0.1, -0.1]))
    assert compute_metrics(g, shifted)[0] < 0


@pytest.mark.parametrize("seed", range(10))
def test_floor_sweep_monotone(seed):
    g = feasible_random(np.random.default_rng(400 + seed), integer=False)
    from _support import lp_oracle

    top, _ = lp_oracle(g, None, g.price)
    prev = np.inf
    for frac in np.linspace(0.2, 0.99, 9):
        fl = [ngd_floor(g, frac * top)]
        alloc, duals, stats = _with_floors(g, fl)
        assert stats.objective <= prev + 1e-9 * (1.0 + abs(prev) if np.isfinite(prev) else 1.0)
        prev = stats.objective
        assert np.all(duals.beta >= duals.rho[0] * g.price - 1e-7)


@pytest.mark.parametrize("seed", range(10))
def test_floored_stage_matches_qp_oracle(seed):
    g = feasible_random(np.random.default_rng(500 + seed), integer=False)
    from _support import lp_oracle

    top, _ = lp_oracle(g, 0.5 * g.value, g.price)
    fl = [monetary_floor(g, 0.5, 0.9 * top)]
    _, _, stats = _with_floors(g, fl)
    want, _, _ = qp_oracle(g, 1.0, 0.0, include_f2=False, include_f3=False, floors=fl)
    assert stats.objective == pytest.approx(want, rel=1e-6, abs=1e-6)


# -- errors --------------------------------------------------------------------


def test_infeasible_graph_raises():
    g = build_graph([SupplyNode("a", 1.0)], [Campaign("c", 3.0)])
    with pytest.raises(InfeasibleError, match="make_feasible"):
        solve_weighted(g, 1.0)


def test_incompatible_floors_raise():
    g = two_by_one(pc=(0.1, 0.0), r=(1.0, 0.0))
    # F2 = y1 and F3 = z1 = 4 - y1: F2 >= 4 forces y1 = 4, F3 >= 4 forces y1 = 0
    floors = [click_floor(g, 4.0), ngd_floor(g, 4.0)]
    with pytest.raises(InfeasibleError) as info:
        solve_f1_with_floors(g, floors)
    assert info.value.where is not None


def test_gamma_must_be_positive():
    with pytest.raises(ValueError):
        QpStageSpec(gamma=0.0)
    with pytest.raises(ValueError):
        QpStageSpec(floors=[None, None, None])


def test_iteration_cap_is_an_error():
    g = feasible_random(np.random.default_rng(7), max_supply=6, max_campaigns=4, integer=False, min_supply=5,
                        min_campaigns=3)
    with pytest.raises(NonConvergenceError):
        solve_stage(g, QpStageSpec(gamma=0.05, xi=3.0), tol=1e-14, max_iter=1)
