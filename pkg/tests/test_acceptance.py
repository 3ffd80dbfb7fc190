"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` (the lines are also
repeated in the terminal summary).
"""

import functools
import math
import time

import numpy as np
import pytest

from gdalloc import (
    Campaign,
    SupplyNode,
    build_graph,
    compute_metrics,
    goal,
    io,
    kkt_residuals,
    make_feasible,
    solve_weighted,
)
from gdalloc.generator import GeneratorConfig, generate_graph
from gdalloc.goal import KnobConfig
from gdalloc.linear import solve_linear_stage
from gdalloc.metrics import pareto_mask
from gdalloc.qp import Floor

from _support import (
    ZERO_TOL,
    brute_trim,
    feasible_random,
    is_quadratic,
    kkt_ok,
    lp_oracle,
    random_instance,
    result_kkt,
    two_by_one,
)

REPORT = {}


def criterion(n, title):
    """Record and print the outcome of a test returning ``(ok, detail)``."""

    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                ok, detail = fn(*args, **kwargs)
            except Exception as exc:
                ok, detail = False, f"{type(exc).__name__}: {exc}"
                raise
            finally:
                line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail} [{time.perf_counter() - t0:.1f}s]"
                REPORT[n] = line
                print("\n" + line)
            assert ok, line

        return wrapper

    return deco


# -- shared instances ------------------------------------------------------------


@functools.lru_cache(maxsize=None)
def _synthetic_ctx():
    return goal.Context(generate_graph(GeneratorConfig(seed=7)))


@functools.lru_cache(maxsize=None)
def _mode_runs():
    ctx = _synthetic_ctx()
    cfgs = [KnobConfig("baseline")]
    cfgs += [KnobConfig("single", objective=o) for o in ("NGD", "Click", "NGD+Click", "GD")]
    cfgs += [
        KnobConfig("single", objective="weighted", gamma=1.0),
        KnobConfig("two-step-a", xi=1.0, psi=0.9),
        KnobConfig("two-step-b", gamma=1.0, omega=0.9),
        KnobConfig("two-step-c", gamma=1.0, eta=0.9),
        KnobConfig("three-step", eta=0.9, omega=0.9),
        KnobConfig("three-step", eta=0.9, omega=0.9, order="F2-first"),
    ]
    return [goal.run(ctx, c) for c in cfgs]


@functools.lru_cache(maxsize=None)
def _eta_sweep():
    ctx = _synthetic_ctx()
    grid = goal.knob_grid(eta=goal.parse_grid("0.84:1.0:100"))
    t0 = time.perf_counter()
    res = goal.sweep(ctx, KnobConfig("two-step-c", gamma=1.0, eta=0.84), grid)
    return res, time.perf_counter() - t0


def _two_by_one_floor():
    g = two_by_one()
    return goal.run(g, KnobConfig("two-step-c", gamma=1.0, xi=0.0, eta=0.75))


# -- 1 ---------------------------------------------------------------------------


@criterion(1, "feasibility vs trim enumeration")
def test_c01_feasibility_oracle():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        g = random_instance(np.random.default_rng(90_000 + seed), max_supply=6, max_campaigns=4, integer=True,
                            tiers=seed % 2 == 1)
        worst = max(worst, abs(make_feasible(g).total_penalty - brute_trim(g)))
    dt = time.perf_counter() - t0
    return worst <= 1e-6 and dt < 60.0, f"100 instances, max |diff| {worst:.2e}, {dt:.1f}s"


# -- 2 ---------------------------------------------------------------------------


@criterion(2, "LP stages vs dense LP oracle")
def test_c02_lp_oracle():
    worst, with_side = 0.0, 0
    for seed in range(100):
        rng = np.random.default_rng(91_000 + seed)
        g = random_instance(rng, integer=bool(seed % 3))
        g = make_feasible(g).apply(g)
        yp, zp = [(g.value, g.price), (g.value, None), (None, g.price)][seed % 3]
        floors = ()
        if seed % 2:
            with_side += 1
            if zp is None:
                ref = lp_oracle(g, None, g.price)[0]
                floors = (Floor(np.zeros(g.num_edges), g.price, rng.uniform(0.3, 0.95) * ref, "F3"),)
            else:
                ref = lp_oracle(g, g.value, None)[0]
                floors = (Floor(g.value, np.zeros(g.num_supply), rng.uniform(0.3, 0.95) * ref, "F2"),)
        want, _ = lp_oracle(g, yp, zp, floors)
        got = solve_linear_stage(g, yp, zp, floors=floors).objective
        worst = max(worst, abs(got - want) / max(1.0, abs(want)))
    return worst <= 1e-6, f"100 instances ({with_side} with a side constraint), max rel diff {worst:.2e}"


# -- 3 ---------------------------------------------------------------------------


@criterion(3, "KKT certification of QP solves")
def test_c03_kkt():
    checked, failures = 0, []
    # analytic 2x1 instance: y = (1, 3), F1 = -0.5, F3 = 3
    r = _two_by_one_floor()
    f1, _, f3 = r.metrics
    analytic = (np.allclose(r.allocation.y, [1.0, 3.0], atol=1e-8) and abs(f1 + 0.5) <= 1e-8
                and abs(f3 - 3.0) <= 1e-8)
    runs = [r]
    modes = [
        KnobConfig("single", objective="GD"),
        KnobConfig("single", objective="weighted", gamma=0.5, xi=1.0),
        KnobConfig("two-step-a", xi=1.0, psi=0.9),
        KnobConfig("two-step-a", xi=0.0, psi=1.0),
        KnobConfig("two-step-b", gamma=1.0, omega=0.8),
        KnobConfig("two-step-c", gamma=2.0, xi=0.5, eta=0.9),
        KnobConfig("three-step", eta=0.9, omega=0.9),
        KnobConfig("three-step", eta=1.0, omega=1.0, order="F2-first"),
    ]
    for seed in range(20):
        ctx = goal.Context(feasible_random(np.random.default_rng(92_000 + seed), integer=False))
        runs += [goal.run(ctx, c) for c in modes]
    runs += [x for x in _mode_runs() if is_quadratic(x)]
    for x in runs:
        ok, msg = kkt_ok(result_kkt(x), x.objective)
        checked += 1
        if not ok:
            failures.append(f"{x.label}: {msg}")
    # direct weighted solves
    for seed in range(20):
        g = feasible_random(np.random.default_rng(92_500 + seed), integer=False)
        for gamma, xi in ((0.1, 0.0), (1.0, 1.0), (10.0, 0.3)):
            alloc, duals, stats = solve_weighted(g, gamma, xi)
            rep = kkt_residuals(g, alloc, duals, gamma, xi, zero_tol=ZERO_TOL)
            ok, msg = kkt_ok(rep, stats.objective)
            checked += 1
            if not ok:
                failures.append(f"weighted seed {seed}: {msg}")
    detail = f"{checked} solves certified, analytic 2x1 {'exact' if analytic else 'WRONG'}"
    if failures:
        detail += f"; {len(failures)} failures, first: {failures[0]}"
    return analytic and not failures, detail


# -- 4 ---------------------------------------------------------------------------


@criterion(4, "recovered gamma reproduces two-step-a")
def test_c04_gamma_rho():
    r = goal.run(two_by_one(), KnobConfig("two-step-a", xi=0.0, psi=0.75))
    worked = abs(r.duals.rho[0] - 1.0) <= 1e-6 and abs(goal.require_gamma(r) - 1.0) <= 1e-6
    binding, worst, seed = 0, 0.0, 0
    while binding < 25 and seed < 500:
        rng = np.random.default_rng(93_000 + seed)
        seed += 1
        g = feasible_random(rng, integer=False)
        xi = float(seed % 2)
        res = goal.run(g, KnobConfig("two-step-a", xi=xi, psi=float(rng.uniform(0.8, 0.99))))
        if res.recovered_gamma is None:
            continue
        binding += 1
        alloc, _, _ = solve_weighted(g, res.recovered_gamma, xi)
        worst = max(worst, float(np.max(np.abs(alloc.y - res.allocation.y), initial=0.0)))
    ok = worked and binding >= 20 and worst <= 1e-4
    return ok, (f"2x1 rho={r.duals.rho[0]:.9f} gamma={r.recovered_gamma:.9f}; {binding} binding instances, "
                f"max |dy| {worst:.2e}")


# -- 5 ---------------------------------------------------------------------------


@criterion(5, "single-objective supremacy on the synthetic instance")
def test_c05_supremacy():
    g = _synthetic_ctx().graph
    runs = _mode_runs()
    by = {x.config.objective: x for x in runs if x.config.mode == "single"}
    scores = {"GD": lambda m: m[0], "Click": lambda m: m[1], "NGD": lambda m: m[2],
              "NGD+Click": lambda m: m[1] + m[2]}
    bad = []
    for obj, f in scores.items():
        own = f(by[obj].metrics)
        for x in runs:
            if f(x.metrics) > own + 1e-6 * (1.0 + abs(own)):
                bad.append(f"{x.label} beats {obj}")
    base_gd = runs[0].metrics[0]
    norm_gd = by["GD"].metrics[0] / abs(base_gd)
    ok = not bad and base_gd < 0 and abs(norm_gd) < 1.0
    detail = (f"{g.num_supply}x{g.num_campaigns}, {g.num_edges} edges, {len(runs)} runs; normalized GD "
              f"baseline -1 vs GD-only {norm_gd:.3g}")
    return ok, detail + (f"; {bad}" if bad else "")


# -- 6 ---------------------------------------------------------------------------


@criterion(6, "eta sweep frontier (two-step-c, 100 points)")
def test_c06_eta_sweep():
    res, dt = _eta_sweep()
    f1 = np.array([x.metrics[0] for x in res])
    f3 = np.array([x.metrics[2] for x in res])
    mono3 = bool(np.all(np.diff(f3) >= -1e-9 * (1.0 + np.abs(f3[1:]))))
    mono1 = bool(np.all(np.diff(f1) <= 1e-9 * (1.0 + np.abs(f1[1:]))))
    front = goal.extract_frontier(res, ("ngd", "gd"))
    pts = np.array([(x.row.ngd, x.row.gd) for x in front])
    mutual = all(not (np.all(p >= q) and np.any(p > q)) for p in pts for q in pts)
    base = _mode_runs()[0].row
    dominated = any(p[0] >= base.ngd and p[1] >= base.gd and (p[0] > base.ngd or p[1] > base.gd) for p in pts)
    ok = len(res) == 100 and mono3 and mono1 and mutual and dominated and dt <= 1800
    return ok, (f"F3 non-decreasing {mono3}, F1 non-increasing {mono1}, frontier {len(front)} points "
                f"non-dominated {mutual}, baseline dominated {dominated}, sweep {dt:.1f}s")


# -- 7 ---------------------------------------------------------------------------


@criterion(7, "three-step 10x10 iso-eta contours")
def test_c07_contours():
    ctx = _synthetic_ctx()
    grid = goal.knob_grid(eta=goal.parse_grid("0.84:1.0:10"), omega=goal.parse_grid("0.5:1.0:10"))
    res = goal.sweep(ctx, KnobConfig("three-step", eta=0.84, omega=0.5), grid)
    contours = {}
    for x in res:
        contours.setdefault(x.config.eta, []).append((x.row.click, x.row.gd))
    bad = [eta for eta, pts in contours.items() if not pareto_mask(np.array(pts)).all()]
    ok = len(res) == 100 and len(contours) == 10 and not bad
    return ok, f"{len(res)} results in {len(contours)} contours, dominated contours: {bad or 'none'}"


# -- 8 ---------------------------------------------------------------------------


def _representable(rng):
    """Random instance with r = 0 and sum_j theta_ij <= s_i for every i."""
    g = feasible_random(rng, integer=False)
    g = build_graph([SupplyNode(s.id, s.weight, 0.0) for s in g.supplies], list(g.campaigns),
                    [(g.supplies[a].id, g.campaigns[b].id, p, 0.0)
                     for a, b, p in zip(g.edge_supply, g.edge_campaign, g.click_prob)])
    load = np.bincount(g.edge_supply, g.theta, minlength=g.num_supply) / np.maximum(g.supply_weight, 1e-300)
    worst = float(load.max(initial=0.0))
    return g.with_demands(g.demand / worst * rng.uniform(0.5, 1.0)) if worst > 1.0 else g


@criterion(8, "representativeness sanity (y = theta)")
def test_c08_theta():
    worst_f1, worst_dy, n = 0.0, 0.0, 0
    for seed in range(30):
        rng = np.random.default_rng(94_000 + seed)
        g = _representable(rng)
        assert np.all(np.bincount(g.edge_supply, g.theta, minlength=g.num_supply) <= g.supply_weight * (1 + 1e-12))
        for gamma in (0.1, 1.0, 10.0):
            alloc, _, _ = solve_weighted(g, gamma, 0.0)
            f1 = compute_metrics(g, alloc)[0]
            worst_f1 = max(worst_f1, abs(f1))
            worst_dy = max(worst_dy, float(np.max(np.abs(alloc.y - g.theta), initial=0.0)))
            n += 1
    return worst_f1 <= 1e-10, f"{n} solves, max |F1| {worst_f1:.2e}, max |y - theta| {worst_dy:.2e}"


# -- 9 ---------------------------------------------------------------------------


@criterion(9, "scaling invariance (x10)")
def test_c09_scaling():
    g = io.load_graph(str(__import__("pathlib").Path(__file__).parent / "data" / "tiny.json"))
    big = g.scaled(10.0)
    cfgs = [
        KnobConfig("baseline"),
        KnobConfig("single", objective="NGD"),
        KnobConfig("single", objective="Click"),
        KnobConfig("single", objective="NGD+Click"),
        KnobConfig("single", objective="GD"),
        KnobConfig("single", objective="weighted", gamma=1.0, xi=0.5),
        KnobConfig("two-step-a", xi=1.0, psi=0.9),
        KnobConfig("two-step-b", gamma=1.0, omega=0.9),
        KnobConfig("two-step-c", gamma=1.0, eta=0.9),
        KnobConfig("three-step", eta=0.9, omega=0.9),
    ]
    worst, bad = 0.0, []
    for c in cfgs:
        a, b = goal.run(g, c), goal.run(big, c)
        for u, v in ((a.allocation.y, b.allocation.y), (a.allocation.z, b.allocation.z)):
            rel = float(np.max(np.abs(v - 10.0 * u), initial=0.0)) / max(1.0, float(np.max(np.abs(10.0 * u), initial=0.0)))
            worst = max(worst, rel)
            if rel > 1e-6:
                bad.append(a.label)
    return not bad, f"{len(cfgs)} modes, max rel deviation {worst:.2e}" + (f"; failing {sorted(set(bad))}" if bad else "")


# -- 10 --------------------------------------------------------------------------


@criterion(10, "determinism (byte-identical files, parallel == serial)")
def test_c10_determinism(tmp_path):
    g = generate_graph(GeneratorConfig(num_supply=200, num_campaigns=20, seed=11))
    cfgs = [KnobConfig("two-step-a", xi=1.0, psi=0.9), KnobConfig("three-step", eta=0.9, omega=0.8),
            KnobConfig("single", objective="GD")]
    differing = []
    for k, c in enumerate(cfgs):
        for name in ("a", "b"):
            with io.ResultDir(tmp_path / f"{name}{k}") as tmp:
                io.write_result(tmp, goal.run(g, c))
        for f in sorted((tmp_path / f"a{k}").iterdir()):
            if f.read_bytes() != (tmp_path / f"b{k}" / f.name).read_bytes():
                differing.append(f"{c.mode}/{f.name}")
    grid = goal.knob_grid(eta=[0.85, 0.9, 0.95, 1.0], omega=[0.6, 0.9])
    base = KnobConfig("three-step", eta=0.85, omega=0.6)
    serial = goal.sweep(g, base, grid, threads=1)
    parallel = goal.sweep(g, base, grid, threads=4)
    same = all(io.dumps(io.result_to_dict(a)) == io.dumps(io.result_to_dict(b)) for a, b in zip(serial, parallel))
    ok = not differing and same and len(serial) == len(parallel) == 8
    return ok, f"{len(cfgs)} configs written twice, differing files: {differing or 'none'}; parallel == serial {same}"


# -- 11 --------------------------------------------------------------------------


@criterion(11, "beta_i >= r_i in weighted solves")
def test_c11_beta_reserve():
    worst, n = math.inf, 0
    graphs = [feasible_random(np.random.default_rng(95_000 + s), integer=False) for s in range(30)]
    graphs.append(_synthetic_ctx().graph)
    for g in graphs:
        for gamma, xi in ((0.01, 0.0), (1.0, 0.0), (1.0, 1.0), (100.0, 0.5)):
            _, duals, _ = solve_weighted(g, gamma, xi)
            worst = min(worst, float(np.min(duals.beta - g.price, initial=math.inf)))
            n += 1
    return worst >= -1e-7, f"{n} solves, min(beta - r) {worst:.2e}"


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))
