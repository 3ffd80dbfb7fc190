#!/usr/bin/env python3
"""Compiled vs interpreted kernels.

Each path runs in its own interpreter because ``GDALLOC_DISABLE_JIT`` is read
at import time.  The worker times the network-simplex and successive
shortest-path kernels on the max-NGD flow problem and one weighted
quadratic solve, then prints a JSON record; the driver compares the two
records and checks both paths agree on the objectives.

    python benchmarks/bench_kernels.py --supply 300 --campaigns 30
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time


def _best(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def worker(args):
    from gdalloc import _jit
    from gdalloc.feasibility import make_feasible
    from gdalloc.generator import GeneratorConfig, generate_graph
    from gdalloc.linear import allocation_flow
    from gdalloc.netflow import solve_min_cost_flow
    from gdalloc.qp import solve_weighted

    cfg = GeneratorConfig(num_supply=args.supply, num_campaigns=args.campaigns, seed=args.seed)
    graph = generate_graph(cfg)
    graph = make_feasible(graph).apply(graph)
    problem = allocation_flow(graph, None, graph.price)

    rec = {"jit": _jit.HAVE_NUMBA, "edges": graph.num_edges}
    # first call includes compilation (or cache load) on the compiled path
    t0 = time.perf_counter()
    solve_min_cost_flow(problem, method="simplex")
    solve_min_cost_flow(problem, method="ssp")
    solve_weighted(graph, 1.0)
    rec["warmup"] = time.perf_counter() - t0

    for method in ("simplex", "ssp"):
        t, sol = _best(lambda: solve_min_cost_flow(problem, method=method), args.repeat)
        rec[method] = t
        rec[f"{method}_objective"] = sol.objective
    t, (alloc, duals, stats) = _best(lambda: solve_weighted(graph, 1.0), args.repeat)
    rec["qp"] = t
    rec["qp_objective"] = stats.objective
    print(json.dumps(rec))


def _run(args, disable):
    env = dict(os.environ)
    if disable:
        env["GDALLOC_DISABLE_JIT"] = "1"
    else:
        env.pop("GDALLOC_DISABLE_JIT", None)
    cmd = [sys.executable, __file__, "--worker", "--supply", str(args.supply),
           "--campaigns", str(args.campaigns), "--repeat", str(args.repeat), "--seed", str(args.seed)]
    out = subprocess.run(cmd, env=env, check=True, capture_output=True, text=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--supply", type=int, default=300)
    p.add_argument("--campaigns", type=int, default=30)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = p.parse_args(argv)
    if args.worker:
        worker(args)
        return 0

    jit = _run(args, disable=False)
    py = _run(args, disable=True)
    print(f"instance: {args.supply} supplies, {args.campaigns} campaigns, {jit['edges']} edges")
    print(f"numba active in compiled run: {jit['jit']}; warm-up {jit['warmup']:.2f}s")
    print(f"{'kernel':<10}{'compiled [s]':>14}{'python [s]':>14}{'speedup':>10}")
    ok = True
    for k in ("simplex", "ssp", "qp"):
        print(f"{k:<10}{jit[k]:>14.4f}{py[k]:>14.4f}{py[k] / max(jit[k], 1e-12):>10.1f}")
        a, b = jit[f"{k}_objective"], py[f"{k}_objective"]
        if abs(a - b) > 1e-6 * (1.0 + abs(a)):
            ok = False
            print(f"  objective mismatch: {a!r} vs {b!r}")
    print("objectives agree" if ok else "OBJECTIVES DIFFER")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
