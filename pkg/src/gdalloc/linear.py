"""Linear allocation stages as network flows.

Nodes are laid out as supplies, campaigns, then one sink that absorbs the
unallocated (non-guaranteed) supply.  Arc ``e < E`` carries ``y_e``; arc
``E + i`` carries ``z_i``.  Optimal faces of these LPs are described by
the reduced costs of an optimal dual, which lets a later stage stay on the
face exactly instead of imposing a floor at 100% of the optimum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Allocation, AllocationGraph
from .netflow import FlowProblem, FlowSolution, SideConstraint, solve_min_cost_flow, solve_with_side_constraints


def allocation_flow(graph: AllocationGraph, yprofit=None, zprofit=None, edge_mask=None, z_fixed=None) -> FlowProblem:
    """Maximisation flow problem whose arc flows are ``(y, z)``.

    Arcs outside ``edge_mask`` and the z-arcs of ``z_fixed`` supplies get
    zero capacity.
    """
    ns, nc, E = graph.num_supply, graph.num_campaigns, graph.num_edges
    sink = ns + nc
    yprofit = np.zeros(E) if yprofit is None else np.asarray(yprofit, dtype=np.float64)
    zprofit = np.zeros(ns) if zprofit is None else np.asarray(zprofit, dtype=np.float64)
    s, d = graph.supply_weight, graph.demand
    supply = np.concatenate([s, -d, [d.sum() - s.sum()]])
    names = [f"supply:{x.id}" for x in graph.supplies] + [f"campaign:{c.id}" for c in graph.campaigns] + ["ngd"]
    cap = np.full(E + ns, np.inf)
    if edge_mask is not None:
        cap[:E][~np.asarray(edge_mask, dtype=bool)] = 0.0
    if z_fixed is not None:
        cap[E:][np.asarray(z_fixed, dtype=bool)] = 0.0
    return FlowProblem(
        supply=supply,
        tail=np.concatenate([graph.edge_supply, np.arange(ns)]),
        head=np.concatenate([ns + graph.edge_campaign, np.full(ns, sink)]),
        cost=np.concatenate([yprofit, zprofit]),
        capacity=cap,
        maximize=True,
        node_names=names,
    )


@dataclass
class LinearStageResult:
    allocation: Allocation
    objective: float
    multipliers: list
    solution: FlowSolution
    problem: FlowProblem
    floors: tuple = ()

    @property
    def reduced_costs(self):
        """(rc_y, rc_z) of the Lagrangian minimisation form; >= 0 on open arcs."""
        rc = self.solution.reduced_costs(self.problem)
        E = len(self.allocation.y)
        return rc[:E], rc[E:]

    @property
    def node_duals(self):
        """(alpha, beta): campaign and supply potentials relative to the sink."""
        pi = self.solution.potential
        ns = len(self.allocation.z)
        sink = len(pi) - 1
        return pi[ns:sink] - pi[sink], pi[:ns] - pi[sink]


def solve_linear_stage(
    graph: AllocationGraph,
    yprofit=None,
    zprofit=None,
    floors=(),
    tol: float = 1e-9,
    edge_mask=None,
    z_fixed=None,
    method: str = "simplex",
) -> LinearStageResult:
    """Maximise ``yprofit@y + zprofit@z`` over the allocation polytope,
    optionally with up to two floors (objects with ``ycoef``, ``zcoef``,
    ``bound`` and ``name``) and restricted by the masks."""
    problem = allocation_flow(graph, yprofit, zprofit, edge_mask, z_fixed)
    # equality floors are only ever imposed at the maximum attainable value
    # on the face, where ">=" and "==" coincide
    sides = [
        SideConstraint(np.concatenate([np.asarray(f.ycoef, float), np.asarray(f.zcoef, float)]), f.bound, ">=", f.name)
        for f in floors
    ]
    if sides:
        sol = solve_with_side_constraints(problem, sides, tol=tol, method=method)
    else:
        sol = solve_min_cost_flow(problem, tol=tol, method=method)
    E = graph.num_edges
    y = np.maximum(sol.flow[:E], 0.0)
    z = np.maximum(sol.flow[E:], 0.0)
    return LinearStageResult(Allocation(y, z), float(sol.objective), list(sol.multipliers), sol, problem, tuple(floors))


@dataclass
class Face:
    """Restriction of the allocation polytope: open edges, exhausted supplies
    and the floors that hold with equality."""

    edge_mask: np.ndarray
    z_fixed: np.ndarray
    tight: tuple = ()
    threshold: float = 0.0


def optimal_face(result: LinearStageResult, base: Face | None = None, rel_tol: float = 1e-9) -> Face:
    """Face of optimal solutions of a linear stage.

    By complementary slackness an allocation is optimal iff it is feasible,
    uses only arcs of zero reduced cost, and meets with equality every floor
    whose multiplier is positive.
    """
    rc_y, rc_z = result.reduced_costs
    lag = result.problem.min_cost
    scale = 1.0 + float(np.abs(lag).max(initial=0.0))
    for m, coef in result.solution.multipliers_with_coef:
        scale += abs(m) * float(np.abs(coef).max(initial=0.0))
    thr = rel_tol * scale
    mask = rc_y <= thr
    zfix = rc_z > thr
    if base is not None:
        mask &= base.edge_mask
        zfix |= base.z_fixed
    # the LP optimum itself must lie on the face
    mask |= result.allocation.y > 0
    zfix &= ~(result.allocation.z > 0)
    # indices into ``result.floors``
    tight = tuple(k for k, m in enumerate(result.multipliers[: len(result.floors)]) if m > 0)
    return Face(mask, zfix, tight, thr)
