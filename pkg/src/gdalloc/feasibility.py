"""Feasibility repair by penalty-priced dummy supply.

Each campaign gets one dummy arc per penalty tier (capacity = tier size,
cost = tier unit cost) from an unlimited dummy source; real supply is free.
The min-cost flow then says how much each campaign must under-deliver, and
demands are trimmed by exactly that amount.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Allocation, AllocationGraph
from .netflow import FlowProblem, solve_min_cost_flow

# relative cost perturbation that breaks penalty ties by campaign id
_TIE_BREAK = 1e-9


@dataclass
class TrimReport:
    campaign_ids: tuple
    underdelivery: np.ndarray
    original_demand: np.ndarray
    total_penalty: float
    per_campaign_penalty: np.ndarray

    @property
    def trimmed_demand(self) -> np.ndarray:
        return np.maximum(self.original_demand - self.underdelivery, 0.0)

    @property
    def feasible(self) -> bool:
        return not np.any(self.underdelivery > 0)

    def apply(self, graph: AllocationGraph) -> AllocationGraph:
        """The graph with trimmed demands (same object if nothing was trimmed)."""
        if self.feasible:
            return graph
        return graph.with_demands(self.trimmed_demand)

    def as_dict(self):
        ids = self.campaign_ids
        return {
            "total_penalty": self.total_penalty,
            "underdelivery": {c: float(u) for c, u in zip(ids, self.underdelivery)},
            "trimmed_demand": {c: float(d) for c, d in zip(ids, self.trimmed_demand)},
            "per_campaign_penalty": {c: float(p) for c, p in zip(ids, self.per_campaign_penalty)},
        }


def _dummy_flow(graph: AllocationGraph, tiers_per_campaign, tie_break=True):
    """Min-cost flow with dummy arcs; returns (y, z, u)."""
    ns, nc, E = graph.num_supply, graph.num_campaigns, graph.num_edges
    dummy, sink = ns + nc, ns + nc + 1
    s, d = graph.supply_weight, graph.demand

    tail = [graph.edge_supply, np.arange(ns)]
    head = [ns + graph.edge_campaign, np.full(ns, sink)]
    cost = [np.zeros(E), np.zeros(ns)]
    cap = [np.full(E, np.inf), np.full(ns, np.inf)]

    order = sorted(range(nc), key=lambda j: graph.campaigns[j].id)
    rank = np.empty(nc)
    rank[order] = np.arange(nc)
    dj, dc, du = [], [], []
    owner = []
    for j, tiers in enumerate(tiers_per_campaign):
        bump = 1.0 + _TIE_BREAK * (nc - 1 - rank[j]) / max(nc, 1) if tie_break else 1.0
        for capacity, unit in tiers:
            dj.append(ns + j)
            dc.append(unit * bump)
            du.append(capacity)
            owner.append(j)
    tail += [np.full(len(dj), dummy), [dummy]]
    head += [np.asarray(dj, dtype=np.int64), [sink]]
    cost += [np.asarray(dc, dtype=np.float64), [0.0]]
    cap += [np.asarray(du, dtype=np.float64), [np.inf]]

    supply = np.concatenate([s, -d, [d.sum(), -s.sum()]])
    names = [f"supply:{x.id}" for x in graph.supplies] + [f"campaign:{c.id}" for c in graph.campaigns]
    problem = FlowProblem(
        supply=supply,
        tail=np.concatenate([np.asarray(t, dtype=np.int64) for t in tail]),
        head=np.concatenate([np.asarray(h, dtype=np.int64) for h in head]),
        cost=np.concatenate([np.asarray(c, dtype=np.float64) for c in cost]),
        capacity=np.concatenate([np.asarray(c, dtype=np.float64) for c in cap]),
        node_names=names + ["dummy", "sink"],
    )
    sol = solve_min_cost_flow(problem)
    y = sol.flow[:E]
    z = sol.flow[E : E + ns]
    dummy_flow = sol.flow[E + ns : E + ns + len(dj)]
    u = np.bincount(np.asarray(owner, dtype=np.int64), weights=dummy_flow, minlength=nc)
    # flows below the solver's resolution are noise
    tiny = 1e-12 * max(1.0, float(d.sum()))
    u[u <= tiny] = 0.0
    u = np.minimum(u, d)
    return y, z, u, problem


def make_feasible(graph: AllocationGraph) -> TrimReport:
    """Minimum-penalty under-delivery profile.

    ``total_penalty`` is zero iff every demand can be met.  Campaigns with no
    eligible supply are trimmed to zero.
    """
    tiers = [c.penalty.arcs() for c in graph.campaigns]
    _, _, u, _ = _dummy_flow(graph, tiers)
    per = np.array([c.penalty(x) for c, x in zip(graph.campaigns, u)])
    return TrimReport(
        campaign_ids=tuple(c.id for c in graph.campaigns),
        underdelivery=u,
        original_demand=graph.demand.copy(),
        total_penalty=float(per.sum()),
        per_campaign_penalty=per,
    )


@dataclass
class Certificate:
    feasible: bool
    witness: Allocation | None
    violating_campaign: str | None = None


def certify_feasible(graph: AllocationGraph, report: TrimReport | None = None) -> Certificate:
    """Find a feasible allocation for the (trimmed) demands, or name a campaign
    that cannot be served."""
    g = report.apply(graph) if report is not None else graph
    tiers = [[(np.inf, 1.0)] for _ in g.campaigns]
    y, z, u, _ = _dummy_flow(g, tiers, tie_break=False)
    if np.any(u > 0):
        j = int(np.flatnonzero(u > 0)[0])
        return Certificate(False, None, g.campaigns[j].id)
    return Certificate(True, Allocation(y, z))
