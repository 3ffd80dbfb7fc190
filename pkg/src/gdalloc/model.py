"""Supply/demand data model for guaranteed-delivery allocation.

Supply nodes are (sampled) user visits carrying a weight ``s_i`` and a spot
market price ``r_i``.  Campaigns carry a demand ``d_j``, a representativeness
priority ``V_j``, click/conversion values and a convex penalty.  An
:class:`AllocationGraph` is the immutable bipartite graph between them with
every per-edge quantity precomputed as flat numpy arrays.
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field, replace as _replace
from functools import cached_property
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import StructuralError

INF = math.inf


def _as_date(value):
    if isinstance(value, dt.datetime):
        return value.date()
    if isinstance(value, dt.date):
        return value
    if isinstance(value, str):
        return dt.date.fromisoformat(value[:10])
    raise TypeError(f"not a date: {value!r}")


@dataclass(frozen=True)
class SupplyNode:
    id: str
    weight: float
    price: float = 0.0
    attributes: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.weight >= 0:
            raise ValueError(f"supply {self.id}: weight must be >= 0, got {self.weight}")
        if not self.price >= 0:
            raise ValueError(f"supply {self.id}: price must be >= 0, got {self.price}")


@dataclass(frozen=True)
class PenaltySpec:
    """Piecewise-linear convex under-delivery penalty.

    ``tiers`` is a sequence of ``(capacity, unit_cost)`` with strictly
    increasing unit costs.  Under-delivery beyond the total capacity of a
    fully bounded spec is charged at the last tier's unit cost.
    """

    tiers: tuple = ((INF, 1.0),)

    def __post_init__(self):
        tiers = tuple((float(c), float(u)) for c, u in self.tiers)
        if not tiers:
            raise ValueError("penalty needs at least one tier")
        for k, (cap, cost) in enumerate(tiers):
            if not cap > 0:
                raise ValueError("tier capacity must be positive")
            if not cost > 0:
                raise ValueError("tier unit cost must be positive")
            if math.isinf(cap) and k != len(tiers) - 1:
                raise ValueError("only the last tier may be unbounded")
            if k and not cost > tiers[k - 1][1]:
                raise ValueError("tier unit costs must be strictly increasing")
        object.__setattr__(self, "tiers", tiers)

    def arcs(self):
        """Tiers as dummy-supply arcs; a bounded spec gets an open last arc."""
        out = list(self.tiers)
        if not math.isinf(out[-1][0]):
            out.append((INF, out[-1][1]))
        return out

    def __call__(self, u: float) -> float:
        total = 0.0
        left = max(float(u), 0.0)
        for cap, cost in self.arcs():
            take = min(left, cap)
            total += take * cost
            left -= take
            if left <= 0:
                break
        return total


@dataclass(frozen=True)
class TargetingPredicate:
    """Conjunction of attribute memberships, numeric ranges and a date window.

    A visit missing an attribute named by any clause is not eligible.
    """

    clauses: Mapping[str, frozenset] = field(default_factory=dict)
    ranges: Mapping[str, tuple] = field(default_factory=dict)
    date_range: tuple | None = None
    date_attribute: str = "date"

    def __post_init__(self):
        object.__setattr__(
            self, "clauses", {k: frozenset(v) for k, v in dict(self.clauses).items()}
        )
        rng = {}
        for k, (lo, hi) in dict(self.ranges).items():
            if lo > hi:
                raise ValueError(f"range for {k} is not ordered: {lo} > {hi}")
            rng[k] = (lo, hi)
        object.__setattr__(self, "ranges", rng)
        if self.date_range is not None:
            lo, hi = (_as_date(x) for x in self.date_range)
            if lo > hi:
                raise ValueError(f"date interval is not ordered: {lo} > {hi}")
            object.__setattr__(self, "date_range", (lo, hi))

    @property
    def attribute_names(self):
        names = set(self.clauses) | set(self.ranges)
        if self.date_range is not None:
            names.add(self.date_attribute)
        return names

    def matches(self, attributes: Mapping[str, Any]) -> bool:
        for name, allowed in self.clauses.items():
            if name not in attributes:
                return False
            value = attributes[name]
            if isinstance(value, (list, tuple, set, frozenset)):
                # multi-valued attribute (e.g. interests): any overlap counts
                if not allowed.intersection(value):
                    return False
            elif value not in allowed:
                return False
        for name, (lo, hi) in self.ranges.items():
            value = attributes.get(name)
            if value is None or not lo <= value <= hi:
                return False
        if self.date_range is not None:
            value = attributes.get(self.date_attribute)
            if value is None:
                return False
            day = _as_date(value)
            if not self.date_range[0] <= day <= self.date_range[1]:
                return False
        return True


@dataclass(frozen=True)
class Campaign:
    id: str
    demand: float
    priority: float = 1.0
    click_value: float = 0.0
    conversion_value: float = 0.0
    penalty: PenaltySpec = field(default_factory=PenaltySpec)
    targeting: TargetingPredicate = field(default_factory=TargetingPredicate)

    def __post_init__(self):
        if not self.demand >= 0:
            raise ValueError(f"campaign {self.id}: demand must be >= 0")
        if not self.priority > 0:
            raise ValueError(f"campaign {self.id}: priority must be > 0")
        if not (self.click_value >= 0 and self.conversion_value >= 0):
            raise ValueError(f"campaign {self.id}: click/conversion values must be >= 0")


def evaluate_eligibility(predicate: TargetingPredicate, attributes: Mapping[str, Any]) -> bool:
    """True iff a visit with ``attributes`` satisfies ``predicate``."""
    return predicate.matches(attributes)


def _freeze(*arrays):
    for a in arrays:
        a.setflags(write=False)


@dataclass(frozen=True, eq=False)
class AllocationGraph:
    """Immutable bipartite instance.

    Edges are stored campaign-major: all edges of campaign 0 (in supply
    order), then campaign 1, and so on.  Arrays are read-only.
    """

    supplies: tuple
    campaigns: tuple
    edge_supply: np.ndarray
    edge_campaign: np.ndarray
    click_prob: np.ndarray
    conv_prob: np.ndarray

    def __post_init__(self):
        ns, nc = len(self.supplies), len(self.campaigns)
        es = np.ascontiguousarray(self.edge_supply, dtype=np.int64)
        ec = np.ascontiguousarray(self.edge_campaign, dtype=np.int64)
        pc = np.ascontiguousarray(self.click_prob, dtype=np.float64)
        pa = np.ascontiguousarray(self.conv_prob, dtype=np.float64)
        if not (len(es) == len(ec) == len(pc) == len(pa)):
            raise StructuralError("edge arrays differ in length")
        if len(es) and (es.min() < 0 or es.max() >= ns or ec.min() < 0 or ec.max() >= nc):
            raise StructuralError("edge references a missing node")
        if np.any((pc < 0) | (pc > 1) | (pa < 0) | (pa > 1)):
            raise StructuralError("edge probabilities must lie in [0, 1]")
        order = np.lexsort((es, ec))
        es, ec, pc, pa = es[order], ec[order], pc[order], pa[order]
        if len(es) > 1:
            dup = (np.diff(ec) == 0) & (np.diff(es) == 0)
            if dup.any():
                k = int(np.argmax(dup))
                raise StructuralError(
                    f"duplicate edge ({self.supplies[es[k]].id}, {self.campaigns[ec[k]].id})"
                )
        sids = [s.id for s in self.supplies]
        cids = [c.id for c in self.campaigns]
        if len(set(sids)) != ns:
            raise StructuralError("supply ids are not unique")
        if len(set(cids)) != nc:
            raise StructuralError("campaign ids are not unique")
        _freeze(es, ec, pc, pa)
        object.__setattr__(self, "edge_supply", es)
        object.__setattr__(self, "edge_campaign", ec)
        object.__setattr__(self, "click_prob", pc)
        object.__setattr__(self, "conv_prob", pa)

    # -- sizes and node arrays -------------------------------------------
    @property
    def num_supply(self) -> int:
        return len(self.supplies)

    @property
    def num_campaigns(self) -> int:
        return len(self.campaigns)

    @property
    def num_edges(self) -> int:
        return len(self.edge_supply)

    @cached_property
    def supply_weight(self) -> np.ndarray:
        a = np.array([s.weight for s in self.supplies], dtype=np.float64)
        _freeze(a)
        return a

    @cached_property
    def price(self) -> np.ndarray:
        a = np.array([s.price for s in self.supplies], dtype=np.float64)
        _freeze(a)
        return a

    @cached_property
    def demand(self) -> np.ndarray:
        a = np.array([c.demand for c in self.campaigns], dtype=np.float64)
        _freeze(a)
        return a

    @cached_property
    def priority(self) -> np.ndarray:
        a = np.array([c.priority for c in self.campaigns], dtype=np.float64)
        _freeze(a)
        return a

    @cached_property
    def supply_index(self) -> dict:
        return {s.id: i for i, s in enumerate(self.supplies)}

    @cached_property
    def campaign_index(self) -> dict:
        return {c.id: j for j, c in enumerate(self.campaigns)}

    @cached_property
    def edge_index(self) -> dict:
        sids = [s.id for s in self.supplies]
        cids = [c.id for c in self.campaigns]
        return {
            (sids[i], cids[j]): e
            for e, (i, j) in enumerate(zip(self.edge_supply.tolist(), self.edge_campaign.tolist()))
        }

    # -- adjacency ---------------------------------------------------------
    @cached_property
    def campaign_ptr(self) -> np.ndarray:
        """CSR pointer: edges of campaign j are ``campaign_ptr[j]:campaign_ptr[j+1]``."""
        counts = np.bincount(self.edge_campaign, minlength=self.num_campaigns)
        ptr = np.zeros(self.num_campaigns + 1, dtype=np.int64)
        np.cumsum(counts, out=ptr[1:])
        _freeze(ptr)
        return ptr

    @cached_property
    def supply_order(self) -> np.ndarray:
        """Edge ids sorted by supply (stable), paired with :attr:`supply_ptr`."""
        a = np.argsort(self.edge_supply, kind="stable").astype(np.int64)
        _freeze(a)
        return a

    @cached_property
    def supply_ptr(self) -> np.ndarray:
        counts = np.bincount(self.edge_supply, minlength=self.num_supply)
        ptr = np.zeros(self.num_supply + 1, dtype=np.int64)
        np.cumsum(counts, out=ptr[1:])
        _freeze(ptr)
        return ptr

    # -- derived per-edge quantities ---------------------------------------
    @cached_property
    def eligible_supply(self) -> np.ndarray:
        """``S_j``: total weight of supply eligible for each campaign."""
        a = np.bincount(
            self.edge_campaign, weights=self.supply_weight[self.edge_supply], minlength=self.num_campaigns
        ).astype(np.float64)
        _freeze(a)
        return a

    @cached_property
    def theta(self) -> np.ndarray:
        a, _ = compute_targets(self)
        _freeze(a)
        return a

    @cached_property
    def value(self) -> np.ndarray:
        a = compute_edge_values(self)
        _freeze(a)
        return a

    @cached_property
    def click_value_only(self) -> np.ndarray:
        wc = np.array([c.click_value for c in self.campaigns])
        a = wc[self.edge_campaign] * self.click_prob
        _freeze(a)
        return a

    @cached_property
    def flagged_campaigns(self) -> tuple:
        """Ids of campaigns with positive demand but no eligible supply."""
        bad = (self.eligible_supply <= 0) & (self.demand > 0)
        return tuple(self.campaigns[j].id for j in np.flatnonzero(bad))

    # -- transforms ----------------------------------------------------------
    def with_demands(self, demands) -> "AllocationGraph":
        demands = np.asarray(demands, dtype=np.float64)
        camps = tuple(
            _replace(c, demand=max(float(d), 0.0)) for c, d in zip(self.campaigns, demands)
        )
        return AllocationGraph(
            self.supplies, camps, self.edge_supply, self.edge_campaign, self.click_prob, self.conv_prob
        )

    def scaled(self, factor: float) -> "AllocationGraph":
        """Multiply every supply weight and demand by ``factor``."""
        sup = tuple(_replace(s, weight=s.weight * factor) for s in self.supplies)
        camps = tuple(_replace(c, demand=c.demand * factor) for c in self.campaigns)
        return AllocationGraph(
            sup, camps, self.edge_supply, self.edge_campaign, self.click_prob, self.conv_prob
        )


def compute_targets(graph: AllocationGraph):
    """Uniform targets ``theta_ij = s_i d_j / S_j`` and ``S_j``.

    Edges of campaigns with ``S_j == 0`` get ``theta = 0``; such campaigns
    show up in :attr:`AllocationGraph.flagged_campaigns`.
    """
    S = graph.eligible_supply
    d = graph.demand
    share = np.zeros(graph.num_campaigns)
    ok = S > 0
    share[ok] = d[ok] / S[ok]
    theta = graph.supply_weight[graph.edge_supply] * share[graph.edge_campaign]
    return theta, S


def compute_edge_values(graph: AllocationGraph) -> np.ndarray:
    """Expected value per unit allocation, ``W^c p^c + W^a p^a``."""
    wc = np.array([c.click_value for c in graph.campaigns], dtype=np.float64)
    wa = np.array([c.conversion_value for c in graph.campaigns], dtype=np.float64)
    j = graph.edge_campaign
    return wc[j] * graph.click_prob + wa[j] * graph.conv_prob


def eligibility_matrix(visits: Sequence[SupplyNode], campaigns: Sequence[Campaign]) -> np.ndarray:
    """Boolean (num_campaigns, num_visits) eligibility via column-wise checks."""
    nv = len(visits)
    out = np.ones((len(campaigns), nv), dtype=bool)
    columns = {}

    def column(name):
        if name not in columns:
            columns[name] = [v.attributes.get(name, _MISSING) for v in visits]
        return columns[name]

    for j, camp in enumerate(campaigns):
        pred = camp.targeting
        row = out[j]
        for name, allowed in pred.clauses.items():
            col = column(name)
            row &= np.fromiter(
                (
                    (x is not _MISSING)
                    and (
                        bool(allowed.intersection(x))
                        if isinstance(x, (list, tuple, set, frozenset))
                        else x in allowed
                    )
                    for x in col
                ),
                dtype=bool,
                count=nv,
            )
        for name, (lo, hi) in pred.ranges.items():
            col = column(name)
            row &= np.fromiter(
                (x is not _MISSING and x is not None and lo <= x <= hi for x in col), dtype=bool, count=nv
            )
        if pred.date_range is not None:
            lo, hi = pred.date_range
            col = column(pred.date_attribute)
            row &= np.fromiter(
                (x is not _MISSING and x is not None and lo <= _as_date(x) <= hi for x in col),
                dtype=bool,
                count=nv,
            )
    return out


class _Missing:
    __slots__ = ()

    def __repr__(self):
        return "<missing>"


_MISSING = _Missing()


def build_graph(
    visits: Iterable[SupplyNode],
    campaigns: Iterable[Campaign],
    edges: Iterable | None = None,
) -> AllocationGraph:
    """Build the bipartite graph.

    Without ``edges`` the edge set is every eligible (visit, campaign) pair
    and probabilities are zero.  With ``edges`` (an iterable of
    ``(supply_id, campaign_id, click_prob, conv_prob)``) the explicit list
    defines the edge set.
    """
    visits = tuple(visits)
    campaigns = tuple(campaigns)
    if edges is None:
        elig = eligibility_matrix(visits, campaigns)
        ec, es = np.nonzero(elig)
        pc = np.zeros(len(es))
        pa = np.zeros(len(es))
    else:
        sidx = {s.id: i for i, s in enumerate(visits)}
        cidx = {c.id: j for j, c in enumerate(campaigns)}
        es, ec, pc, pa = [], [], [], []
        for rec in edges:
            sid, cid = rec[0], rec[1]
            if sid not in sidx:
                raise StructuralError(f"edge references unknown supply {sid!r}")
            if cid not in cidx:
                raise StructuralError(f"edge references unknown campaign {cid!r}")
            es.append(sidx[sid])
            ec.append(cidx[cid])
            pc.append(float(rec[2]) if len(rec) > 2 and rec[2] is not None else 0.0)
            pa.append(float(rec[3]) if len(rec) > 3 and rec[3] is not None else 0.0)
    return AllocationGraph(
        visits,
        campaigns,
        np.asarray(es, dtype=np.int64),
        np.asarray(ec, dtype=np.int64),
        np.asarray(pc, dtype=np.float64),
        np.asarray(pa, dtype=np.float64),
    )


@dataclass
class Allocation:
    """Primal solution aligned with a graph: ``y`` per edge, ``z`` per supply."""

    y: np.ndarray
    z: np.ndarray

    @classmethod
    def from_y(cls, graph: AllocationGraph, y) -> "Allocation":
        y = np.asarray(y, dtype=np.float64)
        used = np.bincount(graph.edge_supply, weights=y, minlength=graph.num_supply)
        return cls(y, graph.supply_weight - used)

    def to_records(self, graph: AllocationGraph, threshold: float = 0.0):
        sids = [s.id for s in graph.supplies]
        cids = [c.id for c in graph.campaigns]
        y_rows = [
            [sids[i], cids[j], float(v)]
            for i, j, v in zip(graph.edge_supply.tolist(), graph.edge_campaign.tolist(), self.y.tolist())
            if v > threshold
        ]
        z_rows = [[sid, float(v)] for sid, v in zip(sids, self.z.tolist())]
        return {"y": y_rows, "z": z_rows}

    @classmethod
    def from_records(cls, graph: AllocationGraph, records) -> "Allocation":
        try:
            y_rows = records["y"]
            z_rows = records["z"]
        except (KeyError, TypeError) as exc:
            raise StructuralError("allocation needs 'y' and 'z' lists") from exc
        y = np.zeros(graph.num_edges)
        z = np.zeros(graph.num_supply)
        eidx = graph.edge_index
        for row in y_rows:
            try:
                sid, cid, val = row
            except (TypeError, ValueError) as exc:
                raise StructuralError(f"malformed y row {row!r}") from exc
            if (sid, cid) not in eidx:
                raise StructuralError(f"unknown edge ({sid!r}, {cid!r})")
            y[eidx[(sid, cid)]] = float(val)
        sidx = graph.supply_index
        for row in z_rows:
            try:
                sid, val = row
            except (TypeError, ValueError) as exc:
                raise StructuralError(f"malformed z row {row!r}") from exc
            if sid not in sidx:
                raise StructuralError(f"unknown supply {sid!r}")
            z[sidx[sid]] = float(val)
        return cls(y, z)


@dataclass
class ValidationReport:
    max_supply_residual: float
    max_demand_residual: float
    negativity_violations: int
    supply_violations: list
    demand_violations: list
    tol: float

    @property
    def passed(self) -> bool:
        return not (self.supply_violations or self.demand_violations or self.negativity_violations)

    def as_dict(self):
        return {
            "passed": self.passed,
            "tol": self.tol,
            "max_supply_residual": self.max_supply_residual,
            "max_demand_residual": self.max_demand_residual,
            "negativity_violations": self.negativity_violations,
            "supply_violations": self.supply_violations,
            "demand_violations": self.demand_violations,
        }


def validate_allocation(graph: AllocationGraph, allocation: Allocation, tol: float = 1e-6) -> ValidationReport:
    """Check supply, demand and non-negativity constraints.

    A shape mismatch between the allocation and the graph raises
    :class:`StructuralError`; numeric violations are only reported.
    """
    y = np.asarray(allocation.y, dtype=np.float64)
    z = np.asarray(allocation.z, dtype=np.float64)
    if y.shape != (graph.num_edges,) or z.shape != (graph.num_supply,):
        raise StructuralError(
            f"allocation shape {y.shape}/{z.shape} does not match graph "
            f"({graph.num_edges} edges, {graph.num_supply} supplies)"
        )
    used = np.bincount(graph.edge_supply, weights=y, minlength=graph.num_supply)
    sup_res = np.abs(used + z - graph.supply_weight)
    got = np.bincount(graph.edge_campaign, weights=y, minlength=graph.num_campaigns)
    dem_res = np.abs(got - graph.demand)
    neg = int(np.count_nonzero(y < -tol) + np.count_nonzero(z < -tol))
    return ValidationReport(
        max_supply_residual=float(sup_res.max(initial=0.0)),
        max_demand_residual=float(dem_res.max(initial=0.0)),
        negativity_violations=neg,
        supply_violations=[graph.supplies[i].id for i in np.flatnonzero(sup_res > tol)],
        demand_violations=[graph.campaigns[j].id for j in np.flatnonzero(dem_res > tol)],
        tol=tol,
    )
