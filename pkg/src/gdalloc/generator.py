"""Synthetic instances in the shape of a display-advertising forecast.

Supply nodes are attribute profiles with lognormal weights and lognormal
spot prices (clamped to a configured range).  Campaigns target random
conjunctions of attribute values.  Click probabilities come from a
logistic model over edge feature predicates.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import INF, AllocationGraph, Campaign, PenaltySpec, SupplyNode, TargetingPredicate, build_graph, eligibility_matrix

DEFAULT_SCHEMA = {
    "gender": ["M", "F"],
    "age": ["18-24", "25-34", "35-44", "45-54", "55+"],
    "location": ["CA", "NY", "TX", "FL", "WA", "IL", "MA", "GA"],
    "page": ["Sports", "Finance", "News", "Entertainment", "Travel", "Tech"],
}

DEFAULT_CLICK_WEIGHTS = {
    "bias": -4.0,
    "page=Sports": 0.4,
    "page=Tech": 0.3,
    "page=Finance": -0.2,
    "age=18-24": 0.3,
    "age=55+": -0.3,
    "gender=M": 0.1,
}

SIGNS = ("conventional", "as-printed")


@dataclass
class GeneratorConfig:
    """Knobs of the synthetic generator.

    ``targeting_density`` is the expected fraction of supply a campaign is
    eligible for; ``demand_scale`` is total demand as a fraction of total
    supply.  ``logistic_sign`` selects ``1/(1+exp(-score))`` (conventional)
    or ``1/(1+exp(score))`` (as printed).
    """

    num_supply: int = 1000
    num_campaigns: int = 100
    schema: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_SCHEMA.items()})
    price_log_mean: float = -0.7
    price_log_sigma: float = 0.8
    price_range: tuple = (0.046, 4.350)
    weight_log_mean: float = 6.0
    weight_log_sigma: float = 1.0
    click_weights: dict = field(default_factory=lambda: dict(DEFAULT_CLICK_WEIGHTS))
    ad_sigma: float = 0.5
    logistic_sign: str = "conventional"
    click_value: float = 10.0
    priority: float = 1.0
    demand_scale: float = 0.4
    targeting_density: float = 0.16
    clause_prob: float = 0.5
    penalty_range: tuple = (1.0, 5.0)
    max_retries: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.num_supply < 1 or self.num_campaigns < 1:
            raise ValueError("num_supply and num_campaigns must be >= 1")
        if not self.price_log_sigma >= 0:
            raise ValueError("price_log_sigma must be >= 0")
        if not 0 < self.targeting_density <= 1:
            raise ValueError("targeting_density must lie in (0, 1]")
        if self.logistic_sign not in SIGNS:
            raise ValueError(f"logistic_sign must be one of {SIGNS}")
        if not self.schema:
            raise ValueError("schema needs at least one attribute")
        for name, values in self.schema.items():
            if not values:
                raise ValueError(f"attribute {name!r} has no values")
        lo, hi = self.price_range
        if not 0 <= lo <= hi:
            raise ValueError("price_range must satisfy 0 <= lo <= hi")
        self.price_range = (float(lo), float(hi))
        self.penalty_range = tuple(float(x) for x in self.penalty_range)

    def as_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown generator field(s): {', '.join(sorted(unknown))}")
        data = dict(data)
        for k in ("price_range", "penalty_range"):
            if k in data:
                data[k] = tuple(data[k])
        return cls(**data)


def stream(seed: int, key: str) -> np.random.Generator:
    """Independent generator for ``key`` derived by hashing ``(seed, key)``."""
    digest = hashlib.sha256(f"{seed}:{key}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def sample_prices(rng, n, log_mean, log_sigma, lo, hi) -> np.ndarray:
    """Lognormal prices clamped to ``[lo, hi]``."""
    return np.clip(np.exp(log_mean + log_sigma * rng.standard_normal(n)), lo, hi)


def click_probability(score, sign: str = "conventional"):
    score = np.asarray(score, dtype=np.float64)
    if sign == "conventional":
        return 1.0 / (1.0 + np.exp(-score))
    if sign == "as-printed":
        return 1.0 / (1.0 + np.exp(score))
    raise ValueError(f"unknown logistic sign {sign!r}")


def _feature_score(cfg: GeneratorConfig, attributes) -> float:
    w = cfg.click_weights
    score = float(w.get("bias", 0.0))
    for name, value in attributes.items():
        score += float(w.get(f"{name}={value}", 0.0))
    return score


def _clause_fraction(cfg: GeneratorConfig) -> float:
    # each attribute is constrained with probability p and keeps a fraction f
    # of its values, so the eligible share is (1 - p + p f)^A
    A = len(cfg.schema)
    p = cfg.clause_prob
    if p <= 0:
        return 1.0
    f = (cfg.targeting_density ** (1.0 / A) - 1.0 + p) / p
    return min(max(f, 0.0), 1.0)


def _random_predicate(cfg: GeneratorConfig, rng) -> TargetingPredicate:
    frac = _clause_fraction(cfg)
    clauses = {}
    for name, values in cfg.schema.items():
        if rng.random() < cfg.clause_prob:
            size = min(len(values), max(1, int(round(frac * len(values)))))
            pick = sorted(rng.choice(len(values), size=size, replace=False).tolist())
            clauses[name] = [values[p] for p in pick]
    return TargetingPredicate(clauses)


def generate_instance(cfg: GeneratorConfig):
    """Build ``(supplies, campaigns, edges, metadata)``; deterministic in ``cfg``.

    ``edges`` lists ``(supply_id, campaign_id, click_prob, 0.0)`` for every
    eligible pair.  Campaigns that end up with no eligible supply after
    ``max_retries`` redraws are kept and listed in ``metadata['flagged']``.
    """
    rng = np.random.default_rng(cfg.seed)
    names = list(cfg.schema)
    supplies = []
    weights = np.exp(cfg.weight_log_mean + cfg.weight_log_sigma * rng.standard_normal(cfg.num_supply))
    prices = sample_prices(rng, cfg.num_supply, cfg.price_log_mean, cfg.price_log_sigma, *cfg.price_range)
    for i in range(cfg.num_supply):
        attrs = {n: cfg.schema[n][int(rng.integers(len(cfg.schema[n])))] for n in names}
        supplies.append(SupplyNode(f"s{i:05d}", float(weights[i]), float(prices[i]), attrs))

    preds, flagged, extras = [], [], []
    for j in range(cfg.num_campaigns):
        cid = f"c{j:04d}"
        crng = stream(cfg.seed, cid)
        for attempt in range(cfg.max_retries + 1):
            pred = _random_predicate(cfg, crng)
            if any(pred.matches(s.attributes) for s in supplies):
                break
        else:
            flagged.append(cid)
        preds.append((cid, pred))
        extras.append((float(cfg.ad_sigma * crng.standard_normal()), crng.random(), crng.uniform(*cfg.penalty_range)))

    stub = [Campaign(cid, 0.0, targeting=pred) for cid, pred in preds]
    elig = eligibility_matrix(supplies, stub)
    s = np.array([x.weight for x in supplies])
    overlap = elig.sum(axis=0).astype(np.float64)  # campaigns per supply
    campaigns = []
    for j, (cid, pred) in enumerate(preds):
        members = elig[j]
        S = float(s[members].sum())
        if S > 0:
            # scale so that total demand is about demand_scale * total supply
            share = float((s[members] / overlap[members]).sum()) / S
            demand = cfg.demand_scale * S * share * (0.5 + extras[j][1])
        else:
            demand = 0.0
        campaigns.append(
            Campaign(
                cid,
                float(demand),
                priority=cfg.priority,
                click_value=cfg.click_value,
                penalty=PenaltySpec(((INF, float(extras[j][2])),)),
                targeting=pred,
            )
        )

    base = np.array([_feature_score(cfg, x.attributes) for x in supplies])
    edges = []
    for j, c in enumerate(campaigns):
        idx = np.flatnonzero(elig[j])
        p = click_probability(base[idx] + extras[j][0], cfg.logistic_sign)
        edges.extend((supplies[i].id, c.id, float(pv), 0.0) for i, pv in zip(idx.tolist(), p.tolist()))
    metadata = {
        "generator": cfg.as_dict(),
        "logistic_sign": cfg.logistic_sign,
        "flagged": flagged,
    }
    return supplies, campaigns, edges, metadata


def generate_graph(cfg: GeneratorConfig) -> AllocationGraph:
    supplies, campaigns, edges, _ = generate_instance(cfg)
    return build_graph(supplies, campaigns, edges)


def log_mean_tolerance(sigma: float, n: int) -> float:
    """Three standard errors of the sample mean of ``n`` normal draws."""
    return 3.0 * sigma / math.sqrt(n)
