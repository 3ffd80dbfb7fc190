"""Per-campaign uniform sampling of user visits with weight rescaling."""

from __future__ import annotations

import logging
from dataclasses import replace
from typing import Sequence

import numpy as np

from .model import Campaign, SupplyNode, eligibility_matrix

log = logging.getLogger(__name__)

RULES = ("average", "ht")


def sample_reweight(
    pool: Sequence[SupplyNode],
    campaigns: Sequence[Campaign],
    k: int,
    seed=None,
    rule: str = "ht",
    report: bool = False,
):
    """Sample ``k`` eligible visits per campaign and rescale their weights.

    Each campaign draws ``min(k, |B_j|)`` of its eligible visits uniformly
    without replacement; the union is kept in pool order (deduplicated by
    id).  Weights are then rescaled so sampled eligible totals match the
    pool:

    ``"ht"`` (default)
        Horvitz-Thompson: ``s_i / P(i sampled)`` with
        ``P = 1 - prod_j (1 - k_j/|B_j|)`` over the campaigns of ``i``.
        Unbiased for every campaign (indeed every subset) in expectation.
    ``"average"``
        campaign ``j`` gets factor ``S_j / S'_j`` (pool eligible weight over
        sampled eligible weight) and a visit takes the mean factor of the
        campaigns it is eligible for.  Exact for a single campaign or
        disjoint targeting, but biased when campaigns overlap heavily.

    Returns the sampled visits, or ``(visits, flagged_campaign_ids)`` when
    ``report`` is true; campaigns without eligible visits are flagged.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if rule not in RULES:
        raise ValueError(f"rule must be one of {RULES}, got {rule!r}")
    pool = list(pool)
    campaigns = list(campaigns)
    seen = set()
    for v in pool:
        if v.id in seen:
            raise ValueError(f"duplicate visit id {v.id!r} in pool")
        seen.add(v.id)
    rng = np.random.default_rng(seed)
    elig = eligibility_matrix(pool, campaigns) if campaigns else np.zeros((0, len(pool)), dtype=bool)
    s = np.array([v.weight for v in pool], dtype=np.float64)
    chosen = np.zeros(len(pool), dtype=bool)
    flagged = []
    take = np.zeros(len(campaigns), dtype=np.int64)
    for j, c in enumerate(campaigns):
        members = np.flatnonzero(elig[j])
        if len(members) == 0:
            flagged.append(c.id)
            continue
        take[j] = min(k, len(members))
        chosen[rng.choice(members, size=take[j], replace=False)] = True
    if flagged:
        log.warning("campaigns with no eligible visits: %s", ", ".join(flagged))

    factor = np.ones(len(pool))
    if rule == "average":
        total = np.zeros(len(pool))
        count = np.zeros(len(pool))
        for j in range(len(campaigns)):
            members = elig[j]
            sampled = float(s[members & chosen].sum())
            if sampled > 0:
                f = float(s[members].sum()) / sampled
                total[members & chosen] += f
                count[members & chosen] += 1
        hit = count > 0
        factor[hit] = total[hit] / count[hit]
    else:
        miss = np.ones(len(pool))
        for j in range(len(campaigns)):
            n = int(elig[j].sum())
            if n:
                miss[elig[j]] *= 1.0 - take[j] / n
        prob = 1.0 - miss
        ok = chosen & (prob > 0)
        factor[ok] = 1.0 / prob[ok]

    out = [replace(v, weight=float(v.weight * factor[i])) for i, v in enumerate(pool) if chosen[i]]
    return (out, flagged) if report else out
