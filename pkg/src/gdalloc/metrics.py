"""Objective values, baseline normalisation and frontier point files."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .model import Allocation, AllocationGraph


def representativeness(graph: AllocationGraph, y) -> float:
    """``F1 = -sum V_j/(2 theta_ij) (y_ij - theta_ij)^2`` over edges with ``theta > 0``.

    Edges with zero target carry no term (their ``y`` is forced to zero).
    """
    theta = graph.theta
    live = theta > 0
    dev = np.asarray(y, dtype=np.float64)[live] - theta[live]
    terms = graph.priority[graph.edge_campaign[live]] / (2.0 * theta[live]) * dev * dev
    return -math.fsum(terms.tolist())


def compute_metrics(graph: AllocationGraph, allocation: Allocation):
    """``(F1, F2, F3)`` with compensated summation."""
    f1 = representativeness(graph, allocation.y)
    f2 = math.fsum((graph.value * allocation.y).tolist())
    f3 = math.fsum((graph.price * allocation.z).tolist())
    return f1, f2, f3


def clicks_only(graph: AllocationGraph, allocation: Allocation) -> float:
    """Click part of F2 (``W^c p^c``, conversions excluded)."""
    return math.fsum((graph.click_value_only * allocation.y).tolist())


@dataclass
class MetricsRow:
    label: str
    ngd: float
    click: float
    gd: float
    click_only: float | None = None
    knobs: dict = field(default_factory=dict)

    @property
    def ngd_click(self) -> float:
        return self.ngd + self.click

    @classmethod
    def from_allocation(cls, graph, allocation, label="", knobs=None):
        f1, f2, f3 = compute_metrics(graph, allocation)
        return cls(label, f3, f2, f1, clicks_only(graph, allocation), dict(knobs or {}))

    def values(self):
        return (self.ngd, self.click, self.ngd_click, self.gd)


@dataclass
class NormalizedRow:
    label: str
    ngd: float
    click: float
    ngd_click: float
    gd: float
    gd_raw: bool = False

    def values(self):
        return (self.ngd, self.click, self.ngd_click, self.gd)


def _ratio(x, base):
    return x / base if base != 0 else math.nan


def normalize(rows, baseline: MetricsRow):
    """Divide monetary columns by the baseline and GD by ``|baseline GD|``.

    The baseline row itself maps to ``(1, 1, 1, -1)``.  When the baseline GD
    is zero the GD column is left raw and ``gd_raw`` is set.
    """
    gd0 = abs(baseline.gd)
    out = []
    for r in rows:
        raw = gd0 == 0
        out.append(
            NormalizedRow(
                r.label,
                _ratio(r.ngd, baseline.ngd),
                _ratio(r.click, baseline.click),
                _ratio(r.ngd_click, baseline.ngd_click),
                r.gd if raw else r.gd / gd0,
                raw,
            )
        )
    return out


# ---------------------------------------------------------------------------
# frontier files
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ("ngd", "click", "ngd_click", "gd")
NORM_COLUMNS = tuple(f"norm_{c}" for c in METRIC_COLUMNS)


def frontier_rows(rows, baseline: MetricsRow | None, knob_names):
    """Sorted table rows ``(contour, knobs..., metrics..., normalized...)``."""
    knob_names = list(knob_names)
    norm = normalize(rows, baseline) if baseline is not None else [None] * len(rows)
    table = []
    for r, n in zip(rows, norm):
        knobs = [float(r.knobs[k]) for k in knob_names]
        nv = list(n.values()) if n is not None else [math.nan] * 4
        table.append(knobs + list(r.values()) + nv)
    table.sort(key=lambda t: tuple(t[: len(knob_names)]))
    return table


def contour_key(knobs, knob_names):
    """Grouping key of a two-knob sweep: the value of the first knob."""
    return float(knobs[knob_names[0]]) if len(knob_names) >= 2 else None


def emit_frontier(rows, baseline: MetricsRow | None, knob_names, stream=None) -> str:
    """Write the comma-delimited point file; returns the text.

    Columns: ``contour`` (two-knob sweeps only), knobs, raw metrics, normalized
    metrics.  Rows are sorted by knob values.  Floats use ``repr`` so the file
    parses back exactly.
    """
    knob_names = list(knob_names)
    table = frontier_rows(rows, baseline, knob_names)
    grouped = len(knob_names) >= 2
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = (["contour"] if grouped else []) + knob_names + list(METRIC_COLUMNS) + list(NORM_COLUMNS)
    w.writerow(header)
    for t in table:
        w.writerow(([repr(t[0])] if grouped else []) + [repr(float(v)) for v in t])
    text = buf.getvalue()
    if stream is not None:
        stream.write(text)
    return text


def parse_frontier(text: str):
    """Inverse of :func:`emit_frontier`: ``(header, list of float rows)``."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    return header, [[float(v) for v in row] for row in reader]


def pareto_mask(points, maximize=None, rel_tol: float = 1e-9) -> np.ndarray:
    """Non-dominated flags for a ``(n, k)`` array (all objectives maximised by default).

    ``b`` dominates ``a`` when it is no worse in every objective and better
    in at least one by more than ``rel_tol * (1 + max|column|)``; points
    that differ only by round-off are ties, not dominated.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError("points must be a 2-d array")
    if maximize is not None:
        pts = pts * np.where(np.asarray(maximize, dtype=bool), 1.0, -1.0)
    n = len(pts)
    eps = rel_tol * (1.0 + np.abs(pts).max(axis=0, initial=0.0)) if n else 0.0
    keep = np.ones(n, dtype=bool)
    for a in range(n):
        ge = np.all(pts >= pts[a] - eps, axis=1)
        gt = np.any(pts > pts[a] + eps, axis=1)
        if np.any(ge & gt):
            keep[a] = False
    return keep


def frontier_summary(rows, objectives=("ngd_click", "gd")):
    pts = np.array([[getattr(r, o) for o in objectives] for r in rows]) if rows else np.zeros((0, len(objectives)))
    mask = pareto_mask(pts) if len(pts) else np.zeros(0, dtype=bool)
    return {
        "points": len(rows),
        "frontier_size": int(mask.sum()),
        "dominated": int((~mask).sum()),
        "objectives": list(objectives),
    }
