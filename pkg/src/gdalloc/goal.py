"""Goal-programming runs: baseline, single objectives, two- and three-step
sequences, and knob sweeps.

Floors are always fractions of stage optima computed on the trimmed graph.
A floor at 100% of a linear optimum is imposed by restricting the later
stage to the optimal face of that LP (open arcs of zero reduced cost,
exhausted supplies, tight rows held with equality).  Multipliers of the
original floors are then recovered by adding a multiple of the LP dual
certificate, which makes the reported duals satisfy the KKT system of the
stage as written with ``>=`` floors.
"""

from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import qp
from .errors import UndefinedGammaError
from .feasibility import TrimReport, make_feasible
from .linear import Face, LinearStageResult, optimal_face, solve_linear_stage
from .metrics import MetricsRow, compute_metrics, pareto_mask
from .model import Allocation, AllocationGraph
from .qp import DualSolution, Floor, QpStageSpec

MODES = ("baseline", "single", "two-step-a", "two-step-b", "two-step-c", "three-step")
OBJECTIVES = ("NGD", "Click", "NGD+Click", "GD", "weighted")
ORDERS = ("F3-first", "F2-first")
KNOBS = ("gamma", "xi", "psi", "omega", "eta")

# fractions this close to one are treated as exactly one
FULL_FRACTION = 1.0 - 1e-9

_REQUIRED = {
    "baseline": (),
    "single": (),
    "two-step-a": ("psi",),
    "two-step-b": ("gamma", "omega"),
    "two-step-c": ("gamma", "eta"),
    "three-step": ("eta", "omega"),
}


@dataclass(frozen=True)
class KnobConfig:
    """Solve mode and its knobs.

    ``xi`` defaults to 0 except for the ``NGD+Click`` objective, where it
    defaults to 1.  ``order`` only matters for ``three-step``.
    """

    mode: str = "baseline"
    objective: str | None = None
    gamma: float | None = None
    xi: float | None = None
    psi: float | None = None
    omega: float | None = None
    eta: float | None = None
    order: str = "F3-first"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        missing = [k for k in _REQUIRED[self.mode] if getattr(self, k) is None]
        if self.mode == "single":
            if self.objective not in OBJECTIVES:
                raise ValueError(f"single mode needs objective in {OBJECTIVES}, got {self.objective!r}")
            if self.objective == "weighted" and self.gamma is None:
                missing.append("gamma")
        if missing:
            raise ValueError(f"mode {self.mode} requires knob(s): {', '.join(missing)}")
        for k in ("psi", "omega", "eta"):
            v = getattr(self, k)
            if v is not None and not 0.0 < v <= 1.0:
                raise ValueError(f"{k} must lie in (0, 1], got {v}")
        if self.gamma is not None and not self.gamma >= 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.xi is not None and not self.xi >= 0:
            raise ValueError(f"xi must be >= 0, got {self.xi}")
        if self.order not in ORDERS:
            raise ValueError(f"order must be one of {ORDERS}, got {self.order!r}")
        if self.mode in ("two-step-b", "two-step-c") and not self.gamma > 0:
            raise ValueError("gamma must be > 0 for the quadratic stage")

    @property
    def xi_value(self) -> float:
        if self.xi is not None:
            return float(self.xi)
        return 1.0 if self.objective == "NGD+Click" else 0.0

    def knob_values(self) -> dict:
        return {k: getattr(self, k) for k in KNOBS if getattr(self, k) is not None}

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data) -> "KnobConfig":
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown knob config field(s): {', '.join(sorted(unknown))}")
        return cls(**data)


@dataclass
class StageTrace:
    optima: dict = field(default_factory=dict)
    floors: list = field(default_factory=list)
    stages: list = field(default_factory=list)

    def as_dict(self):
        return {"optima": dict(self.optima), "floors": list(self.floors), "stages": list(self.stages)}


@dataclass
class RunResult:
    config: KnobConfig
    graph: AllocationGraph
    allocation: Allocation
    duals: DualSolution
    metrics: tuple
    trace: StageTrace
    trim: TrimReport
    recovered_gamma: float | None = None
    objective: float = math.nan

    @property
    def row(self) -> MetricsRow:
        f1, f2, f3 = self.metrics
        from .metrics import clicks_only

        return MetricsRow(self.label, f3, f2, f1, clicks_only(self.graph, self.allocation), self.config.knob_values())

    @property
    def label(self) -> str:
        c = self.config
        if c.mode == "single":
            return c.objective if c.objective != "weighted" else f"weighted(gamma={c.gamma:g},xi={c.xi_value:g})"
        if c.mode == "baseline":
            return "baseline"
        kv = ",".join(f"{k}={v:g}" for k, v in c.knob_values().items())
        return f"{c.mode}({kv})"


# ---------------------------------------------------------------------------
# shared context
# ---------------------------------------------------------------------------


class Context:
    """Trimmed graph plus a cache of knob-independent linear stages.

    Safe to share between threads; cached results are deterministic so a
    race only duplicates work.
    """

    def __init__(self, graph: AllocationGraph, tol: float = 1e-9, qp_tol: float = 1e-10):
        self.original = graph
        self.trim = make_feasible(graph)
        self.graph = self.trim.apply(graph)
        self.tol = tol
        self.qp_tol = qp_tol
        self._cache = {}
        self._lock = threading.Lock()

    def profit(self, name: str, xi: float = 0.0):
        g = self.graph
        if name == "F3":
            return None, g.price
        if name == "F2":
            return g.value, None
        if name == "xiF2+F3":
            return xi * g.value, g.price
        if name == "zero":
            return None, None
        raise ValueError(name)

    def floor(self, name: str, bound: float, xi: float = 0.0) -> Floor:
        g = self.graph
        if name == "F3":
            return qp.ngd_floor(g, bound)
        if name == "F2":
            return qp.click_floor(g, bound)
        if name == "xiF2+F3":
            return qp.monetary_floor(g, xi, bound)
        raise ValueError(name)

    def linear(self, key, objective: str, xi: float = 0.0, floors=(), face: Face | None = None):
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        yp, zp = self.profit(objective, xi)
        res = solve_linear_stage(
            self.graph, yp, zp, floors=floors, tol=self.tol,
            edge_mask=None if face is None else face.edge_mask,
            z_fixed=None if face is None else face.z_fixed,
        )
        with self._lock:
            self._cache.setdefault(key, res)
        return res


def _lp_duals(res: LinearStageResult) -> DualSolution:
    alpha, beta = res.node_duals
    rc_y, rc_z = res.reduced_costs
    return DualSolution(alpha, beta, rc_y, rc_z, list(res.multipliers[: len(res.floors)]))


@dataclass
class _Cert:
    """An LP whose optimal face a later stage is restricted to."""

    result: LinearStageResult
    face: Face
    objective_floor: int  # index of the stage floor on this LP's objective
    floor_ids: tuple  # stage-floor index of each LP side row


def _lift(graph, alloc, duals, rho, spec_like, floors, chain):
    """Add LP certificates (innermost first) until every multiplier of the
    original stage has the right sign."""
    alpha = duals.alpha.copy()
    beta = duals.beta.copy()
    rho = np.array(rho, dtype=np.float64)
    live = graph.theta > 0
    for cert in reversed(chain):
        tmp = DualSolution(alpha, beta, None, None, list(rho))
        gy, gz = qp._stationarity(graph, alloc.y, tmp, spec_like.gamma, spec_like.xi,
                                  spec_like.include_f3, spec_like.include_f2, floors)
        rc_y, rc_z = cert.result.reduced_costs
        thr = cert.face.threshold
        t = 0.0
        sel = live & (rc_y > thr) & (gy < 0)
        if np.any(sel):
            t = max(t, float(np.max(-gy[sel] / rc_y[sel])))
        sel = (rc_z > thr) & (gz < 0)
        if np.any(sel):
            t = max(t, float(np.max(-gz[sel] / rc_z[sel])))
        mults = cert.result.multipliers[: len(cert.floor_ids)]
        for k, m in zip(cert.floor_ids, mults):
            if m > 0 and rho[k] < 0:
                t = max(t, -rho[k] / m)
        if t > 0:
            a_lp, b_lp = cert.result.node_duals
            alpha += t * a_lp
            beta += t * b_lp
            rho[cert.objective_floor] += t
            for k, m in zip(cert.floor_ids, mults):
                rho[k] += t * m
    # clip round-off in multipliers that must be non-negative
    rho = np.maximum(rho, 0.0)
    out = DualSolution(alpha, beta, None, None, list(map(float, rho)))
    full = replace(spec_like, floors=list(floors), edge_mask=None, z_fixed=None)
    qp._fill_slacks(graph, alloc.y, out, full)
    return out


def _quadratic(ctx: Context, trace: StageTrace, gamma, xi, include_f2, include_f3, floors, chain):
    """Quadratic stage over the stage floors ``floors``; floors that are the
    objective of a certificate in ``chain`` are enforced through its face."""
    g = ctx.graph
    covered = {c.objective_floor for c in chain}
    tight = set()
    for c in chain:
        tight |= {c.floor_ids[k] for k in c.face.tight if k < len(c.floor_ids)}
    face = chain[-1].face if chain else None
    qidx = [k for k in range(len(floors)) if k not in covered]
    qfloors = [floors[k].with_sense("==" if k in tight else ">=") for k in qidx]
    spec = QpStageSpec(
        gamma=gamma, xi=xi, include_f2=include_f2, include_f3=include_f3, floors=qfloors,
        edge_mask=None if face is None else face.edge_mask,
        z_fixed=None if face is None else face.z_fixed,
    )
    alloc, duals, stats = qp.solve_stage(g, spec, tol=ctx.qp_tol, check_floors=False)
    rho = np.zeros(len(floors))
    rho[qidx] = duals.rho
    if chain or tight:
        duals = _lift(g, alloc, duals, rho, spec, floors, chain)
    else:
        duals.rho = list(map(float, rho))
    trace.stages.append({
        "stage": len(trace.stages) + 1,
        "objective": _objective_name(gamma, xi, include_f2, include_f3),
        "solver": "qp",
        "value": stats.objective,
        "iterations": stats.iterations,
        "newton_steps": stats.newton_steps,
        "kkt_residual": stats.kkt_residual,
        "face": bool(chain),
    })
    return alloc, duals, stats.objective


def _objective_name(gamma, xi, f2, f3):
    parts = [f"{gamma:g}*F1"]
    if f2 and xi:
        parts.append(f"{xi:g}*F2")
    if f3:
        parts.append("F3")
    return " + ".join(parts)


def _record_floors(trace, floors, fractions, refs, duals, alloc, tol=1e-9):
    for fl, frac, ref, r in zip(floors, fractions, refs, duals.rho):
        trace.floors.append({
            "name": fl.name,
            "fraction": frac,
            "reference": ref,
            "bound": fl.bound,
            "value": fl.value(alloc),
            "multiplier": float(r),
            "binding": bool(r > tol),
        })


def _record_lp(trace, name, res: LinearStageResult, objective):
    trace.optima[name] = res.objective
    trace.stages.append({
        "stage": len(trace.stages) + 1,
        "objective": objective,
        "solver": "netflow",
        "value": res.objective,
        "pricing_solves": res.solution.pricing_solves,
    })


def _full(frac) -> bool:
    return frac >= FULL_FRACTION


# ---------------------------------------------------------------------------
# modes
# ---------------------------------------------------------------------------


def _finish(ctx, config, alloc, duals, trace, objective, gamma=None):
    return RunResult(
        config=config,
        graph=ctx.graph,
        allocation=alloc,
        duals=duals,
        metrics=compute_metrics(ctx.graph, alloc),
        trace=trace,
        trim=ctx.trim,
        recovered_gamma=gamma,
        objective=objective,
    )


def _run_baseline(ctx, config):
    trace = StageTrace()
    res = ctx.linear(("baseline",), "zero")
    _record_lp(trace, "feasible", res, "0")
    return _finish(ctx, config, res.allocation, _lp_duals(res), trace, res.objective)


def _run_single(ctx, config):
    trace = StageTrace()
    obj = config.objective
    xi = config.xi_value
    g = ctx.graph
    if obj == "GD" or (obj == "weighted" and config.gamma > 0):
        if obj == "GD":
            spec = QpStageSpec(gamma=1.0, include_f2=False, include_f3=False)
        else:
            spec = QpStageSpec(gamma=config.gamma, xi=xi, include_f2=xi > 0, include_f3=True)
        alloc, duals, stats = qp.solve_stage(g, spec, tol=ctx.qp_tol)
        trace.stages.append({"stage": 1, "objective": _objective_name(spec.gamma, xi, spec.include_f2,
                                                                      spec.include_f3),
                             "solver": "qp", "value": stats.objective, "iterations": stats.iterations,
                             "newton_steps": stats.newton_steps, "kkt_residual": stats.kkt_residual})
        return _finish(ctx, config, alloc, duals, trace, stats.objective)
    name = {"NGD": "F3", "Click": "F2", "NGD+Click": "xiF2+F3", "weighted": "xiF2+F3"}[obj]
    res = ctx.linear(("max", name, xi), name, xi)
    label = {"F3": "R*", "F2": "P*", "xiF2+F3": "M*"}[name]
    _record_lp(trace, label, res, name)
    return _finish(ctx, config, res.allocation, _lp_duals(res), trace, res.objective)


def _run_two_step(ctx, config, first, label, frac, gamma, xi, include_f2, include_f3):
    """Stage 1: max ``first`` (linear); stage 2: the quadratic objective with
    ``first >= frac * optimum``."""
    trace = StageTrace()
    lp = ctx.linear(("max", first, xi if first == "xiF2+F3" else 0.0), first, xi)
    _record_lp(trace, label, lp, first)
    floors = [ctx.floor(first, frac * lp.objective, xi)]
    chain = [_Cert(lp, optimal_face(lp), 0, ())] if _full(frac) else []
    alloc, duals, obj = _quadratic(ctx, trace, gamma, xi, include_f2, include_f3, floors, chain)
    _record_floors(trace, floors, [frac], [label], duals, alloc)
    return alloc, duals, trace, obj


def _run_two_step_a(ctx, config):
    xi = config.xi_value
    alloc, duals, trace, obj = _run_two_step(ctx, config, "xiF2+F3", "M*", config.psi, 1.0, xi, False, False)
    rho = duals.rho[0]
    gamma = qp.recover_gamma(rho) if rho > 0 else None
    return _finish(ctx, config, alloc, duals, trace, obj, gamma)


def _run_two_step_b(ctx, config):
    alloc, duals, trace, obj = _run_two_step(ctx, config, "F2", "P*", config.omega, config.gamma, 0.0, False, True)
    return _finish(ctx, config, alloc, duals, trace, obj)


def _run_two_step_c(ctx, config):
    xi = config.xi_value
    alloc, duals, trace, obj = _run_two_step(ctx, config, "F3", "R*", config.eta, config.gamma, xi, xi > 0, False)
    return _finish(ctx, config, alloc, duals, trace, obj)


def _run_three_step(ctx, config):
    if config.order == "F3-first":
        (n1, f1, l1), (n2, f2, l2) = ("F3", config.eta, "R*"), ("F2", config.omega, "P**")
    else:
        (n1, f1, l1), (n2, f2, l2) = ("F2", config.omega, "P*"), ("F3", config.eta, "R**")
    trace = StageTrace()
    lp1 = ctx.linear(("max", n1, 0.0), n1)
    _record_lp(trace, l1, lp1, n1)
    floor1 = ctx.floor(n1, f1 * lp1.objective)
    if _full(f1):
        face1 = optimal_face(lp1)
        cert1 = _Cert(lp1, face1, 0, ())
        lp2 = ctx.linear(("second", n1, n2, 1.0), n2, face=face1)
    else:
        cert1 = None
        lp2 = ctx.linear(("second", n1, n2, f1), n2, floors=[floor1])
    _record_lp(trace, l2, lp2, f"{n2} s.t. {n1} >= {f1:g}*{l1}")
    floors = [floor1, ctx.floor(n2, f2 * lp2.objective)]
    chain = [cert1] if cert1 is not None else []
    if _full(f2):
        base = cert1.face if cert1 is not None else None
        chain.append(_Cert(lp2, optimal_face(lp2, base=base), 1, () if cert1 is not None else (0,)))
    alloc, duals, obj = _quadratic(ctx, trace, 1.0, 0.0, False, False, floors, chain)
    _record_floors(trace, floors, [f1, f2], [l1, l2], duals, alloc)
    return _finish(ctx, config, alloc, duals, trace, obj)


_RUNNERS = {
    "baseline": _run_baseline,
    "single": _run_single,
    "two-step-a": _run_two_step_a,
    "two-step-b": _run_two_step_b,
    "two-step-c": _run_two_step_c,
    "three-step": _run_three_step,
}


def run(graph_or_ctx, config: KnobConfig, tol: float = 1e-9) -> RunResult:
    """Run one configuration on a graph (trimmed first) or a shared :class:`Context`."""
    ctx = graph_or_ctx if isinstance(graph_or_ctx, Context) else Context(graph_or_ctx, tol=tol)
    return _RUNNERS[config.mode](ctx, config)


def run_baseline(graph) -> RunResult:
    return run(graph, KnobConfig("baseline"))


def run_single(graph, objective: str, gamma: float | None = None, xi: float | None = None) -> RunResult:
    return run(graph, KnobConfig("single", objective=objective, gamma=gamma, xi=xi))


def run_two_step_a(graph, xi: float, psi: float) -> RunResult:
    return run(graph, KnobConfig("two-step-a", xi=xi, psi=psi))


def run_two_step_b(graph, gamma: float, omega: float) -> RunResult:
    return run(graph, KnobConfig("two-step-b", gamma=gamma, omega=omega))


def run_two_step_c(graph, gamma: float, xi: float, eta: float) -> RunResult:
    return run(graph, KnobConfig("two-step-c", gamma=gamma, xi=xi, eta=eta))


def run_three_step(graph, eta: float, omega: float, order: str = "F3-first") -> RunResult:
    return run(graph, KnobConfig("three-step", eta=eta, omega=omega, order=order))


# ---------------------------------------------------------------------------
# sweeps and frontiers
# ---------------------------------------------------------------------------


def parse_grid(text: str) -> np.ndarray:
    """``a:b:n`` (uniform) or ``a:b:n:log`` (gaps to one log-spaced, ``b < 1``);
    a single number is a one-point grid."""
    parts = text.split(":")
    try:
        if len(parts) == 1:
            return np.array([float(parts[0])])
        if len(parts) not in (3, 4):
            raise ValueError
        a, b, n = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise ValueError(f"grid must be 'a:b:n' or 'a:b:n:log', got {text!r}") from None
    if n < 1:
        raise ValueError("grid needs at least one point")
    if len(parts) == 4:
        if parts[3] != "log":
            raise ValueError(f"unknown grid spacing {parts[3]!r}")
        if not (a < 1 and b < 1):
            raise ValueError("log grids need both ends below 1")
        return 1.0 - np.geomspace(1.0 - a, 1.0 - b, n)
    return np.linspace(a, b, n)


def knob_grid(**axes) -> list:
    """Cartesian product of knob axes in row-major order of the arguments."""
    names = list(axes)
    mesh = np.meshgrid(*[np.asarray(axes[k], dtype=np.float64) for k in names], indexing="ij")
    flat = [m.ravel() for m in mesh]
    return [{k: float(f[p]) for k, f in zip(names, flat)} for p in range(flat[0].size if flat else 0)]


def sweep(graph_or_ctx, base: KnobConfig, grid, threads: int = 1, tol: float = 1e-9) -> list:
    """Run ``base`` at every knob point of ``grid``; results in grid order.

    Stage-1 linear optima are knob-independent and computed once up front;
    grid points then solve independently (threads share only the read-only
    graph and the cache), so parallel and serial output are identical.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty knob grid")
    ctx = graph_or_ctx if isinstance(graph_or_ctx, Context) else Context(graph_or_ctx, tol=tol)
    configs = [replace(base, **pt) for pt in grid]
    if configs:
        # warm the knob-independent cache serially
        _warm(ctx, configs[0])
    if threads <= 1 or len(configs) == 1:
        return [run(ctx, c) for c in configs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda c: run(ctx, c), configs))


def _warm(ctx, config):
    xi = config.xi_value
    first = {
        "two-step-a": ("xiF2+F3", xi),
        "two-step-b": ("F2", 0.0),
        "two-step-c": ("F3", 0.0),
        "three-step": ("F3" if config.order == "F3-first" else "F2", 0.0),
    }.get(config.mode)
    if first is not None:
        ctx.linear(("max", first[0], first[1] if first[0] == "xiF2+F3" else 0.0), first[0], first[1])


def _values(item, objectives):
    if isinstance(item, RunResult):
        row = item.row
        return [getattr(row, o) for o in objectives]
    if isinstance(item, MetricsRow):
        return [getattr(item, o) for o in objectives]
    return [float(v) for v in item]


def extract_frontier(items, objectives=("ngd_click", "gd")):
    """Pareto non-dominated subset (all objectives maximised), stably sorted
    by the first objective.

    ``items`` are :class:`RunResult` or :class:`MetricsRow` objects (values
    taken from ``objectives``) or plain numeric tuples.
    """
    items = list(items)
    if not items:
        return []
    pts = np.array([_values(it, objectives) for it in items], dtype=np.float64)
    keep = pareto_mask(pts)
    idx = [k for k in np.flatnonzero(keep)]
    idx.sort(key=lambda k: pts[k, 0])
    return [items[k] for k in idx]


def require_gamma(result: RunResult) -> float:
    """The recovered representativeness weight, or :class:`UndefinedGammaError`."""
    if result.recovered_gamma is None:
        raise UndefinedGammaError("the monetary floor is slack; no equivalent gamma exists")
    return result.recovered_gamma
