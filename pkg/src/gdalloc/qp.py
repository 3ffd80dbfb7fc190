"""Separable convex quadratic stages solved in the dual.

Every stage has the form

    maximise  gamma*F1(y) + xi*F2(y) + [F3(z)]
    s.t.      supply, demand and non-negativity constraints,
              up to two linear floors  ycoef@y + zcoef@z >= bound (or ==).

With ``z`` eliminated the objective is a separable quadratic in ``y`` and
the Lagrangian minimiser is closed form: on edge (i, j)

    y_ij = max(0, theta_ij + t_ij / q_ij),   q_ij = gamma V_j / theta_ij,
    t_ij = alpha_j - nu_i + sum_k rho_k a_k,ij - c_ij,

where ``nu_i = beta_i - (z-price of i) >= 0``.  The concave dual is
maximised by exact block coordinate ascent (each multiplier solves a
monotone piecewise-linear equation) and polished with projected
semismooth Newton steps.

A stage may also be restricted to a face of the allocation polytope:
edges outside ``edge_mask`` carry no flow and supplies in ``z_fixed`` are
fully allocated (their ``nu`` is then sign-free).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ._jit import njit
from .errors import InfeasibleError, NonConvergenceError, UndefinedGammaError
from .linear import solve_linear_stage
from .model import Allocation, AllocationGraph


# ---------------------------------------------------------------------------
# stage description
# ---------------------------------------------------------------------------


@dataclass
class Floor:
    """Linear row ``ycoef @ y + zcoef @ z >= bound`` (``sense="=="`` for equality)."""

    ycoef: np.ndarray
    zcoef: np.ndarray
    bound: float
    name: str = ""
    sense: str = ">="

    def __post_init__(self):
        if self.sense not in (">=", "=="):
            raise ValueError(f"floor sense must be '>=' or '==', got {self.sense!r}")

    def value(self, allocation: Allocation) -> float:
        return math.fsum(self.ycoef * allocation.y) + math.fsum(self.zcoef * allocation.z)

    def with_sense(self, sense: str) -> "Floor":
        return Floor(self.ycoef, self.zcoef, self.bound, self.name, sense)


def ngd_floor(graph: AllocationGraph, bound: float) -> Floor:
    """``F3 >= bound``."""
    return Floor(np.zeros(graph.num_edges), graph.price.copy(), float(bound), "F3")


def click_floor(graph: AllocationGraph, bound: float) -> Floor:
    """``F2 >= bound``."""
    return Floor(graph.value.copy(), np.zeros(graph.num_supply), float(bound), "F2")


def monetary_floor(graph: AllocationGraph, xi: float, bound: float) -> Floor:
    """``xi*F2 + F3 >= bound``."""
    return Floor(xi * graph.value, graph.price.copy(), float(bound), "xiF2+F3")


@dataclass
class QpStageSpec:
    gamma: float = 1.0
    xi: float = 0.0
    include_f2: bool = True
    include_f3: bool = True
    floors: list = field(default_factory=list)
    edge_mask: np.ndarray | None = None
    z_fixed: np.ndarray | None = None

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0 for the quadratic stage")
        if self.xi < 0:
            raise ValueError("xi must be >= 0")
        if len(self.floors) > 2:
            raise ValueError("at most two floors are supported")


@dataclass
class DualSolution:
    alpha: np.ndarray
    beta: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    rho: list

    def as_dict(self, graph: AllocationGraph, floor_names=()):
        names = list(floor_names) or [f"floor{k}" for k in range(len(self.rho))]
        return {
            "alpha": {c.id: float(a) for c, a in zip(graph.campaigns, self.alpha)},
            "beta": {s.id: float(b) for s, b in zip(graph.supplies, self.beta)},
            "rho": {n: float(r) for n, r in zip(names, self.rho)},
        }


@dataclass
class SolveStats:
    iterations: int
    newton_steps: int
    kkt_residual: float
    wall_time: float
    objective: float = 0.0


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


@njit
def _solve_alpha(off, invq, target):
    """Solve sum(max(0, off + a*invq)) = target for a (increasing in a)."""
    n = off.shape[0]
    bp = np.empty(n)
    for e in range(n):
        bp[e] = -off[e] / invq[e]
    order = np.argsort(bp)
    if target <= 0.0:
        return bp[order[0]]
    s_off = 0.0
    s_inv = 0.0
    for m in range(n):
        e = order[m]
        s_off += off[e]
        s_inv += invq[e]
        a = (target - s_off) / s_inv
        if m == n - 1 or a <= bp[order[m + 1]]:
            return a
    return 0.0


@njit
def _solve_nu(off, invq, cap):
    """Smallest nu >= 0 with sum(max(0, off - nu*invq)) <= cap."""
    n = off.shape[0]
    total = 0.0
    for e in range(n):
        if off[e] > 0.0:
            total += off[e]
    if total <= cap:
        return 0.0
    bp = np.empty(n)
    for e in range(n):
        bp[e] = off[e] / invq[e]
    order = np.argsort(-bp)
    s_off = 0.0
    s_inv = 0.0
    for m in range(n):
        e = order[m]
        if bp[e] <= 0.0:
            break
        s_off += off[e]
        s_inv += invq[e]
        nu = (s_off - cap) / s_inv
        if m == n - 1 or nu >= bp[order[m + 1]]:
            return max(nu, 0.0)
    return max((s_off - cap) / s_inv, 0.0)


@njit
def _pwl_eval(off, slope, coef, x):
    total = 0.0
    for e in range(off.shape[0]):
        v = off[e] + x * slope[e]
        if v > 0.0:
            total += coef[e] * v
    return total


@njit
def _solve_rho(off, slope, coef, target, free):
    """Smallest rho with sum(coef*max(0, off + rho*slope)) >= target.

    The sum is non-decreasing in rho (``coef*slope >= 0``).  ``rho >= 0``
    unless ``free``.  Returns +inf when the target is out of reach and -inf
    when a free rho cannot bring the sum down to the target.
    """
    lo = -np.inf if free else 0.0
    if not free and _pwl_eval(off, slope, coef, 0.0) >= target:
        return 0.0
    n = off.shape[0]
    bp = np.empty(n)
    nb = 0
    for e in range(n):
        if slope[e] != 0.0:
            r = -off[e] / slope[e]
            if r > lo:
                bp[nb] = r
                nb += 1
    bp = np.sort(bp[:nb])
    if nb == 0:
        f0 = _pwl_eval(off, slope, coef, 0.0)
        if free and f0 >= target:
            return 0.0
        return np.inf
    # binary search for the first breakpoint with f >= target
    a, b = 0, nb
    while a < b:
        mid = (a + b) // 2
        if _pwl_eval(off, slope, coef, bp[mid]) >= target:
            b = mid
        else:
            a = mid + 1
    if a == nb:
        # beyond the last breakpoint f is affine
        x0 = bp[nb - 1]
        f0 = _pwl_eval(off, slope, coef, x0)
        rate = _pwl_eval(off, slope, coef, x0 + 1.0) - f0
        if rate <= 0.0:
            return np.inf
        return x0 + (target - f0) / rate
    hi_x = bp[a]
    hi_f = _pwl_eval(off, slope, coef, hi_x)
    if a == 0:
        if not free:
            lo_x = 0.0
            lo_f = _pwl_eval(off, slope, coef, 0.0)
        else:
            # below the first breakpoint f is affine
            rate = hi_f - _pwl_eval(off, slope, coef, hi_x - 1.0)
            if rate <= 0.0:
                return hi_x if hi_f <= target else -np.inf
            return hi_x - (hi_f - target) / rate
    else:
        lo_x = bp[a - 1]
        lo_f = _pwl_eval(off, slope, coef, lo_x)
    if hi_f <= lo_f:
        return hi_x
    return lo_x + (target - lo_f) * (hi_x - lo_x) / (hi_f - lo_f)


@njit
def _floor_shift(A, rho, E):
    out = np.zeros(E)
    for k in range(A.shape[0]):
        if rho[k] != 0.0:
            for e in range(E):
                out[e] += rho[k] * A[k, e]
    return out


@njit
def primal_kernel(theta, q, c, A, esup, ecmp, alpha, nu, rho):
    E = theta.shape[0]
    shift = _floor_shift(A, rho, E)
    y = np.empty(E)
    for e in range(E):
        v = theta[e] + (alpha[ecmp[e]] - nu[esup[e]] + shift[e] - c[e]) / q[e]
        y[e] = v if v > 0.0 else 0.0
    return y


@njit
def sweep_kernel(theta, q, c, A, esup, ecmp, cptr, sorder, sptr, d, s, bfl,
                 nu_free, rho_free, alpha, nu, rho, reverse):
    """One Gauss-Seidel pass over alpha, nu and rho; updates in place.

    Returns False if some floor multiplier became unbounded.
    """
    E = theta.shape[0]
    nc = cptr.shape[0] - 1
    ns = sptr.shape[0] - 1
    K = A.shape[0]
    shift = _floor_shift(A, rho, E)
    buf_off = np.empty(E)
    buf_inv = np.empty(E)
    for jj in range(nc):
        j = nc - 1 - jj if reverse else jj
        a0 = cptr[j]
        a1 = cptr[j + 1]
        if a1 == a0:
            continue
        n = a1 - a0
        for k in range(n):
            e = a0 + k
            buf_inv[k] = 1.0 / q[e]
            buf_off[k] = theta[e] + (-nu[esup[e]] + shift[e] - c[e]) * buf_inv[k]
        alpha[j] = _solve_alpha(buf_off[:n], buf_inv[:n], d[j])
    for ii in range(ns):
        i = ns - 1 - ii if reverse else ii
        a0 = sptr[i]
        a1 = sptr[i + 1]
        if a1 == a0:
            if not nu_free[i]:
                nu[i] = 0.0
            continue
        n = a1 - a0
        for k in range(n):
            e = sorder[a0 + k]
            buf_inv[k] = 1.0 / q[e]
            buf_off[k] = theta[e] + (alpha[ecmp[e]] + shift[e] - c[e]) * buf_inv[k]
        if nu_free[i]:
            nu[i] = -_solve_alpha(buf_off[:n], buf_inv[:n], s[i])
        else:
            nu[i] = _solve_nu(buf_off[:n], buf_inv[:n], s[i])
    ok = True
    if K > 0:
        slope = np.empty(E)
        for k in range(K):
            shift = _floor_shift(A, rho, E)
            for e in range(E):
                base = alpha[ecmp[e]] - nu[esup[e]] + shift[e] - rho[k] * A[k, e] - c[e]
                buf_off[e] = theta[e] + base / q[e]
                slope[e] = A[k, e] / q[e]
            r = _solve_rho(buf_off, slope, A[k], bfl[k], rho_free[k])
            if r == np.inf:
                ok = False
                r = rho[k] + abs(rho[k]) + 1.0
            elif r == -np.inf:
                ok = False
                r = rho[k] - abs(rho[k]) - 1.0
            rho[k] = r
    return ok


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------


class _Stage:
    """Flattened arrays for one quadratic stage over the live edges."""

    def __init__(self, graph: AllocationGraph, spec: QpStageSpec):
        self.graph = graph
        self.spec = spec
        ns, nc = graph.num_supply, graph.num_campaigns
        theta_all = graph.theta
        live = theta_all > 0
        if spec.edge_mask is not None:
            live &= np.asarray(spec.edge_mask, dtype=bool)
        self.live = np.flatnonzero(live)
        self.esup = np.ascontiguousarray(graph.edge_supply[live])
        self.ecmp = np.ascontiguousarray(graph.edge_campaign[live])
        self.theta = np.ascontiguousarray(theta_all[live])
        self.q = spec.gamma * graph.priority[self.ecmp] / self.theta
        self.zobj = graph.price.copy() if spec.include_f3 else np.zeros(ns)
        w = graph.value[live] if spec.include_f2 else np.zeros(len(self.live))
        self.c = np.ascontiguousarray(self.zobj[self.esup] - spec.xi * w)
        self.nu_free = (
            np.zeros(ns, dtype=np.bool_) if spec.z_fixed is None else np.asarray(spec.z_fixed, dtype=np.bool_).copy()
        )
        K = len(spec.floors)
        self.rho_free = np.array([f.sense == "==" for f in spec.floors], dtype=np.bool_)
        self.A = np.zeros((K, len(self.live)))
        self.bfl = np.zeros(K)
        self.zfl = np.zeros((K, ns))
        s = graph.supply_weight
        for k, fl in enumerate(spec.floors):
            yc = np.asarray(fl.ycoef, dtype=np.float64)
            zc = np.asarray(fl.zcoef, dtype=np.float64)
            # z_i = s_i - sum_j y_ij (or 0 when z is fixed)
            zlive = np.where(self.nu_free, 0.0, zc)
            self.A[k] = yc[live] - zlive[self.esup]
            self.bfl[k] = fl.bound - math.fsum(zlive * s)
            self.zfl[k] = zc
        self.zlin = self.zfl.copy()
        self.zlin[:, self.nu_free] = 0.0
        # CSR over live edges
        counts = np.bincount(self.ecmp, minlength=nc)
        self.cptr = np.zeros(nc + 1, dtype=np.int64)
        np.cumsum(counts, out=self.cptr[1:])
        self.sorder = np.argsort(self.esup, kind="stable").astype(np.int64)
        counts = np.bincount(self.esup, minlength=ns)
        self.sptr = np.zeros(ns + 1, dtype=np.int64)
        np.cumsum(counts, out=self.sptr[1:])
        self.d = graph.demand.copy()
        self.s = graph.supply_weight.copy()
        starved = (self.d > 0) & (np.diff(self.cptr) == 0)
        if np.any(starved):
            j = int(np.flatnonzero(starved)[0])
            raise InfeasibleError(
                f"campaign {graph.campaigns[j].id} has demand but no eligible supply; run make_feasible first",
                where=graph.campaigns[j].id,
            )
        stuck = self.nu_free & (self.s > 0) & (counts == 0)
        if np.any(stuck):
            i = int(np.flatnonzero(stuck)[0])
            raise InfeasibleError(f"supply {graph.supplies[i].id} must be allocated but has no edges",
                                  where=graph.supplies[i].id)
        self.scale = max(1.0, float(self.s.max(initial=0.0)))

    def primal(self, alpha, nu, rho):
        return primal_kernel(self.theta, self.q, self.c, self.A, self.esup, self.ecmp, alpha, nu, rho)

    def sweep(self, alpha, nu, rho, reverse):
        return sweep_kernel(
            self.theta, self.q, self.c, self.A, self.esup, self.ecmp, self.cptr, self.sorder, self.sptr,
            self.d, self.s, self.bfl, self.nu_free, self.rho_free, alpha, nu, rho, reverse,
        )

    def gradients(self, y):
        ga = self.d - np.bincount(self.ecmp, weights=y, minlength=len(self.d))
        gn = np.bincount(self.esup, weights=y, minlength=len(self.s)) - self.s
        gr = self.bfl - self.A @ y
        return ga, gn, gr

    def dual_value(self, alpha, nu, rho):
        t = alpha[self.ecmp] - nu[self.esup] + rho @ self.A - self.c
        pos = self.theta + t / self.q > 0
        phi = np.where(pos, -t * self.theta - t * t / (2 * self.q), 0.5 * self.q * self.theta**2)
        return float(phi.sum() + alpha @ self.d - nu @ self.s + rho @ self.bfl)

    def floor_scale(self):
        return 1.0 + np.abs(self.bfl) + np.abs(self.A) @ self.theta

    def set_tolerances(self, tol):
        self.ptol = tol * self.scale
        dsc = 1.0 + float(np.abs(self.c).max(initial=0.0)) + float((self.q * self.theta).max(initial=0.0))
        self.dtol = tol * dsc
        if len(self.bfl):
            self.ftol = tol * self.floor_scale()
            self.rtol = self.dtol / np.maximum(np.abs(self.A).max(axis=1, initial=0.0), 1e-300)

    def merit(self, y, nu, rho):
        """Largest residual in tolerance units; complementarity in min-form."""
        ga, gn, gr = self.gradients(y)
        worst = float(np.abs(ga).max(initial=0.0)) / self.ptol
        viol = np.where(self.nu_free, np.abs(gn), np.maximum(gn, 0.0))
        worst = max(worst, float(viol.max(initial=0.0)) / self.ptol)
        cs = np.where(self.nu_free, 0.0, np.minimum(np.maximum(-gn, 0.0) / self.ptol, nu / self.dtol))
        worst = max(worst, float(cs.max(initial=0.0)))
        if len(rho):
            viol = np.where(self.rho_free, np.abs(gr), np.maximum(gr, 0.0))
            worst = max(worst, float((viol / self.ftol).max()))
            cs = np.where(self.rho_free, 0.0, np.minimum(np.maximum(-gr, 0.0) / self.ftol, rho / self.rtol))
            worst = max(worst, float(cs.max()))
        return worst


def _newton_step(st: _Stage, alpha, nu, rho, y):
    """One projected semismooth Newton step on the dual; True if accepted."""
    nc, ns, K = len(alpha), len(nu), len(rho)
    t = alpha[st.ecmp] - nu[st.esup] + rho @ st.A - st.c
    act = st.theta + t / st.q > 0
    ga, gn, gr = st.gradients(y)
    has_edge = np.bincount(st.ecmp[act], minlength=nc) > 0
    free_a = has_edge & (st.d > 0)
    free_n = st.nu_free | (nu > 0) | (gn > 0)
    free_r = st.rho_free | (rho > 0) | (gr > 0)
    pos_a = np.full(nc, -1)
    pos_a[free_a] = np.arange(int(free_a.sum()))
    off = int(free_a.sum())
    pos_n = np.full(ns, -1)
    pos_n[free_n] = off + np.arange(int(free_n.sum()))
    off += int(free_n.sum())
    pos_r = np.full(K, -1)
    pos_r[free_r] = off + np.arange(int(free_r.sum()))
    nfree = off + int(free_r.sum())
    if nfree == 0:
        return False
    ea = np.flatnonzero(act)
    rows, cols, vals = [], [], []
    ra = pos_a[st.ecmp[ea]]
    keep = ra >= 0
    rows.append(ra[keep]); cols.append(np.flatnonzero(keep)); vals.append(np.ones(int(keep.sum())))
    rn = pos_n[st.esup[ea]]
    keep = rn >= 0
    rows.append(rn[keep]); cols.append(np.flatnonzero(keep)); vals.append(-np.ones(int(keep.sum())))
    for k in range(K):
        if pos_r[k] >= 0:
            coef = st.A[k, ea]
            nz = np.flatnonzero(coef)
            rows.append(np.full(len(nz), pos_r[k])); cols.append(nz); vals.append(coef[nz])
    B = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nfree, len(ea))
    )
    M = (B @ sp.diags(1.0 / st.q[ea]) @ B.T).tocsc()
    diag = M.diagonal()
    dmax = max(1.0, float(diag.max(initial=0.0)))
    fill = sp.diags(np.where(diag > 0, 0.0, 1.0))
    g = np.zeros(nfree)
    g[pos_a[free_a]] = ga[free_a]
    g[pos_n[free_n]] = gn[free_n]
    g[pos_r[free_r]] = gr[free_r]
    proj_n = ~st.nu_free[free_n]
    proj_r = ~st.rho_free[free_r]
    base_val = st.dual_value(alpha, nu, rho)
    base_res = st.merit(y, nu, rho)
    # the reduced Hessian is singular along shifts that leave t unchanged;
    # retry with heavier Levenberg-Marquardt damping until a step is accepted
    for reg in (1e-12, 1e-8, 1e-5, 1e-3, 1e-1):
        try:
            step = spla.spsolve((M + fill + sp.identity(nfree) * (reg * dmax)).tocsc(), g)
        except RuntimeError:
            continue
        if not np.all(np.isfinite(step)):
            continue
        slope = float(g @ step)
        lr = 1.0
        for _ in range(8):
            a2 = alpha.copy(); n2 = nu.copy(); r2 = rho.copy()
            a2[free_a] += lr * step[pos_a[free_a]]
            vn = n2[free_n] + lr * step[pos_n[free_n]]
            n2[free_n] = np.where(proj_n, np.maximum(vn, 0.0), vn)
            vr = r2[free_r] + lr * step[pos_r[free_r]]
            r2[free_r] = np.where(proj_r, np.maximum(vr, 0.0), vr)
            y2 = st.primal(a2, n2, r2)
            val = st.dual_value(a2, n2, r2)
            res = st.merit(y2, n2, r2)
            # a merit decrease only counts if the dual value held up to round-off;
            # otherwise the next sweep undoes the step and the loop cycles
            held = val >= base_val - 1e-10 * (1.0 + abs(base_val))
            if val >= base_val + 1e-4 * lr * slope or (held and res < 0.5 * base_res):
                alpha[:] = a2; nu[:] = n2; rho[:] = r2
                return True
            lr *= 0.5
    return False


def _assemble(st: _Stage, alpha, nu, rho, y_live):
    g = st.graph
    y = np.zeros(g.num_edges)
    y[st.live] = y_live
    used = np.bincount(g.edge_supply, weights=y, minlength=g.num_supply)
    z = np.maximum(g.supply_weight - used, 0.0)
    # a priced supply with round-off slack is exhausted
    z[(nu > 0) & (z <= 10.0 * st.ptol)] = 0.0
    z[st.nu_free] = 0.0
    # fixed supplies have no z, so floors do not price them through z
    zprice = st.zobj + (rho @ st.zlin if len(rho) else 0.0)
    beta = nu + zprice
    duals = DualSolution(alpha.copy(), beta, None, None, list(map(float, rho)))
    _fill_slacks(g, y, duals, st.spec)
    return Allocation(y, z), duals


def _stationarity(graph, y, duals, gamma, xi, include_f3, include_f2, floors):
    """(g_y, g_z): min-form gradients of the Lagrangian in y and z."""
    theta = graph.theta
    j, i = graph.edge_campaign, graph.edge_supply
    live = theta > 0
    rho = np.asarray(duals.rho, dtype=np.float64)
    ylin = xi * graph.value if include_f2 else np.zeros(graph.num_edges)
    zprice = graph.price.copy() if include_f3 else np.zeros(graph.num_supply)
    for r, fl in zip(rho, floors):
        ylin = ylin + r * np.asarray(fl.ycoef)
        zprice = zprice + r * np.asarray(fl.zcoef)
    grad = np.zeros(graph.num_edges)
    grad[live] = gamma * graph.priority[j[live]] / theta[live] * (y[live] - theta[live])
    gy = grad - ylin - duals.alpha[j] + duals.beta[i]
    gz = duals.beta - zprice
    return gy, gz


def _fill_slacks(graph, y, duals, spec):
    gy, gz = _stationarity(graph, y, duals, spec.gamma, spec.xi, spec.include_f3, spec.include_f2, spec.floors)
    duals.lam = np.where(y > 0, 0.0, gy)
    duals.mu = gz


def solve_stage(
    graph: AllocationGraph,
    spec: QpStageSpec,
    tol: float = 1e-10,
    max_iter: int = 10_000,
    reverse: bool = False,
    floor_slack: float = 0.0,
    check_floors: bool = True,
):
    """Solve one quadratic stage; returns (Allocation, DualSolution, SolveStats).

    ``tol`` is relative to the largest supply weight for primal residuals,
    to the floor magnitude for floor residuals, and to the largest
    objective coefficient for complementarity.  ``floor_slack`` optionally
    relaxes every ``>=`` floor by that fraction of its magnitude.  With
    ``check_floors`` an LP feasibility check runs first, so unattainable
    floors raise :class:`InfeasibleError` instead of driving the dual to
    infinity.
    """
    t0 = time.perf_counter()
    st = _Stage(graph, spec)
    K = len(spec.floors)
    if check_floors:
        try:
            solve_linear_stage(graph, edge_mask=spec.edge_mask, z_fixed=spec.z_fixed)
        except InfeasibleError as exc:
            raise InfeasibleError(
                "supply cannot meet the demands; trim them with make_feasible first", where=exc.where
            ) from exc
    if K:
        if floor_slack:
            st.bfl = st.bfl - np.where(st.rho_free, 0.0, floor_slack * st.floor_scale())
        if check_floors:
            shift = (fl.bound - (st.bfl[k] + math.fsum(st.zlin[k] * st.s)) for k, fl in enumerate(spec.floors))
            relaxed = [Floor(f.ycoef, f.zcoef, f.bound - dk, f.name, f.sense) for f, dk in zip(spec.floors, shift)]
            solve_linear_stage(graph, floors=relaxed, edge_mask=spec.edge_mask, z_fixed=spec.z_fixed)
    nc, ns = graph.num_campaigns, graph.num_supply
    alpha = np.zeros(nc)
    nu = np.zeros(ns)
    rho = np.zeros(K)
    st.set_tolerances(tol)
    newton = 0
    it = 0
    unbounded = 0
    res = None
    for it in range(1, max_iter + 1):
        ok = st.sweep(alpha, nu, rho, reverse)
        unbounded = 0 if ok else unbounded + 1
        if unbounded > 60:
            raise InfeasibleError("floors cannot be met together with supply and demand constraints",
                                  where=[f.name for f in spec.floors])
        y = st.primal(alpha, nu, rho)
        res = _converged(st, y, nu, rho)
        if res is None:
            break
        if _diverged(st, alpha, nu, rho):
            raise InfeasibleError("dual ascent diverged: supply cannot meet the demands; "
                                  "trim them with make_feasible first",
                                  where=[f.name for f in spec.floors] or None)
        if it >= 2:
            for _ in range(20):
                if not _newton_step(st, alpha, nu, rho, y):
                    break
                newton += 1
                y = st.primal(alpha, nu, rho)
                res = _converged(st, y, nu, rho)
                if res is None:
                    break
            if res is None:
                break
    else:
        raise NonConvergenceError(
            f"dual ascent did not converge in {max_iter} iterations (residual {res:.3e})",
            residual=res, iterations=max_iter,
        )
    y = st.primal(alpha, nu, rho)
    alloc, duals = _assemble(st, alpha, nu, rho, y)
    stats = SolveStats(it, newton, st.merit(y, nu, rho) * tol, time.perf_counter() - t0, stage_objective(graph, spec, alloc))
    return alloc, duals, stats


def stage_objective(graph: AllocationGraph, spec: QpStageSpec, allocation: Allocation) -> float:
    """``gamma*F1 + xi*F2 (if included) + F3 (if included)`` by plain dot products."""
    live = graph.theta > 0
    th = graph.theta[live]
    dev = allocation.y[live] - th
    f1 = -float(np.dot(graph.priority[graph.edge_campaign[live]] / (2.0 * th), dev * dev))
    val = spec.gamma * f1
    if spec.include_f2:
        val += spec.xi * float(np.dot(graph.value, allocation.y))
    if spec.include_f3:
        val += float(np.dot(graph.price, allocation.z))
    return val


def _diverged(st, alpha, nu, rho) -> bool:
    # any KKT point has |alpha|, |nu| <= q*s + |c| + rho*|A| per edge; far
    # beyond that bound the dual is running off to infinity
    if not len(st.q):
        return False
    scale = float(np.max(st.q * st.s[st.esup])) + float(np.abs(st.c).max())
    if len(rho):
        scale += float(np.abs(rho).max()) * float(np.abs(st.A).max(initial=0.0))
    peak = max(float(np.abs(alpha).max(initial=0.0)), float(np.abs(nu).max(initial=0.0)))
    return peak > 1e9 * (1.0 + scale)


def _converged(st, y, nu, rho):
    """None when converged, else the largest scaled residual."""
    worst = st.merit(y, nu, rho)
    return None if worst <= 1.0 else worst


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def solve_weighted(graph: AllocationGraph, gamma: float, xi: float = 0.0, tol: float = 1e-10, **kw):
    """Maximise ``gamma*F1 + xi*F2 + F3`` on a feasible graph."""
    return solve_stage(graph, QpStageSpec(gamma=gamma, xi=xi), tol=tol, **kw)


def solve_f1_with_floors(graph: AllocationGraph, floors, tol: float = 1e-10, **kw):
    """Maximise ``F1`` subject to monetary floors; ``duals.rho`` per floor."""
    spec = QpStageSpec(gamma=1.0, xi=0.0, include_f2=False, include_f3=False, floors=list(floors))
    return solve_stage(graph, spec, tol=tol, **kw)


def primal_from_duals(graph: AllocationGraph, gamma: float, xi: float, alpha, beta) -> np.ndarray:
    """Stationary point of the weighted Lagrangian in ``y``.

    ``y_ij = max(0, theta_ij (1 + (xi w_ij + alpha_j - beta_i) / (gamma V_j)))``;
    edges with zero target get zero.
    """
    theta = graph.theta
    j, i = graph.edge_campaign, graph.edge_supply
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    y = theta * (1.0 + (xi * graph.value + alpha[j] - beta[i]) / (gamma * graph.priority[j]))
    return np.where(theta > 0, np.maximum(y, 0.0), 0.0)


@dataclass
class KktReport:
    stationarity_y: float
    stationarity_z: float
    complementarity: float
    primal: float
    floor_violation: float = 0.0

    @property
    def stationarity(self) -> float:
        return max(self.stationarity_y, self.stationarity_z)

    def as_dict(self):
        return {
            "stationarity_y": self.stationarity_y,
            "stationarity_z": self.stationarity_z,
            "complementarity": self.complementarity,
            "primal": self.primal,
            "floor_violation": self.floor_violation,
        }


def kkt_residuals(
    graph: AllocationGraph,
    allocation: Allocation,
    duals: DualSolution,
    gamma: float,
    xi: float,
    include_f3: bool = True,
    include_f2: bool = True,
    floors=(),
    zero_tol: float = 0.0,
) -> KktReport:
    """Recompute the KKT system of a quadratic stage from scratch.

    Stationarity in ``y`` for the minimisation form is
    ``gamma V/theta (y - theta) - xi w - sum rho*ycoef - alpha + beta = lambda``
    with ``lambda >= 0`` and ``lambda*y = 0``; in ``z`` it is
    ``beta - zprice = mu >= 0`` with ``mu*z = 0`` where ``zprice`` is ``r``
    (if F3 is in the objective) plus ``sum rho*zcoef``.

    A variable above ``zero_tol`` is positive and must have a zero
    gradient (reported as stationarity); the others must have a
    non-negative gradient and contribute ``gradient*value`` to the
    complementarity residual.  Floors are ``>=`` rows: ``rho >= 0`` and
    ``rho*slack`` with slack below ``zero_tol*(1+|bound|)`` counted as zero.
    """
    y, z = allocation.y, allocation.z
    live = graph.theta > 0
    gy, gz = _stationarity(graph, y, duals, gamma, xi, include_f3, include_f2, floors)
    pos = y > zero_tol
    st_y = np.where(pos, np.abs(gy), np.maximum(-gy, 0.0))
    st_y = np.where(live, st_y, 0.0)
    zpos = z > zero_tol
    st_z = np.where(zpos, np.abs(gz), np.maximum(-gz, 0.0))
    comp = max(
        float((np.maximum(gy, 0.0) * np.maximum(y, 0.0))[live & ~pos].max(initial=0.0)),
        float((np.maximum(gz, 0.0) * np.maximum(z, 0.0))[~zpos].max(initial=0.0)),
    )
    primal = 0.0
    if graph.num_edges or graph.num_supply:
        i, j = graph.edge_supply, graph.edge_campaign
        used = np.bincount(i, weights=y, minlength=graph.num_supply)
        got = np.bincount(j, weights=y, minlength=graph.num_campaigns)
        primal = max(
            float(np.abs(used + z - graph.supply_weight).max(initial=0.0)),
            float(np.abs(got - graph.demand).max(initial=0.0)),
            float(np.maximum(-y, 0.0).max(initial=0.0)),
            float(np.maximum(-z, 0.0).max(initial=0.0)),
        )
    fviol = 0.0
    for r, fl in zip(duals.rho, floors):
        slack = fl.value(allocation) - fl.bound
        fviol = max(fviol, -slack, 0.0)
        slack = max(slack - zero_tol * (1.0 + abs(fl.bound)), 0.0)
        comp = max(comp, max(-r, 0.0), r * slack)
    return KktReport(
        stationarity_y=float(st_y.max(initial=0.0)),
        stationarity_z=float(st_z.max(initial=0.0)),
        complementarity=comp,
        primal=primal,
        floor_violation=fviol,
    )


def recover_gamma(rho: float) -> float:
    """Representativeness weight equivalent to a binding floor: ``1/rho``."""
    if not rho > 0:
        raise UndefinedGammaError("floor multiplier is zero; the floor is slack and gamma is undefined")
    return 1.0 / rho
