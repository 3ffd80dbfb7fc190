"""Exact min-cost network flow, optionally with one or two side constraints.

The pure problem is solved by a primal network simplex (default) or by
primal-dual successive shortest paths with node potentials; the two are
independent routes to the same optimum.  Side-constrained problems are
solved through the Lagrangian of the side rows: for one row, a breakpoint
(chord) search over the scalar multiplier with the optimal primal recovered
as a convex combination of the two flows meeting at the optimal breakpoint;
for two rows, Dantzig-Wolfe column generation whose 3-row master is solved
by basis enumeration.  Either way every pricing step is a pure flow solve.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from ._jit import njit
from .errors import InfeasibleError, GdallocError

OPTIMAL = 0
INFEASIBLE = 2
UNBOUNDED = 3


@dataclass
class FlowProblem:
    """Min-cost flow: ``min cost @ flow`` s.t. out-flow minus in-flow = ``supply``.

    ``capacity`` may hold ``inf``.  With ``maximize=True`` the costs are
    treated as profits; flows and potentials always refer to the equivalent
    minimisation with negated costs.
    """

    supply: np.ndarray
    tail: np.ndarray
    head: np.ndarray
    cost: np.ndarray
    capacity: np.ndarray
    maximize: bool = False
    node_names: list | None = None

    def __post_init__(self):
        self.supply = np.asarray(self.supply, dtype=np.float64)
        self.tail = np.asarray(self.tail, dtype=np.int64)
        self.head = np.asarray(self.head, dtype=np.int64)
        self.cost = np.asarray(self.cost, dtype=np.float64)
        self.capacity = np.asarray(self.capacity, dtype=np.float64)
        m = len(self.tail)
        if not (len(self.head) == len(self.cost) == len(self.capacity) == m):
            raise ValueError("arc arrays differ in length")
        if m and (self.tail.min() < 0 or self.head.max() >= self.num_nodes or self.head.min() < 0
                  or self.tail.max() >= self.num_nodes):
            raise ValueError("arc endpoint out of range")
        if not np.all(np.isfinite(self.cost)):
            raise ValueError("arc costs must be finite")
        if np.any(self.capacity < 0):
            raise ValueError("arc capacities must be non-negative")

    @property
    def num_nodes(self) -> int:
        return len(self.supply)

    @property
    def num_arcs(self) -> int:
        return len(self.tail)

    @property
    def min_cost(self) -> np.ndarray:
        return -self.cost if self.maximize else self.cost

    def to_text(self) -> str:
        """Plain-text arc list, one ``tail head cost capacity`` per line."""
        names = self.node_names or [str(v) for v in range(self.num_nodes)]
        lines = [f"# nodes {self.num_nodes} arcs {self.num_arcs} sense {'max' if self.maximize else 'min'}"]
        for v, b in enumerate(self.supply):
            if b != 0:
                lines.append(f"n {names[v]} {b!r}")
        for t, h, c, u in zip(self.tail, self.head, self.cost, self.capacity):
            lines.append(f"a {names[t]} {names[h]} {c!r} {u!r}")
        return "\n".join(lines) + "\n"


@dataclass
class SideConstraint:
    """``coef @ flow (>= | <=) bound``; ``multiplier`` is filled by the solver."""

    coef: np.ndarray
    bound: float
    sense: str = ">="
    name: str = ""
    multiplier: float = 0.0

    def __post_init__(self):
        self.coef = np.asarray(self.coef, dtype=np.float64)
        if self.sense not in (">=", "<="):
            raise ValueError(f"sense must be '>=' or '<=', got {self.sense!r}")
        if not np.all(np.isfinite(self.coef)):
            raise ValueError("side constraint coefficients must be finite")

    def normalized(self):
        """(coef, bound) of the equivalent ``>=`` row."""
        if self.sense == ">=":
            return self.coef, float(self.bound)
        return -self.coef, -float(self.bound)


@dataclass
class FlowSolution:
    flow: np.ndarray
    potential: np.ndarray
    objective: float
    optimality_gap: float
    status: int = OPTIMAL
    multipliers: list = field(default_factory=list)
    pricing_solves: int = 1

    def reduced_costs(self, problem: FlowProblem) -> np.ndarray:
        c = problem.min_cost.copy()
        for m in self.multipliers_with_coef:
            c = c - m[0] * m[1]
        return c + self.potential[problem.tail] - self.potential[problem.head]

    multipliers_with_coef: list = field(default_factory=list, repr=False)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


@njit
def _heap_push(hk, hv, size, key, val):
    i = size
    hk[i] = key
    hv[i] = val
    while i > 0:
        p = (i - 1) >> 1
        if hk[p] > hk[i] or (hk[p] == hk[i] and hv[p] > hv[i]):
            hk[p], hk[i] = hk[i], hk[p]
            hv[p], hv[i] = hv[i], hv[p]
            i = p
        else:
            break
    return size + 1


@njit
def _heap_pop(hk, hv, size):
    key = hk[0]
    val = hv[0]
    size -= 1
    hk[0] = hk[size]
    hv[0] = hv[size]
    i = 0
    while True:
        l = 2 * i + 1
        if l >= size:
            break
        c = l
        r = l + 1
        if r < size and (hk[r] < hk[l] or (hk[r] == hk[l] and hv[r] < hv[l])):
            c = r
        if hk[c] < hk[i] or (hk[c] == hk[i] and hv[c] < hv[i]):
            hk[c], hk[i] = hk[i], hk[c]
            hv[c], hv[i] = hv[i], hv[c]
            i = c
        else:
            break
    return key, val, size


@njit
def ssp_kernel(n, tail, head, cost, cap, supply, eps):
    """Primal-dual successive shortest paths.  Returns (flow, potential, status, node).

    Each Dijkstra phase updates the potentials, then every augmenting path
    of zero reduced cost is saturated by blocking flows before the next phase.

    ``status`` is 0 (optimal), 2 (infeasible: ``node`` has unmet excess or
    deficit) or 3 (negative cycle of unbounded capacity).
    """
    m = tail.shape[0]
    # residual arcs: 2k forward, 2k+1 backward
    rfrom = np.empty(2 * m, np.int64)
    rto = np.empty(2 * m, np.int64)
    rcost = np.empty(2 * m, np.float64)
    rcap = np.empty(2 * m, np.float64)
    excess = supply.copy()
    for k in range(m):
        rfrom[2 * k] = tail[k]
        rto[2 * k] = head[k]
        rcost[2 * k] = cost[k]
        rfrom[2 * k + 1] = head[k]
        rto[2 * k + 1] = tail[k]
        rcost[2 * k + 1] = -cost[k]
        if cost[k] < 0.0 and cap[k] < np.inf:
            rcap[2 * k] = 0.0
            rcap[2 * k + 1] = cap[k]
            excess[tail[k]] -= cap[k]
            excess[head[k]] += cap[k]
        else:
            rcap[2 * k] = cap[k]
            rcap[2 * k + 1] = 0.0
    # CSR by origin
    deg = np.zeros(n + 1, np.int64)
    for a in range(2 * m):
        deg[rfrom[a] + 1] += 1
    for v in range(n):
        deg[v + 1] += deg[v]
    adj = np.empty(2 * m, np.int64)
    fill = deg[:n].copy()
    for a in range(2 * m):
        v = rfrom[a]
        adj[fill[v]] = a
        fill[v] += 1

    # Bellman-Ford (queue based) from a virtual root for initial potentials;
    # negative cycles of finite capacity are cancelled first
    pi = np.zeros(n, np.float64)
    inq = np.ones(n, np.bool_)
    count = np.zeros(n, np.int64)
    queue = np.empty(n + 1, np.int64)
    bpred = np.full(n, -1, np.int64)
    mark = np.full(n, -1, np.int64)
    restart = True
    rounds = 0
    while restart:
        restart = False
        rounds += 1
        if rounds > 10 * (m + 1):
            return rcap[1::2].copy(), pi, 3, 0
        for v in range(n):
            pi[v] = 0.0
            inq[v] = True
            count[v] = 0
            bpred[v] = -1
            queue[v] = v
        qh = 0
        qt = n
        qlen = n
        while qlen > 0 and not restart:
            u = queue[qh]
            qh = (qh + 1) % (n + 1)
            qlen -= 1
            inq[u] = False
            for p in range(deg[u], deg[u + 1]):
                a = adj[p]
                if rcap[a] <= eps:
                    continue
                v = rto[a]
                nd = pi[u] + rcost[a]
                if nd < pi[v] - 1e-12 * (1.0 + abs(pi[v])):
                    pi[v] = nd
                    bpred[v] = a
                    if not inq[v]:
                        count[v] += 1
                        if count[v] > n:
                            # walk predecessors onto the cycle and cancel it
                            for k in range(n):
                                mark[k] = -1
                            x = v
                            step = 0
                            while mark[x] < 0 and bpred[x] >= 0:
                                mark[x] = step
                                step += 1
                                x = rfrom[bpred[x]]
                            if bpred[x] < 0:
                                return rcap[1::2].copy(), pi, 3, v
                            start = x
                            delta = np.inf
                            y = start
                            while True:
                                a2 = bpred[y]
                                if rcap[a2] < delta:
                                    delta = rcap[a2]
                                y = rfrom[a2]
                                if y == start:
                                    break
                            if delta == np.inf:
                                return rcap[1::2].copy(), pi, 3, start
                            y = start
                            while True:
                                a2 = bpred[y]
                                rcap[a2] -= delta
                                rcap[a2 ^ 1] += delta
                                y = rfrom[a2]
                                if y == start:
                                    break
                            restart = True
                            break
                        inq[v] = True
                        queue[qt] = v
                        qt = (qt + 1) % (n + 1)
                        qlen += 1

    dist = np.empty(n, np.float64)
    pred = np.empty(n, np.int64)
    done = np.zeros(n, np.bool_)
    hk = np.empty(2 * m + n + 1, np.float64)
    hv = np.empty(2 * m + n + 1, np.int64)
    settled = np.empty(n, np.int64)
    level = np.empty(n, np.int64)
    it = np.empty(n, np.int64)
    stack = np.empty(n, np.int64)
    cmax = 0.0
    for k in range(m):
        if abs(cost[k]) > cmax:
            cmax = abs(cost[k])
    rtol = 1e-12 * (1.0 + cmax)
    while True:
        any_excess = False
        for v in range(n):
            if excess[v] > eps:
                any_excess = True
                break
        if not any_excess:
            break
        size = 0
        for v in range(n):
            dist[v] = np.inf
            pred[v] = -1
            done[v] = False
            if excess[v] > eps:
                dist[v] = 0.0
                size = _heap_push(hk, hv, size, 0.0, v)
        target = -1
        nsettled = 0
        while size > 0:
            d, u, size = _heap_pop(hk, hv, size)
            if done[u] or d > dist[u]:
                continue
            done[u] = True
            settled[nsettled] = u
            nsettled += 1
            if excess[u] < -eps:
                target = u
                break
            for p in range(deg[u], deg[u + 1]):
                a = adj[p]
                if rcap[a] <= eps:
                    continue
                v = rto[a]
                if done[v]:
                    continue
                rc = rcost[a] + pi[u] - pi[v]
                if rc < 0.0:
                    rc = 0.0
                nd = d + rc
                if nd < dist[v]:
                    dist[v] = nd
                    pred[v] = a
                    size = _heap_push(hk, hv, size, nd, v)
        if target < 0:
            # no deficit reachable from the remaining excess
            for v in range(n):
                if excess[v] > eps:
                    return rcap[1::2].copy(), pi, 2, v
        dt = dist[target]
        for k in range(nsettled):
            v = settled[k]
            pi[v] += dist[v] - dt
        # push a blocking flow through the zero reduced-cost subgraph
        _blocking_flows(n, rfrom, rto, rcost, rcap, deg, adj, pi, excess, eps, rtol, level, it, queue, stack)
    for v in range(n):
        if excess[v] < -eps:
            return rcap[1::2].copy(), pi, 2, v
    return rcap[1::2].copy(), pi, 0, -1


@njit
def _blocking_flows(n, rfrom, rto, rcost, rcap, deg, adj, pi, excess, eps, rtol, level, it, queue, stack):
    """Dinic phases from all excess nodes to all deficit nodes using only
    residual arcs whose reduced cost is (numerically) zero."""
    while True:
        qh = 0
        qt = 0
        for v in range(n):
            if excess[v] > eps:
                level[v] = 0
                queue[qt] = v
                qt += 1
            else:
                level[v] = -1
        reached = False
        while qh < qt:
            u = queue[qh]
            qh += 1
            for p in range(deg[u], deg[u + 1]):
                a = adj[p]
                v = rto[a]
                if level[v] >= 0 or rcap[a] <= eps:
                    continue
                if rcost[a] + pi[u] - pi[v] > rtol:
                    continue
                level[v] = level[u] + 1
                if excess[v] < -eps:
                    reached = True
                queue[qt] = v
                qt += 1
        if not reached:
            return
        for v in range(n):
            it[v] = deg[v]
        for k in range(qt):
            s = queue[k]
            if level[s] != 0:
                break
            while excess[s] > eps:
                depth = 0
                v = s
                found = False
                while True:
                    if v != s and excess[v] < -eps:
                        found = True
                        break
                    advanced = False
                    while it[v] < deg[v + 1]:
                        a = adj[it[v]]
                        w = rto[a]
                        if (level[w] == level[v] + 1 and rcap[a] > eps
                                and rcost[a] + pi[v] - pi[w] <= rtol):
                            stack[depth] = a
                            depth += 1
                            v = w
                            advanced = True
                            break
                        it[v] += 1
                    if advanced:
                        continue
                    if v == s:
                        break
                    level[v] = -1
                    depth -= 1
                    v = rfrom[stack[depth]]
                    it[v] += 1
                if not found:
                    break
                delta = min(excess[s], -excess[v])
                for d in range(depth):
                    if rcap[stack[d]] < delta:
                        delta = rcap[stack[d]]
                for d in range(depth):
                    a = stack[d]
                    rcap[a] -= delta
                    rcap[a ^ 1] += delta
                excess[s] -= delta
                excess[v] += delta


@njit
def _detach(first_child, next_sib, prev_sib, p, x):
    if prev_sib[x] != -1:
        next_sib[prev_sib[x]] = next_sib[x]
    else:
        first_child[p] = next_sib[x]
    if next_sib[x] != -1:
        prev_sib[next_sib[x]] = prev_sib[x]


@njit
def _attach(first_child, next_sib, prev_sib, p, x):
    next_sib[x] = first_child[p]
    prev_sib[x] = -1
    if first_child[p] != -1:
        prev_sib[first_child[p]] = x
    first_child[p] = x


@njit
def _tree_potentials(root, src, cost, parent, pred, first_child, next_sib, depth, pi, stack):
    """Potentials (tree arcs at zero reduced cost) and depths from scratch."""
    pi[root] = 0.0
    depth[root] = 0
    top = 0
    c = first_child[root]
    while c != -1:
        stack[top] = c
        top += 1
        c = next_sib[c]
    while top > 0:
        top -= 1
        x = stack[top]
        p = parent[x]
        a = pred[x]
        depth[x] = depth[p] + 1
        if src[a] == x:
            pi[x] = pi[p] - cost[a]
        else:
            pi[x] = pi[p] + cost[a]
        c = first_child[x]
        while c != -1:
            stack[top] = c
            top += 1
            c = next_sib[c]


@njit
def simplex_kernel(n, tail, head, cost_in, cap_in, supply, eps):
    """Primal network simplex.  Returns (flow, potential, status, node).

    Big-M artificial arcs join every node to an extra root; the spanning
    tree is kept strongly feasible (Cunningham's leaving-arc rule), which
    prevents cycling.  Entering arcs come from block-search pricing.
    ``status`` is 0 (optimal), 2 (infeasible: ``node`` keeps artificial flow)
    or 3 (unbounded).
    """
    m = tail.shape[0]
    root = n
    M = m + n
    src = np.empty(M, np.int64)
    dst = np.empty(M, np.int64)
    cost = np.empty(M, np.float64)
    cap = np.empty(M, np.float64)
    flow = np.zeros(M, np.float64)
    state = np.ones(M, np.int8)
    cmax = 0.0
    for k in range(m):
        src[k] = tail[k]
        dst[k] = head[k]
        cost[k] = cost_in[k]
        cap[k] = cap_in[k]
        if abs(cost_in[k]) > cmax:
            cmax = abs(cost_in[k])
    art = 1.0 + (n + 1) * (1.0 + cmax)
    parent = np.empty(n + 1, np.int64)
    pred = np.empty(n + 1, np.int64)
    depth = np.zeros(n + 1, np.int64)
    first_child = np.full(n + 1, -1, np.int64)
    next_sib = np.full(n + 1, -1, np.int64)
    prev_sib = np.full(n + 1, -1, np.int64)
    pi = np.zeros(n + 1, np.float64)
    stack = np.empty(n + 1, np.int64)
    for v in range(n):
        a = m + v
        cost[a] = art
        cap[a] = np.inf
        state[a] = 0
        if supply[v] >= 0.0:
            src[a] = v
            dst[a] = root
            flow[a] = supply[v]
        else:
            src[a] = root
            dst[a] = v
            flow[a] = -supply[v]
        parent[v] = root
        pred[v] = a
        _attach(first_child, next_sib, prev_sib, root, v)
    parent[root] = -1
    pred[root] = -1
    _tree_potentials(root, src, cost, parent, pred, first_child, next_sib, depth, pi, stack)

    rc_eps = 1e-12 * (1.0 + cmax)
    block = max(int(np.sqrt(M)), 16)
    nxt = 0
    checks = 0
    while True:
        # block-search pricing
        best = -1
        best_v = -rc_eps
        e = nxt
        cnt = 0
        for _ in range(M):
            if state[e] != 0:
                v = state[e] * (cost[e] + pi[src[e]] - pi[dst[e]])
                if v < best_v:
                    best_v = v
                    best = e
            cnt += 1
            e += 1
            if e == M:
                e = 0
            if cnt == block:
                if best >= 0:
                    break
                cnt = 0
        nxt = e
        if best < 0:
            # confirm with drift-free potentials before declaring optimality
            if checks >= 3:
                break
            checks += 1
            _tree_potentials(root, src, cost, parent, pred, first_child, next_sib, depth, pi, stack)
            ok = True
            for k in range(M):
                if state[k] != 0 and state[k] * (cost[k] + pi[src[k]] - pi[dst[k]]) < -rc_eps:
                    ok = False
                    break
            if ok:
                break
            continue
        ein = best
        if state[ein] == 1:
            first = src[ein]
            second = dst[ein]
            delta = cap[ein] - flow[ein]
        else:
            first = dst[ein]
            second = src[ein]
            delta = flow[ein]
        a = first
        b = second
        while a != b:
            if depth[a] > depth[b]:
                a = parent[a]
            elif depth[b] > depth[a]:
                b = parent[b]
            else:
                a = parent[a]
                b = parent[b]
        join = a
        side = 0
        leave = -1
        to_upper = False
        # flow runs join -> first: scanning upward is reverse traversal order
        x = first
        while x != join:
            arc = pred[x]
            if src[arc] == x:
                r = flow[arc]
                up = False
            else:
                r = cap[arc] - flow[arc]
                up = True
            if r < delta:
                delta = r
                leave = x
                side = 1
                to_upper = up
            x = parent[x]
        # flow runs second -> join: scanning upward is traversal order
        x = second
        while x != join:
            arc = pred[x]
            if src[arc] == x:
                r = cap[arc] - flow[arc]
                up = True
            else:
                r = flow[arc]
                up = False
            if r <= delta:
                delta = r
                leave = x
                side = 2
                to_upper = up
            x = parent[x]
        if delta == np.inf:
            return flow[:m].copy(), pi[:n].copy(), 3, ein
        if delta > 0.0:
            if state[ein] == 1:
                flow[ein] += delta
            else:
                flow[ein] -= delta
            x = first
            while x != join:
                arc = pred[x]
                if src[arc] == x:
                    flow[arc] -= delta
                else:
                    flow[arc] += delta
                x = parent[x]
            x = second
            while x != join:
                arc = pred[x]
                if src[arc] == x:
                    flow[arc] += delta
                else:
                    flow[arc] -= delta
                x = parent[x]
        if side == 0:
            if state[ein] == 1:
                state[ein] = -1
                flow[ein] = cap[ein]
            else:
                state[ein] = 1
                flow[ein] = 0.0
            continue
        larc = pred[leave]
        if to_upper:
            flow[larc] = cap[larc]
            state[larc] = -1
        else:
            flow[larc] = 0.0
            state[larc] = 1
        if side == 1:
            xin = first
            xout = second
        else:
            xin = second
            xout = first
        rc = cost[ein] + pi[src[ein]] - pi[dst[ein]]
        shift = -rc if xin == src[ein] else rc
        # re-hang the path xin .. leave below xout
        x = xin
        new_par = xout
        new_pred = ein
        while True:
            old_par = parent[x]
            old_pred = pred[x]
            _detach(first_child, next_sib, prev_sib, old_par, x)
            _attach(first_child, next_sib, prev_sib, new_par, x)
            parent[x] = new_par
            pred[x] = new_pred
            if x == leave:
                break
            new_par = x
            new_pred = old_pred
            x = old_par
        state[ein] = 0
        # depths and potentials of the moved subtree
        top = 1
        stack[0] = xin
        while top > 0:
            top -= 1
            x = stack[top]
            depth[x] = depth[parent[x]] + 1
            pi[x] += shift
            c = first_child[x]
            while c != -1:
                stack[top] = c
                top += 1
                c = next_sib[c]
    for v in range(n):
        if flow[m + v] > eps:
            return flow[:m].copy(), pi[:n].copy(), 2, v
    return flow[:m].copy(), pi[:n].copy(), 0, -1


# ---------------------------------------------------------------------------
# pure flows
# ---------------------------------------------------------------------------


def _eps(problem: FlowProblem) -> float:
    scale = max(1.0, float(np.abs(problem.supply).sum()))
    finite = problem.capacity[np.isfinite(problem.capacity)]
    if finite.size:
        scale = max(scale, float(finite.max()))
    return 1e-13 * scale


def duality_gap(problem: FlowProblem, flow, potential, cost=None) -> float:
    c = problem.min_cost if cost is None else cost
    rc = c + potential[problem.tail] - potential[problem.head]
    neg = np.minimum(rc, 0.0)
    # round-off on an uncapacitated arc must not turn the bound into -inf
    noise = 1e-11 * (1.0 + float(np.abs(c).max(initial=0.0)) + float(np.abs(potential).max(initial=0.0)))
    neg[np.isinf(problem.capacity) & (neg > -noise)] = 0.0
    with np.errstate(invalid="ignore"):
        pen = np.where(neg < 0, problem.capacity * -neg, 0.0)
    dual = -float(problem.supply @ potential) - float(pen.sum())
    return float(c @ flow) - dual


METHODS = ("simplex", "ssp")


def _solve_pure(problem: FlowProblem, cost: np.ndarray, method: str = "simplex"):
    if abs(problem.supply.sum()) > 1e-9 * max(1.0, np.abs(problem.supply).sum()):
        raise InfeasibleError("node supplies do not balance", where=None)
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    kernel = simplex_kernel if method == "simplex" else ssp_kernel
    flow, pi, status, node = kernel(
        problem.num_nodes,
        problem.tail,
        problem.head,
        np.ascontiguousarray(cost, dtype=np.float64),
        problem.capacity,
        problem.supply,
        _eps(problem),
    )
    if status == INFEASIBLE:
        name = problem.node_names[node] if problem.node_names else int(node)
        raise InfeasibleError(f"flow problem is infeasible at node {name}", where=name)
    if status == UNBOUNDED:
        # an infeasible problem may also contain an unbounded cycle; report
        # infeasibility first
        _, _, st0, node0 = kernel(
            problem.num_nodes, problem.tail, problem.head, np.zeros(problem.num_arcs),
            problem.capacity, problem.supply, _eps(problem),
        )
        if st0 == INFEASIBLE:
            name = problem.node_names[node0] if problem.node_names else int(node0)
            raise InfeasibleError(f"flow problem is infeasible at node {name}", where=name)
        raise GdallocError("negative-cost cycle with unbounded capacity")
    return flow, pi


def solve_min_cost_flow(problem: FlowProblem, tol: float = 1e-6, method: str = "simplex") -> FlowSolution:
    """Optimal flow and node potentials (reduced cost ``c + pi_t - pi_h``)."""
    c = problem.min_cost
    flow, pi = _solve_pure(problem, c, method)
    obj = float(problem.cost @ flow)
    return FlowSolution(flow, pi, obj, duality_gap(problem, flow, pi))


# ---------------------------------------------------------------------------
# side constraints
# ---------------------------------------------------------------------------


def solve_with_side_constraints(
    problem: FlowProblem, constraints, tol: float = 1e-9, method: str = "simplex"
) -> FlowSolution:
    """Min-cost flow plus at most two linear side constraints, solved exactly.

    Multipliers are non-negative for the ``>=`` form of each row (a ``<=``
    row reports the multiplier of its negation) and zero on slack rows; they
    are also written back to ``constraint.multiplier``.
    """
    constraints = list(constraints)
    if not constraints:
        return solve_min_cost_flow(problem, tol, method)
    if len(constraints) > 2:
        raise ValueError("at most two side constraints are supported")
    for k in constraints:
        if k.coef.shape != (problem.num_arcs,):
            raise ValueError("side constraint length does not match arc count")
    rows = [k.normalized() for k in constraints]
    if len(rows) == 1:
        sol = _chord_search(problem, rows[0], constraints[0], tol, method)
    else:
        sol = _dantzig_wolfe(problem, rows, constraints, tol, method)
    for k, m in zip(constraints, sol.multipliers):
        k.multiplier = m
    return sol


def _lagrangian_cost(c, rows, mult):
    out = c.copy()
    for (a, _), m in zip(rows, mult):
        if m:
            out -= m * a
    return out


def _chord_search(problem, row, constraint, tol, method):
    a, b = row
    c = problem.min_cost
    name = constraint.name or "side constraint"
    x0, pi0 = _solve_pure(problem, c, method)
    slack_tol = tol * (1.0 + abs(b) + float(np.abs(a) @ np.abs(x0)))
    solves = 1
    if a @ x0 >= b - slack_tol:
        return _finish(problem, x0, pi0, [0.0], [(0.0, a)], solves)
    xi, _ = _solve_pure(problem, -a, method)
    solves += 1
    if a @ xi < b - slack_tol:
        raise InfeasibleError(f"{name} cannot be met: best attainable {a @ xi!r} < {b!r}", where=name)
    lo, hi = x0, xi
    for _ in range(500):
        gl, gh = a @ lo - b, a @ hi - b
        rho = max(0.0, (c @ hi - c @ lo) / (gh - gl))
        cl = c - rho * a
        xn, pin = _solve_pure(problem, cl, method)
        solves += 1
        line = c @ lo - rho * gl
        val = cl @ xn + rho * b
        if val >= line - tol * (1.0 + abs(line)):
            # both lo and hi are Lagrangian-optimal at rho: mix to hit the row exactly
            t = gh / (gh - gl)
            t = min(max(t, 0.0), 1.0)
            x = t * lo + (1.0 - t) * hi
            return _finish(problem, x, pin, [rho], [(rho, a)], solves)
        if a @ xn >= b:
            hi = xn
        else:
            lo = xn
    raise GdallocError("breakpoint search did not terminate")


def _finish(problem, x, pi, mults, mcoef, solves):
    lag = problem.min_cost.copy()
    for m, a in mcoef:
        lag = lag - m * a
    sol = FlowSolution(
        flow=x,
        potential=pi,
        objective=float(problem.cost @ x),
        optimality_gap=duality_gap(problem, x, pi, cost=lag),
        multipliers=list(mults),
        pricing_solves=solves,
    )
    sol.multipliers_with_coef = mcoef
    return sol


def _solve_master(C, A, b, big_m):
    """Elastic DW master by basis enumeration.

    min C@lam + M*sum(sig) s.t. A@lam + sig - sur = b, sum(lam) = 1, all >= 0.
    Returns (lam, sig, duals_rows, dual_convexity).
    """
    n = len(C)
    m = len(b)
    cols = np.zeros((m + 1, n + 2 * m))
    cols[:m, :n] = A
    cols[m, :n] = 1.0
    for r in range(m):
        cols[r, n + r] = 1.0
        cols[r, n + m + r] = -1.0
    cvec = np.concatenate([C, np.full(m, big_m), np.zeros(m)])
    rhs = np.concatenate([b, [1.0]])
    nv = n + 2 * m
    best = None
    scale = 1.0 + np.abs(C).max()
    for basis in itertools.combinations(range(nv), m + 1):
        B = cols[:, basis]
        if abs(np.linalg.det(B)) < 1e-12 * (1.0 + np.abs(B).max()) ** (m + 1):
            continue
        xb = np.linalg.solve(B, rhs)
        if xb.min() < -1e-10:
            continue
        pi = np.linalg.solve(B.T, cvec[list(basis)])
        red = cvec - cols.T @ pi
        obj = float(cvec[list(basis)] @ xb)
        dual_ok = red.min() >= -1e-9 * scale
        key = (not dual_ok, obj)
        if best is None or key < best[0]:
            best = (key, basis, xb, pi)
        if dual_ok:
            break
    if best is None:
        raise GdallocError("master problem has no basic feasible solution")
    _, basis, xb, pi = best
    x = np.zeros(nv)
    x[list(basis)] = np.maximum(xb, 0.0)
    return x[:n], x[n : n + m], pi[:m], pi[m]


def _dantzig_wolfe(problem, rows, constraints, tol, method):
    c = problem.min_cost
    A = np.array([a for a, _ in rows])
    b = np.array([bb for _, bb in rows])
    columns = []
    x0, pi0 = _solve_pure(problem, c, method)
    solves = 1
    if np.all(A @ x0 >= b - tol * (1.0 + np.abs(b))):
        return _finish(problem, x0, pi0, [0.0, 0.0], [(0.0, A[0]), (0.0, A[1])], solves)
    columns.append(x0)
    for r in range(len(rows)):
        xr, _ = _solve_pure(problem, -A[r], method)
        solves += 1
        if A[r] @ xr < b[r] - tol * (1.0 + abs(b[r])):
            name = constraints[r].name or f"side constraint {r}"
            raise InfeasibleError(f"{name} cannot be met on its own", where=name)
        columns.append(xr)
    cscale = 1.0 + max(abs(c @ x) for x in columns)
    big_m = 1e7 * cscale
    for _ in range(1000):
        X = np.array(columns)
        lam, sig, rho, sigma0 = _solve_master(X @ c, A @ X.T, b, big_m)
        rho = np.maximum(rho, 0.0)
        lag = c - rho @ A
        xn, pin = _solve_pure(problem, lag, method)
        solves += 1
        master_obj = float(lam @ (X @ c) + big_m * sig.sum())
        if lag @ xn - sigma0 >= -tol * (1.0 + abs(master_obj)):
            if sig.max() > tol * (1.0 + np.abs(b).max()):
                bad = int(np.argmax(sig))
                names = [k.name or f"side constraint {r}" for r, k in enumerate(constraints)]
                raise InfeasibleError(
                    f"side constraints are jointly infeasible ({', '.join(names)})", where=names[bad]
                )
            x = lam @ X
            return _finish(problem, x, pin, list(rho), [(rho[r], A[r]) for r in range(len(rows))], solves)
        columns.append(xn)
    raise GdallocError("column generation did not converge")
