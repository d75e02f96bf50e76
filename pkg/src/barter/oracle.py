"""Ground truth for small economies: exhaustive enumeration, the counting
bound on the allocation space, and branch-and-bound for linear welfare."""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from .economy import EconomyInstance, UtilitySpec, is_feasible, require_valid, to_fraction
from .errors import InvalidInstanceError, NotConvergedError, ResourceLimitError
from .ipm import IpmResult, phase_one, relaxation, run_ipm
from .ser import SearchConfig, run_ser


def _scaled_integers(values) -> list:
    """Positive rationals rescaled to integers with the same ratios."""
    fr = [Fraction(v) for v in values]
    lcm = 1
    for v in fr:
        lcm = math.lcm(lcm, v.denominator)
    return [int(v * lcm) for v in fr]


def prop1_bound(inst: EconomyInstance) -> int:
    """``prod_j C(n + b_j - 1, b_j)`` with ``b_j`` the total units of commodity ``j``."""
    n = inst.n_agents
    out = 1
    for j in range(inst.n_commodities):
        b = sum(inst.endowments[h][j] for h in range(n))
        out *= math.comb(n + b - 1, b)
    return out


class EnumerationResult(NamedTuple):
    allocations: list
    count: int
    bound: int


def enumerate_allocations(inst: EconomyInstance, limit: int = 1_000_000) -> EnumerationResult:
    """Every feasible integer allocation, in lexicographic order.

    Depth-first over agents then commodities.  Each holding is capped by the
    agent's remaining budget, the remaining weighted supply and the capacity;
    the last commodity of an agent and the last agent's row are forced.
    """
    require_valid(inst)
    bound = prop1_bound(inst)
    if bound > limit:
        raise ResourceLimitError(f"allocation space bound {bound} exceeds limit {limit}")
    n, m = inst.n_agents, inst.n_commodities
    P = _scaled_integers(inst.prices)
    D = _scaled_integers(inst.weights)
    budgets = [sum(P[j] * inst.endowments[h][j] for j in range(m)) for h in range(n)]
    supply = [sum(D[h] * inst.endowments[h][j] for h in range(n)) for j in range(m)]
    caps = inst.capacities
    out = []
    x = [[0] * m for _ in range(n)]

    def cap(h, j, v):
        return caps is None or v <= caps[h][j]

    def emit():
        if len(out) >= limit:
            raise ResourceLimitError(f"more than {limit} feasible allocations")
        out.append(np.array(x, dtype=np.int64))

    def last_agent(rem):
        h = n - 1
        total = 0
        for j in range(m):
            v, r = divmod(rem[j], D[h])
            if r or not cap(h, j, v):
                return
            x[h][j] = v
            total += P[j] * v
        if total == budgets[h]:
            emit()

    def visit(h, j, rem, budget_left):
        if h == n - 1:
            last_agent(rem)
            return
        if j == m - 1:
            v, r = divmod(budget_left, P[j])
            if r or D[h] * v > rem[j] or not cap(h, j, v):
                return
            x[h][j] = v
            rem[j] -= D[h] * v
            visit(h + 1, 0, rem, budgets[h + 1] if h + 1 < n else 0)
            rem[j] += D[h] * v
            return
        top = min(budget_left // P[j], rem[j] // D[h])
        if caps is not None:
            top = min(top, caps[h][j])
        for v in range(top + 1):
            x[h][j] = v
            rem[j] -= D[h] * v
            visit(h, j + 1, rem, budget_left - P[j] * v)
            rem[j] += D[h] * v
        x[h][j] = 0

    visit(0, 0, list(supply), budgets[0])
    return EnumerationResult(out, len(out), bound)


# -- branch and bound ----------------------------------------------------------


@dataclass
class BnbResult:
    welfare: Fraction
    allocation: np.ndarray
    nodes: int
    root_lp: float
    root: IpmResult | None = None
    root_bounds: tuple | None = None
    pruned_infeasible: int = 0
    pruned_lagrangian: int = 0
    log: list = field(default_factory=list)


def _welfare_matrix(inst: EconomyInstance, c) -> list:
    if c is None:
        if not inst.all_linear:
            raise InvalidInstanceError("branch and bound needs linear utilities or an explicit welfare matrix")
        return [list(u.coefficients) for u in inst.utilities]
    rows = [[to_fraction(v) for v in row] for row in c]
    if len(rows) != inst.n_agents or any(len(r) != inst.n_commodities for r in rows):
        raise InvalidInstanceError("welfare matrix must be n x m")
    return rows


def _exact_welfare(cmat, x) -> Fraction:
    return sum((cmat[h][j] * int(x[h, j]) for h in range(len(cmat)) for j in range(len(cmat[0]))), Fraction(0))


class _Rows(NamedTuple):
    prices: list
    weights: list
    budgets: list
    supplies: list


def _integer_rows(sub: EconomyInstance) -> _Rows:
    P = _scaled_integers(sub.prices)
    D = _scaled_integers(sub.weights)
    n, m = sub.n_agents, sub.n_commodities
    return _Rows(P, D,
                 [sum(P[j] * sub.endowments[h][j] for j in range(m)) for h in range(n)],
                 [sum(D[h] * sub.endowments[h][j] for h in range(n)) for j in range(m)])


def propagate_bounds(rows: _Rows, lower: np.ndarray, upper: np.ndarray):
    """Tighten integer bounds through every budget and conservation row.

    For an equality row ``sum a_v x_v = r`` each ``x_v`` lies between
    ``(r - sum_{u != v} a_u up_u) / a_v`` and ``(r - sum_{u != v} a_u lo_u) / a_v``,
    rounded inward.  Exact integer arithmetic; returns ``None`` when a
    bound pair crosses.
    """
    lo = [[int(v) for v in row] for row in lower]
    up = [[int(v) for v in row] for row in upper]
    n, m = len(lo), len(lo[0])
    lines = [([(h, j) for j in range(m)], [rows.prices[j] for j in range(m)], rows.budgets[h]) for h in range(n)]
    lines += [([(h, j) for h in range(n)], [rows.weights[h] for h in range(n)], rows.supplies[j]) for j in range(m)]
    changed = True
    while changed:
        changed = False
        for cells, coef, rhs in lines:
            s_lo = sum(a * lo[h][j] for a, (h, j) in zip(coef, cells))
            s_up = sum(a * up[h][j] for a, (h, j) in zip(coef, cells))
            if s_lo > rhs or s_up < rhs:
                return None
            for a, (h, j) in zip(coef, cells):
                new_up = (rhs - (s_lo - a * lo[h][j])) // a
                new_lo = -((-(rhs - (s_up - a * up[h][j]))) // a)
                if new_up < up[h][j]:
                    s_up -= a * (up[h][j] - new_up)
                    up[h][j] = new_up
                    changed = True
                if new_lo > lo[h][j]:
                    s_lo += a * (new_lo - lo[h][j])
                    lo[h][j] = new_lo
                    changed = True
                if lo[h][j] > up[h][j]:
                    return None
    return np.array(lo, dtype=float), np.array(up, dtype=float)


def branch_and_bound_linear(inst: EconomyInstance, c=None, node_limit: int = 20_000,
                            tol: float = 1e-6) -> BnbResult:
    """Integer allocation maximising ``sum_h c^h . x^h``.

    Bounds come from the LP relaxation solved by the interior-point method,
    after integer bound propagation at every node.  A node is discarded as
    infeasible only when propagation crosses a bound pair or the phase-one
    problem leaves a positive violation; a node whose LP fails to converge while
    feasible raises ``NotConvergedError``.  The incumbent starts from a
    welfare-mode local search; nodes are taken best bound first and
    branch on the most fractional holding.
    """
    require_valid(inst)
    cmat = _welfare_matrix(inst, c)
    n, m = inst.n_agents, inst.n_commodities
    q = inst.q

    best_x = np.array(q, dtype=np.int64)
    best = _exact_welfare(cmat, best_x)

    supplies = inst.supplies
    active_j = [j for j in range(m) if supplies[j] > 0]
    active_h = [h for h in range(n) if inst.budgets[h] > 0]
    if len(active_h) <= 1 or len(active_j) <= 1:
        # nobody to trade with, or a single commodity pinned by budgets
        return BnbResult(best, best_x, 0, float(best))

    sub = _restrict(inst, active_h, active_j, cmat)
    rows = _integer_rows(sub)
    base = relaxation(sub, rational=False)
    csub = np.array([[float(cmat[h][j]) for j in active_j] for h in active_h])
    if inst.capacities is not None:
        caps = np.array([[inst.capacities[h][j] for j in active_j] for h in active_h], dtype=float)
        base.upper = np.minimum(base.upper, caps)
    base.upper = np.floor(base.upper + 1e-9)

    lattice = 1
    for row in cmat:
        for v in row:
            lattice = math.lcm(lattice, Fraction(v).denominator)
    step = 1.0 / lattice

    result = BnbResult(best, best_x, 0, math.nan)
    local = run_ser(inst.replace(utilities=tuple(UtilitySpec.linear(row) for row in cmat)),
                    SearchConfig(mode="best_improve", objective="welfare")).final
    if is_feasible(inst, local) and _exact_welfare(cmat, local) > best:
        best, best_x = _exact_welfare(cmat, local), np.array(local, dtype=np.int64)
        result.log.append((0, best))
    tie = itertools.count()
    heap = [(-math.inf, next(tie), base.lower.copy(), base.upper.copy())]
    while heap:
        parent, _, lower, upper = heapq.heappop(heap)
        if -parent + tol * (1.0 + abs(parent)) < float(best) + step:
            continue
        result.nodes += 1
        if result.nodes > node_limit:
            raise ResourceLimitError(f"branch and bound exceeded {node_limit} nodes")
        tightened = propagate_bounds(rows, lower, upper)
        if tightened is None:
            result.pruned_infeasible += 1
            continue
        lower, upper = tightened
        prob = _with_bounds(base, lower, upper)
        lp = run_ipm(prob, q=np.clip(q[np.ix_(active_h, active_j)], lower, upper))
        if result.nodes == 1:
            result.root = lp
            result.root_bounds = (lower, upper)
            result.root_lp = lp.welfare
        if not lp.converged:
            if _phase_one_infeasible(prob):
                result.pruned_infeasible += 1
                continue
            raise NotConvergedError(f"LP relaxation did not converge at node {result.nodes}")
        value = lp.welfare
        slack = tol * (1.0 + abs(value))
        if value + slack < float(best) + step:
            continue
        x = lp.x
        frac = np.abs(x - np.round(x))
        free = upper > lower
        frac = np.where(free, frac, 0.0)
        if float(frac.max(initial=0.0)) <= tol:
            cand = _embed(inst, np.round(x).astype(np.int64), active_h, active_j)
            if not is_feasible(inst, cand):
                raise NotConvergedError(f"rounded LP point infeasible at node {result.nodes}")
            w = _exact_welfare(cmat, cand)
            if w > best:
                best, best_x = w, cand
                result.log.append((result.nodes, best))
            continue
        # the node's own LP duals start the multipliers
        bound, found, _ = lagrangian_bound(csub, rows, base.weights, base.supplies, lower, upper,
                                           -lp.state.y2, float(best) + step)
        if found is not None:
            cand = _embed(inst, found, active_h, active_j)
            w = _exact_welfare(cmat, cand)
            if w > best and is_feasible(inst, cand):
                best, best_x = w, cand
                result.log.append((result.nodes, best))
        if bound + slack < float(best) + step:
            result.pruned_lagrangian += 1
            continue
        value = min(value, bound)
        idx = np.unravel_index(int(np.argmax(frac)), x.shape)
        v = x[idx]
        down_up = upper.copy()
        down_up[idx] = math.floor(v)
        up_lo = lower.copy()
        up_lo[idx] = math.floor(v) + 1
        heapq.heappush(heap, (-value, next(tie), lower.copy(), down_up))
        heapq.heappush(heap, (-value, next(tie), up_lo, upper.copy()))
    result.welfare, result.allocation = best, best_x
    return result


def _knapsack(values, prices, budget: int, lower, upper):
    """Best ``values . x`` over integer ``lower <= x <= upper`` with ``prices . x == budget``.

    Dynamic programme over the spent budget; returns ``(-inf, None)`` when
    no point meets the budget exactly.
    """
    lo = np.asarray(lower, dtype=np.int64)
    room = budget - int(np.dot(prices, lo))
    if room < 0:
        return -math.inf, None
    best = np.full(room + 1, -math.inf)
    best[0] = 0.0
    picks = []
    spent = np.arange(room + 1)
    for j, p in enumerate(prices):
        top = min(int(upper[j]) - int(lo[j]), room // p)
        units = np.arange(top + 1)[:, None]
        src = spent[None, :] - units * p
        cand = np.where(src >= 0, best[np.maximum(src, 0)] + units * values[j], -math.inf)
        arg = np.argmax(cand, axis=0)
        best = cand[arg, spent]
        picks.append(arg)
    if best[room] == -math.inf:
        return -math.inf, None
    x = lo.copy()
    b = room
    for j in range(len(prices) - 1, -1, -1):
        x[j] += picks[j][b]
        b -= picks[j][b] * prices[j]
    return float(best[room] + np.dot(values, lo)), x


def lagrangian_bound(c, rows: _Rows, weights, supplies, lower, upper, lam, target: float,
                     iterations: int = 20):
    """Upper bound on integer welfare with the linking rows priced out.

    For multipliers ``lam`` each agent solves its own budget-constrained
    integer problem with values ``c^h - d^h lam``; the sum plus
    ``lam . supplies`` bounds the node.  Polyak subgradient steps aimed at
    ``target`` tighten it.  Returns the best bound and, when some
    multipliers make the agents' choices clear every linking row, that
    allocation; the multipliers behind the bound come last.
    """
    lam = np.asarray(lam, dtype=float).copy()
    n = len(weights)
    best, found, best_lam = math.inf, None, lam.copy()
    for _ in range(iterations):
        total = float(lam @ supplies)
        xs = []
        for h in range(n):
            v, xh = _knapsack(c[h] - weights[h] * lam, rows.prices, rows.budgets[h], lower[h], upper[h])
            if xh is None:
                return -math.inf, None, lam
            total += v
            xs.append(xh)
        X = np.array(xs)
        if total < best:
            best, best_lam = total, lam.copy()
        gap = supplies - weights @ X
        if not np.any(np.abs(gap) > 1e-9):
            return best, X, best_lam
        if best < target:
            break
        lam -= max(total - target, 1e-9) / float(gap @ gap) * gap
    return best, found, best_lam


def _restrict(inst: EconomyInstance, hs, js, cmat) -> EconomyInstance:
    return EconomyInstance(
        prices=tuple(inst.prices[j] for j in js),
        weights=tuple(inst.weights[h] for h in hs),
        endowments=tuple(tuple(inst.endowments[h][j] for j in js) for h in hs),
        utilities=tuple(UtilitySpec.linear([cmat[h][j] for j in js]) for h in hs),
    )


def _embed(inst, x_sub, hs, js) -> np.ndarray:
    out = np.zeros((inst.n_agents, inst.n_commodities), dtype=np.int64)
    out[np.ix_(hs, js)] = x_sub
    return out


def _with_bounds(base, lower, upper):
    return replace(base, lower=lower, upper=upper)


def _phase_one_infeasible(prob, tol: float = 1e-6) -> bool:
    elastic = phase_one(prob)
    res = run_ipm(elastic)
    if not res.converged:
        raise NotConvergedError("phase-one problem did not converge")
    violation = float(res.state.xc.sum())
    return violation > tol * (1.0 + float(prob.supplies.max()))
