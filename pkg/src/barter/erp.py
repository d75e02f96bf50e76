"""Elementary reallocations between two agents and two commodities.

A reallocation moves agent ``h`` and agent ``k`` along the smallest integer
vector in the null space of their 2x2 budget/conservation block.  The step
length ``alpha`` is an integer; this module computes the direction, the
feasible range of ``alpha``, the continuous maximiser of each trader's
utility along the line, and the integer Pareto frontier of the two traders.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .economy import EconomyInstance, LINEAR


def g_factor(values: Sequence) -> Fraction:
    """Scalar ``G`` such that ``G * v`` is an integer vector with gcd 1.

    ``G = lcm(denominators) / gcd(lcm * |v|)``.
    """
    vals = [Fraction(v) for v in values]
    if not vals:
        raise ValueError("g_factor needs at least one value")
    if any(v == 0 for v in vals):
        raise ValueError("g_factor values must be nonzero")
    lcm = 1
    for v in vals:
        lcm = math.lcm(lcm, v.denominator)
    g = 0
    for v in vals:
        g = math.gcd(g, abs(v.numerator) * (lcm // v.denominator))
    return Fraction(lcm, g)


@dataclass(frozen=True)
class ERDirection:
    """Integer direction of an elementary reallocation.

    ``step`` lists the changes at ``(h, i), (h, j), (k, i), (k, j)``.
    """

    agents: tuple
    commodities: tuple
    raw: tuple
    factor: Fraction
    step: tuple

    @property
    def entries(self) -> tuple:
        (h, k), (i, j) = self.agents, self.commodities
        s = self.step
        return ((h, i, s[0]), (h, j, s[1]), (k, i, s[2]), (k, j, s[3]))

    def dense(self, n: int, m: int) -> np.ndarray:
        out = np.zeros((n, m), dtype=np.int64)
        for a, c, s in self.entries:
            out[a, c] = s
        return out

    def apply(self, x: np.ndarray, alpha: int) -> np.ndarray:
        out = np.array(x, dtype=np.int64)
        for a, c, s in self.entries:
            out[a, c] += alpha * s
        return out


def direction(inst: EconomyInstance, h: int, k: int, i: int, j: int) -> ERDirection:
    if h == k or i == j:
        raise ValueError("direction needs two distinct agents and two distinct commodities")
    n, m = inst.n_agents, inst.n_commodities
    if not (0 <= h < n and 0 <= k < n and 0 <= i < m and 0 <= j < m):
        raise IndexError("direction index out of range")
    p, d = inst.prices, inst.weights
    raw = (p[j] * d[k], -p[i] * d[k], -p[j] * d[h], p[i] * d[h])
    factor = g_factor(raw)
    step = tuple(int(factor * r) for r in raw)
    return ERDirection((h, k), (i, j), raw, factor, step)


@dataclass(frozen=True)
class StepInterval:
    lo: Fraction
    hi: Fraction
    lo_int: int
    hi_int: int

    def integers(self) -> range:
        return range(self.lo_int, self.hi_int + 1)


def step_interval(inst: EconomyInstance, x, dir: ERDirection) -> StepInterval:
    """Feasible range of ``alpha`` keeping ``x + alpha * step`` admissible.

    Nonnegativity, capacities and per-commodity rationing bounds on each of
    the four changed holdings are intersected.
    """
    x = np.asarray(x)
    lo = -math.inf
    hi = math.inf
    caps = inst.capacities
    rationing = inst.rationing

    def tighten(bound_lo, bound_hi):
        nonlocal lo, hi
        if bound_lo is not None and bound_lo > lo:
            lo = bound_lo
        if bound_hi is not None and bound_hi < hi:
            hi = bound_hi

    for a, c, s in dir.entries:
        v = int(x[a, c])
        # v + alpha*s >= 0
        if s > 0:
            tighten(Fraction(-v, s), None)
        else:
            tighten(None, Fraction(v, -s))
        if caps is not None:
            room = caps[a][c] - v
            if s > 0:
                tighten(None, Fraction(room, s))
            else:
                tighten(Fraction(room, s), None)
        if rationing is not None:
            low, high = rationing[0][c], rationing[1][c]
            if s > 0:
                tighten(Fraction(low, s), Fraction(high, s))
            else:
                tighten(Fraction(high, s), Fraction(low, s))
    lo_int = math.ceil(lo)
    hi_int = math.floor(hi)
    return StepInterval(Fraction(lo), Fraction(hi), lo_int, hi_int)


def _agent_slot(dir: ERDirection, h: int) -> int:
    if h == dir.agents[0]:
        return 0
    if h == dir.agents[1]:
        return 1
    raise ValueError(f"agent {h} does not take part in this reallocation")


def moved_row(x, dir: ERDirection, slot: int, alpha) -> np.ndarray:
    """Holdings of one trader (slot 0 = h, 1 = k) after moving ``alpha``."""
    a = dir.agents[slot]
    row = np.array(x[a], dtype=np.int64 if isinstance(alpha, int) else float)
    i, j = dir.commodities
    row[i] += alpha * dir.step[2 * slot]
    row[j] += alpha * dir.step[2 * slot + 1]
    return row


def trader_utilities(inst: EconomyInstance, x, dir: ERDirection, alpha: int) -> tuple:
    """Utilities of the two traders after moving ``alpha``."""
    h, k = dir.agents
    return (
        inst.utilities[h].value(moved_row(x, dir, 0, alpha)),
        inst.utilities[k].value(moved_row(x, dir, 1, alpha)),
    )


def linear_gain(inst: EconomyInstance, dir: ERDirection, slot: int) -> Fraction:
    """Change of a linear trader's utility per unit of ``alpha``."""
    c = inst.utilities[dir.agents[slot]].coefficients
    i, j = dir.commodities
    return c[i] * dir.step[2 * slot] + c[j] * dir.step[2 * slot + 1]


def ternary_search(f: Callable[[float], float], lo: float, hi: float, tol: float = 1e-9) -> float:
    """Maximiser of a unimodal function on ``[lo, hi]``."""
    while hi - lo > tol:
        m1 = lo + (hi - lo) / 3
        m2 = hi - (hi - lo) / 3
        if f(m1) < f(m2):
            lo = m1
        else:
            hi = m2
    return (lo + hi) / 2


def _cara_stationary(a_pos, s_pos, x_pos, a_neg, s_neg, x_neg) -> float:
    # a_p s_p e^{-a_p(x_p + t s_p)} = a_n |s_n| e^{-a_n(x_n + t s_n)}, solved for t
    num = math.log(a_pos * s_pos) - a_pos * x_pos - math.log(a_neg * -s_neg) + a_neg * x_neg
    return num / (a_pos * s_pos - a_neg * s_neg)


def continuous_argmax(inst: EconomyInstance, h: int, x, dir: ERDirection,
                      interval: StepInterval | None = None) -> float:
    """Real maximiser of agent ``h``'s utility along ``dir`` within the step interval."""
    slot = _agent_slot(dir, h)
    iv = interval or step_interval(inst, x, dir)
    lo, hi = float(iv.lo), float(iv.hi)
    spec = inst.utilities[h]
    if spec.kind == LINEAR:
        gain = linear_gain(inst, dir, slot)
        if gain > 0:
            return hi
        if gain < 0:
            return lo
        return 0.0
    i, j = dir.commodities
    si, sj = dir.step[2 * slot], dir.step[2 * slot + 1]
    ai, aj = spec.coefficients[i], spec.coefficients[j]
    xi, xj = float(x[h][i]), float(x[h][j])
    if si > 0:
        t = _cara_stationary(ai, si, xi, aj, sj, xj)
    else:
        t = _cara_stationary(aj, sj, xj, ai, si, xi)
    return min(max(t, lo), hi)


class FrontierPoint(NamedTuple):
    alpha: int
    u_h: object
    u_k: object


def _nondominated(points: list) -> list:
    """Pareto filter for pairs; equal pairs keep the smallest ``|alpha|``."""
    points = sorted(points, key=lambda p: (abs(p.alpha), p.alpha))
    keep = []
    for p in points:
        dominated = False
        for q in points:
            if q is p:
                continue
            if q.u_h >= p.u_h and q.u_k >= p.u_k:
                if q.u_h > p.u_h or q.u_k > p.u_k:
                    dominated = True
                    break
                if (abs(q.alpha), q.alpha) < (abs(p.alpha), p.alpha):
                    dominated = True
                    break
        if not dominated:
            keep.append(p)
    return keep


def _argmax_span(inst, x, dir, slot, iv) -> tuple:
    """Real interval on which the trader attains its maximum along the line."""
    spec = inst.utilities[dir.agents[slot]]
    if spec.kind == LINEAR:
        gain = linear_gain(inst, dir, slot)
        if gain > 0:
            return float(iv.hi), float(iv.hi)
        if gain < 0:
            return float(iv.lo), float(iv.lo)
        return float(iv.lo), float(iv.hi)
    t = continuous_argmax(inst, dir.agents[slot], x, dir, iv)
    return t, t


def pareto_frontier(inst: EconomyInstance, x, dir: ERDirection,
                    interval: StepInterval | None = None) -> list:
    """Integer step lengths that are Pareto-optimal for the two traders and
    leave neither worse off than at ``alpha = 0``.

    Both traders linear: at most one point, decided by the sign of each
    trader's gain per unit step.  Otherwise the candidates are the integers
    between the two traders' maximisers plus the nearest integers outside.
    """
    x = np.asarray(x)
    iv = interval or step_interval(inst, x, dir)
    h, k = dir.agents
    base = FrontierPoint(0, *trader_utilities(inst, x, dir, 0))
    if iv.lo_int == 0 and iv.hi_int == 0:
        return [base]
    if inst.utilities[h].kind == LINEAR and inst.utilities[k].kind == LINEAR:
        gh, gk = linear_gain(inst, dir, 0), linear_gain(inst, dir, 1)
        alpha = 0
        if gh >= 0 and gk >= 0 and (gh > 0 or gk > 0):
            alpha = iv.hi_int
        elif gh <= 0 and gk <= 0 and (gh < 0 or gk < 0):
            alpha = iv.lo_int
        if alpha == 0:
            return [base]
        return [FrontierPoint(alpha, *trader_utilities(inst, x, dir, alpha))]

    spans = [_argmax_span(inst, x, dir, s, iv) for s in (0, 1)]
    a1 = min(spans[0][0], spans[1][0])
    a2 = max(spans[0][1], spans[1][1])
    cands = set(range(max(math.ceil(a1), iv.lo_int), min(math.floor(a2), iv.hi_int) + 1))
    cands.update((math.floor(a1), math.ceil(a2), 0))
    cands = [a for a in cands if iv.lo_int <= a <= iv.hi_int]
    points = [base if a == 0 else FrontierPoint(a, *trader_utilities(inst, x, dir, a)) for a in cands]
    front = _nondominated(points)
    front = [p for p in front if p.u_h >= base.u_h and p.u_k >= base.u_k]
    return sorted(front, key=lambda p: p.alpha)


def unordered_candidates(n: int, m: int, pairs=None) -> list:
    """All ``(h, k, i, j)`` with ``h < k`` and ``i < j``, agents outermost."""
    agent_pairs = pairs if pairs is not None else [(h, k) for h in range(n) for k in range(h + 1, n)]
    comm_pairs = [(i, j) for i in range(m) for j in range(i + 1, m)]
    return [(h, k, i, j) for h, k in agent_pairs for i, j in comm_pairs]
