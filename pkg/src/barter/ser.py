"""Sequences of elementary reallocations (barter local search).

Two scan strategies are supported: first-improve, which accepts the first
acceptable reallocation found from a cyclic pointer, and best-improve, which
scans the full neighbourhood and accepts the highest-scoring one.
Acceptance is either bilateral (both traders weakly better off, the pair
picked on their joint Pareto frontier) or driven by an aggregate welfare.

Economies where every agent has a linear utility are scanned with a
vectorised integer kernel; everything else goes through the generic path,
which also serves as a reference for the kernel.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from .economy import EconomyInstance, format_number, fraction_to_json, require_valid, utility_vector
from .erp import (
    ERDirection,
    continuous_argmax,
    direction,
    pareto_frontier,
    step_interval,
    ternary_search,
    trader_utilities,
    unordered_candidates,
)

FIRST = "first_improve"
BEST = "best_improve"
BILATERAL = "bilateral_pareto"
WELFARE = "welfare"
WELFARE_KINDS = ("sum", "l1_norm", "linf_norm")
SCORE_KINDS = WELFARE_KINDS + ("frontier_count", "mrs")

_ALIASES = {"first": FIRST, "best": BEST, "pareto": BILATERAL, "bilateral": BILATERAL}


@dataclass(frozen=True)
class SearchConfig:
    """Search strategy.

    ``welfare_kind`` is the aggregate maximised in welfare mode and the
    ranking criterion of best-improve; ``frontier_count`` and ``mrs`` are
    only meaningful as rankings in bilateral mode.  ``order_seed`` permutes
    the candidate list; ``None`` keeps lexicographic order.
    """

    mode: str = FIRST
    objective: str = BILATERAL
    welfare_kind: str = "sum"
    order_seed: int | None = None
    max_iterations: int = 100_000

    def __post_init__(self):
        object.__setattr__(self, "mode", _ALIASES.get(self.mode, self.mode))
        object.__setattr__(self, "objective", _ALIASES.get(self.objective, self.objective))
        if self.mode not in (FIRST, BEST):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.objective not in (BILATERAL, WELFARE):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.welfare_kind not in SCORE_KINDS:
            raise ValueError(f"unknown welfare kind {self.welfare_kind!r}")
        if self.objective == WELFARE and self.welfare_kind not in WELFARE_KINDS:
            raise ValueError(f"{self.welfare_kind!r} is a ranking, not a welfare function")


class TradeEvent(NamedTuple):
    t: int
    h: int
    k: int
    i: int
    j: int
    alpha: int
    utilities: tuple


@dataclass
class TradeLog:
    n_agents: int
    events: list = field(default_factory=list)
    neighborhood: list = field(default_factory=list)
    interaction: np.ndarray = None
    flow: list = None
    converged: bool = False

    def __post_init__(self):
        n = self.n_agents
        if self.interaction is None:
            self.interaction = np.zeros((n, n), dtype=np.int64)
        if self.flow is None:
            self.flow = [[Fraction(0)] * n for _ in range(n)]

    @property
    def erps_solved(self) -> int:
        return len(self.events)

    @property
    def mean_neighborhood(self) -> float:
        return float(np.mean(self.neighborhood)) if self.neighborhood else 0.0

    def record(self, inst: EconomyInstance, d: ERDirection, alpha: int, utilities, explored: float):
        h, k = d.agents
        i, j = d.commodities
        self.events.append(TradeEvent(len(self.events) + 1, h, k, i, j, alpha, tuple(utilities)))
        self.neighborhood.append(explored)
        self.interaction[h, k] += 1
        self.interaction[k, h] += 1
        value = traded_value(inst, d, alpha)
        self.flow[h][k] += value
        self.flow[k][h] += value

    def replay(self, inst: EconomyInstance) -> np.ndarray:
        x = np.array(inst.q, dtype=np.int64)
        for ev in self.events:
            d = direction(inst, ev.h, ev.k, ev.i, ev.j)
            x = d.apply(x, ev.alpha)
        return x

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t", "h", "k", "i", "j", "alpha"] + [f"u{a}" for a in range(self.n_agents)])
        for ev in self.events:
            writer.writerow([ev.t, ev.h, ev.k, ev.i, ev.j, ev.alpha] + [format_number(u) for u in ev.utilities])
        return buf.getvalue()

    def to_dict(self) -> dict:
        def num(v):
            return fraction_to_json(v) if isinstance(v, Fraction) else float(v)

        return {
            "n": self.n_agents,
            "converged": self.converged,
            "erps_solved": self.erps_solved,
            "events": [
                {"t": e.t, "h": e.h, "k": e.k, "i": e.i, "j": e.j, "alpha": e.alpha,
                 "utilities": [num(u) for u in e.utilities]}
                for e in self.events
            ],
            "neighborhood": list(self.neighborhood),
            "interaction": self.interaction.tolist(),
            "flow": [[fraction_to_json(v) for v in row] for row in self.flow],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"


@dataclass
class LyapunovSeries:
    values: list
    bound: Fraction | None = None

    @property
    def deltas(self) -> list:
        return [b - a for a, b in zip(self.values, self.values[1:])]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t", "U", "delta"])
        for t, v in enumerate(self.values):
            delta = "" if t == 0 else format_number(v - self.values[t - 1])
            writer.writerow([t, format_number(v), delta])
        return buf.getvalue()


class SerResult(NamedTuple):
    final: np.ndarray
    log: TradeLog
    lyapunov: LyapunovSeries


def traded_value(inst: EconomyInstance, d: ERDirection, alpha: int) -> Fraction:
    """Value of goods changing hands, each unit counted once."""
    p = inst.prices
    i, j = d.commodities
    s = d.step
    moved = p[i] * abs(s[0]) + p[j] * abs(s[1]) + p[i] * abs(s[2]) + p[j] * abs(s[3])
    return moved * abs(alpha) / 2


def lyapunov_bound(inst: EconomyInstance) -> Fraction:
    q_max = max(sum(row[j] for row in inst.endowments) for j in range(inst.n_commodities))
    return Fraction(q_max) / min(inst.prices) * max(inst.weights) / min(inst.weights)


def check_delta_bound(inst: EconomyInstance, series: LyapunovSeries) -> bool:
    """True iff every welfare increment stays within the Lyapunov bound.

    Requires linear utilities with all gradients ``<= 1`` and prices ``<= 1``.
    """
    if not inst.all_linear:
        raise ValueError("the change bound applies to linear utilities only")
    if any(c > 1 for u in inst.utilities for c in u.coefficients):
        raise ValueError("utility gradients must be rescaled to at most 1")
    if any(p > 1 for p in inst.prices):
        raise ValueError("prices must be rescaled to at most 1")
    bound = lyapunov_bound(inst)
    return all(delta <= bound for delta in series.deltas)


# -- welfare and scoring ---------------------------------------------------


def welfare(values, kind: str = "sum"):
    if kind == "sum":
        return sum(values, type(values[0])(0)) if values else 0
    if kind == "l1_norm":
        return sum((abs(v) for v in values), type(values[0])(0))
    if kind == "linf_norm":
        return max(abs(v) for v in values)
    raise ValueError(f"unknown welfare kind {kind!r}")


def _with_traders(u_now, d: ERDirection, uh, uk) -> list:
    out = list(u_now)
    out[d.agents[0]] = uh
    out[d.agents[1]] = uk
    return out


def _welfare_alphas(inst, x, d, iv) -> set:
    alphas = {iv.lo_int, iv.hi_int}
    h, k = d.agents
    if not (inst.utilities[h].is_linear and inst.utilities[k].is_linear):
        for a in (continuous_argmax(inst, h, x, d, iv), continuous_argmax(inst, k, x, d, iv)):
            alphas.update((math.floor(a), math.ceil(a)))
        t = ternary_search(lambda a: sum(trader_utilities(inst, x, d, a)), float(iv.lo), float(iv.hi))
        alphas.update((math.floor(t), math.ceil(t)))
    return {a for a in alphas if iv.lo_int <= a <= iv.hi_int and a != 0}


def _mrs_gap(inst, x, d) -> float:
    i, j = d.commodities
    rates = []
    for a in d.agents:
        g = inst.utilities[a].gradient(np.asarray(x)[a])
        gi, gj = float(g[i]), float(g[j])
        rates.append(gi / gj if gj > 0 else (math.inf if gi > 0 else 0.0))
    gap = abs(rates[0] - rates[1])
    return gap if math.isfinite(gap) else 1e300


class Proposal(NamedTuple):
    alpha: int
    u_h: object
    u_k: object
    score: object


def propose(inst: EconomyInstance, x, d: ERDirection, config: SearchConfig, u_now) -> Proposal | None:
    """Acceptable move along ``d`` under ``config``, or ``None``."""
    iv = step_interval(inst, x, d)
    if iv.lo_int == 0 and iv.hi_int == 0:
        return None
    h, k = d.agents
    if config.objective == WELFARE:
        w0 = welfare(u_now, config.welfare_kind)
        best = None
        for a in sorted(_welfare_alphas(inst, x, d, iv), key=lambda a: (abs(a), a)):
            uh, uk = trader_utilities(inst, x, d, a)
            gain = welfare(_with_traders(u_now, d, uh, uk), config.welfare_kind) - w0
            if best is None or gain > best.score:
                best = Proposal(a, uh, uk, gain)
        if best is None or not best.score > 0:
            return None
        return best

    front = [p for p in pareto_frontier(inst, x, d, iv) if p.alpha != 0]
    if not front:
        return None
    uh0, uk0 = u_now[h], u_now[k]
    chosen = None
    for p in sorted(front, key=lambda p: (abs(p.alpha), p.alpha)):
        gain = (p.u_h - uh0) + (p.u_k - uk0)
        if chosen is None or gain > chosen.score:
            chosen = Proposal(p.alpha, p.u_h, p.u_k, gain)
    kind = config.welfare_kind
    if kind == "frontier_count":
        score = len(front)
    elif kind == "mrs":
        score = _mrs_gap(inst, x, d)
    elif kind == "sum":
        score = chosen.score
    else:
        score = welfare(_with_traders(u_now, d, chosen.u_h, chosen.u_k), kind) - welfare(u_now, kind)
    return chosen._replace(score=score)


def selection_score(inst: EconomyInstance, x, d: ERDirection, criterion: str = "sum"):
    """Ranking value of a reallocation used by best-improve.

    ``frontier_count`` counts the improving Pareto points; ``sum``,
    ``l1_norm`` and ``linf_norm`` give the welfare gain of the selected
    point (0 when nothing improves); ``mrs`` is the gap between the traders'
    marginal rates of substitution between the two commodities.
    """
    if criterion not in SCORE_KINDS:
        raise ValueError(f"unknown criterion {criterion!r}")
    x = np.asarray(x)
    if criterion == "mrs":
        return _mrs_gap(inst, x, d)
    u_now = list(utility_vector(inst, x))
    prop = propose(inst, x, d, SearchConfig(objective=BILATERAL, welfare_kind=criterion), u_now)
    if prop is None:
        return 0
    return prop.score


# -- search drivers --------------------------------------------------------


def candidate_order(inst: EconomyInstance, config: SearchConfig, pairs=None) -> list:
    cands = unordered_candidates(inst.n_agents, inst.n_commodities, pairs)
    if config.order_seed is not None:
        perm = np.random.default_rng(config.order_seed).permutation(len(cands))
        cands = [cands[t] for t in perm]
    return cands


def run_ser(inst: EconomyInstance, config: SearchConfig = SearchConfig(), pairs=None,
            vectorized: bool | None = None) -> SerResult:
    """Run the local search from the endowments until no move is accepted.

    ``pairs`` restricts trading to the listed ``(h, k)`` agent pairs with
    ``h < k``.  ``vectorized`` forces (or forbids) the integer kernel for
    all-linear economies; by default it is used whenever it applies.
    """
    require_valid(inst)
    cands = candidate_order(inst, config, pairs)
    use_kernel = _kernel_applies(inst, config) if vectorized is None else vectorized
    if use_kernel and not _kernel_applies(inst, config):
        raise ValueError("the vectorised kernel needs linear utilities and sum welfare")
    if use_kernel:
        return _run_kernel(inst, config, cands)
    return _run_generic(inst, config, cands)


def _finish(inst, x, log, values) -> SerResult:
    x = np.array(x, dtype=np.int64)
    x.flags.writeable = False
    return SerResult(x, log, LyapunovSeries(values, lyapunov_bound(inst)))


def _run_generic(inst, config, cands) -> SerResult:
    x = np.array(inst.q, dtype=np.int64)
    u_now = list(utility_vector(inst, x))
    log = TradeLog(inst.n_agents)
    values = [sum(u_now, type(u_now[0])(0))]
    dirs = [direction(inst, *c) for c in cands]
    n_c = len(dirs)
    pointer = 0
    while True:
        if n_c == 0:
            log.converged = True
            break
        if log.erps_solved >= config.max_iterations:
            break
        chosen = None
        explored = n_c
        if config.mode == FIRST:
            for step in range(n_c):
                idx = (pointer + step) % n_c
                prop = propose(inst, x, dirs[idx], config, u_now)
                if prop is not None:
                    chosen, explored = (idx, prop), step + 1
                    break
        else:
            best_key = None
            for idx, d in enumerate(dirs):
                prop = propose(inst, x, d, config, u_now)
                if prop is None:
                    continue
                key = (prop.score, _neg_tuple(cands[idx]))
                if best_key is None or key > best_key:
                    best_key, chosen = key, (idx, prop)
        if chosen is None:
            log.converged = True
            break
        idx, prop = chosen
        d = dirs[idx]
        x = d.apply(x, prop.alpha)
        u_now[d.agents[0]] = prop.u_h
        u_now[d.agents[1]] = prop.u_k
        log.record(inst, d, prop.alpha, u_now, explored / n_c)
        values.append(sum(u_now, type(u_now[0])(0)))
        pointer = (idx + 1) % n_c
    return _finish(inst, x, log, values)


def _neg_tuple(t):
    return tuple(-v for v in t)


# -- vectorised kernel for linear economies --------------------------------


def _kernel_applies(inst, config) -> bool:
    if not inst.all_linear:
        return False
    return config.welfare_kind == "sum"


def _lcm_den(values) -> int:
    out = 1
    for v in values:
        out = math.lcm(out, Fraction(v).denominator)
    return out


def _run_kernel(inst, config, cands) -> SerResult:
    n, m = inst.n_agents, inst.n_commodities
    scale = _lcm_den(c for u in inst.utilities for c in u.coefficients)
    cmat = np.array([[int(c * scale) for c in u.coefficients] for u in inst.utilities], dtype=np.int64)
    x = np.array(inst.q, dtype=np.int64)
    log = TradeLog(n)
    u_scaled = [int(v) for v in (cmat * x).sum(axis=1)]
    values = [Fraction(sum(u_scaled), scale)]
    n_c = len(cands)
    if n_c == 0:
        log.converged = True
        return _finish(inst, x, log, values)

    dirs = [direction(inst, *c) for c in cands]
    arr = np.array(cands, dtype=np.int64)
    H, K, I, J = arr.T
    S = np.array([d.step for d in dirs], dtype=np.int64)
    s1, s2, s3, s4 = S.T  # s1, s4 > 0 > s2, s3
    gh = cmat[H, I] * s1 + cmat[H, J] * s2
    gk = cmat[K, I] * s3 + cmat[K, J] * s4
    total_gain = gh + gk
    if config.objective == WELFARE:
        direction_sign = np.sign(total_gain)
    else:
        pos = (gh >= 0) & (gk >= 0) & ((gh > 0) | (gk > 0))
        neg = (gh <= 0) & (gk <= 0) & ((gh < 0) | (gk < 0))
        direction_sign = np.where(pos, 1, np.where(neg, -1, 0))

    big = np.iinfo(np.int64).max // 4
    rat_lo = np.full(n_c, -big, dtype=np.int64)
    rat_hi = np.full(n_c, big, dtype=np.int64)
    if inst.rationing is not None:
        low = np.array(inst.rationing[0], dtype=np.int64)
        high = np.array(inst.rationing[1], dtype=np.int64)
        for s, comm in ((s1, I), (s4, J)):  # positive entries
            rat_lo = np.maximum(rat_lo, -((-low[comm]) // s))
            rat_hi = np.minimum(rat_hi, high[comm] // s)
        for s, comm in ((s2, J), (s3, I)):  # negative entries
            rat_lo = np.maximum(rat_lo, -(high[comm] // -s))
            rat_hi = np.minimum(rat_hi, (-low[comm]) // -s)
    cap = None if inst.capacities is None else np.array(inst.capacities, dtype=np.int64)
    lex_rank = np.empty(n_c, dtype=np.int64)
    lex_rank[np.lexsort((J, I, K, H))] = np.arange(n_c)

    def proposals(x):
        xhi, xhj, xki, xkj = x[H, I], x[H, J], x[K, I], x[K, J]
        lo = np.maximum(-(xhi // s1), -(xkj // s4))
        hi = np.minimum(xhj // -s2, xki // -s3)
        if cap is not None:
            hi = np.minimum(hi, (cap[H, I] - xhi) // s1)
            hi = np.minimum(hi, (cap[K, J] - xkj) // s4)
            lo = np.maximum(lo, -((cap[H, J] - xhj) // -s2))
            lo = np.maximum(lo, -((cap[K, I] - xki) // -s3))
        lo = np.maximum(lo, rat_lo)
        hi = np.minimum(hi, rat_hi)
        return np.where(direction_sign > 0, hi, np.where(direction_sign < 0, lo, 0))

    pointer = 0
    while True:
        if log.erps_solved >= config.max_iterations:
            break
        alpha = proposals(x)
        ok = alpha != 0
        if not ok.any():
            log.converged = True
            break
        if config.mode == FIRST:
            order = (np.arange(n_c) - pointer) % n_c
            idx = int(np.argmin(np.where(ok, order, n_c)))
            explored = int(order[idx]) + 1
        else:
            score = np.where(ok, alpha * total_gain, np.iinfo(np.int64).min)
            top = score == score.max()
            idx = int(np.argmin(np.where(top, lex_rank, n_c)))
            explored = n_c
        a = int(alpha[idx])
        d = dirs[idx]
        x = d.apply(x, a)
        h, k = d.agents
        u_scaled[h] += a * int(gh[idx])
        u_scaled[k] += a * int(gk[idx])
        u_now = [Fraction(v, scale) for v in u_scaled]
        log.record(inst, d, a, u_now, explored / n_c)
        values.append(Fraction(sum(u_scaled), scale))
        pointer = (idx + 1) % n_c
    return _finish(inst, x, log, values)


def improving_moves(inst: EconomyInstance, x, config: SearchConfig, pairs=None) -> list:
    """Exhaustive certificate scan: every candidate with an accepting integer step.

    Every feasible integer step of every candidate is tried, independently of
    the frontier construction used by the search itself.
    """
    x = np.asarray(x)
    u_now = list(utility_vector(inst, x))
    w0 = welfare(u_now, config.welfare_kind) if config.objective == WELFARE else None
    found = []
    for cand in unordered_candidates(inst.n_agents, inst.n_commodities, pairs):
        d = direction(inst, *cand)
        iv = step_interval(inst, x, d)
        h, k = d.agents
        for a in iv.integers():
            if a == 0:
                continue
            uh, uk = trader_utilities(inst, x, d, a)
            if config.objective == WELFARE:
                good = welfare(_with_traders(u_now, d, uh, uk), config.welfare_kind) > w0
            else:
                good = uh >= u_now[h] and uk >= u_now[k] and (uh > u_now[h] or uk > u_now[k])
            if good:
                found.append((cand, a))
                break
    return found
