"""Pareto filtering and wave-by-wave enumeration of non-dominated allocations."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .economy import EconomyInstance, format_number, require_valid, utility_vector
from .errors import ResourceLimitError
from .erp import direction, step_interval, unordered_candidates


def _weakly_below(a, b) -> bool:
    return all(x <= y for x, y in zip(a, b))


def pareto_filter(vectors: Sequence[Sequence]) -> list:
    """Non-dominated vectors under maximisation, duplicates collapsed.

    In-place pairwise scan: a vector weakly dominated by a later one is
    replaced by the last live vector; a later vector weakly dominated by the
    current one is replaced likewise.  Worst case O(n r^2).
    """
    vs = [tuple(v) for v in vectors]
    if not vs:
        raise ValueError("pareto_filter needs at least one vector")
    dim = len(vs[0])
    if any(len(v) != dim for v in vs):
        raise ValueError("vectors must share one dimension")
    r = len(vs)
    i = 0
    while i < r:
        j = i + 1
        while j < r:
            if _weakly_below(vs[i], vs[j]):
                vs[i] = vs[r - 1]
                r -= 1
                j = i + 1
            elif _weakly_below(vs[j], vs[i]):
                vs[j] = vs[r - 1]
                r -= 1
            else:
                j += 1
        i += 1
    return vs[:r]


@dataclass(frozen=True)
class Frontier:
    wave: int
    allocations: tuple
    utilities: tuple

    def utility_set(self) -> set:
        return set(self.utilities)

    def __len__(self) -> int:
        return len(self.allocations)


class PathEnumeration(NamedTuple):
    waves: list
    terminal: Frontier
    neighborhoods: int


def _key(x) -> tuple:
    return tuple(tuple(int(v) for v in row) for row in x)


def _make_frontier(wave: int, members: dict) -> Frontier:
    keys = sorted(members)
    return Frontier(wave, tuple(keys), tuple(members[k] for k in keys))


def expand(inst: EconomyInstance, x, floor_utilities, cands=None) -> dict:
    """Endpoint moves from ``x`` that keep every agent at or above ``floor_utilities``."""
    x = np.asarray(x, dtype=np.int64)
    cands = cands if cands is not None else unordered_candidates(inst.n_agents, inst.n_commodities)
    out = {}
    for cand in cands:
        d = direction(inst, *cand)
        iv = step_interval(inst, x, d)
        for a in {iv.lo_int, iv.hi_int} - {0}:
            y = d.apply(x, a)
            u = utility_vector(inst, y)
            if all(ui >= fi for ui, fi in zip(u, floor_utilities)):
                out[_key(y)] = u
    return out


def enumerate_paths(inst: EconomyInstance, max_waves: int = 10_000, max_frontier: int = 500) -> PathEnumeration:
    """Grow the set of non-dominated reachable allocations wave by wave.

    Each wave expands every incumbent along every candidate reallocation at
    both endpoints of its step interval, keeps moves that leave nobody below
    the endowment utilities, merges with the incumbents and filters.  Stops
    when a wave reproduces its predecessor.  A wave with more than
    ``max_frontier`` members raises ``ResourceLimitError``.
    """
    require_valid(inst)
    if not inst.all_linear:
        raise ValueError("path enumeration supports linear utilities only")
    floor_u = utility_vector(inst, inst.q)
    cands = unordered_candidates(inst.n_agents, inst.n_commodities)
    current = {_key(inst.q): floor_u}
    waves = [_make_frontier(0, current)]
    explored = 0
    while True:
        if len(waves) > max_waves:
            raise ResourceLimitError(f"no stable set after {max_waves} waves")
        pool = dict(current)
        for key in sorted(current):
            explored += 1
            pool.update(expand(inst, key, floor_u, cands))
        keep = set(pareto_filter(list(set(pool.values()))))
        nxt = {k: u for k, u in pool.items() if u in keep}
        if set(nxt) == set(current):
            break
        if len(nxt) > max_frontier:
            raise ResourceLimitError(f"wave {len(waves)} holds {len(nxt)} allocations (limit {max_frontier})")
        current = nxt
        waves.append(_make_frontier(len(waves), current))
    return PathEnumeration(waves, waves[-1], explored)


def frontier_csv(waves: Sequence[Frontier]) -> str:
    """One row per allocation: wave, holdings by agent, utilities."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["wave", "allocation", "utilities"])
    for fr in waves:
        for alloc, u in zip(fr.allocations, fr.utilities):
            text = " | ".join(" ".join(str(v) for v in row) for row in alloc)
            writer.writerow([fr.wave, text, " ".join(format_number(v) for v in u)])
    return buf.getvalue()
