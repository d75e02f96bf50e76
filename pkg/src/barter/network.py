"""Barter restricted to the edges of a trade network, with arc flows."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from .economy import EconomyInstance, InvalidInstanceError, format_number
from .erp import direction
from .ser import SearchConfig, TradeLog, run_ser


@dataclass(frozen=True)
class TradeNetwork:
    """Undirected trade network on ``n`` agents.

    Each edge ``{a, b}`` yields the two arcs ``a -> b`` and ``b -> a``; the
    incidence matrix has ``-1`` at the tail and ``+1`` at the head.
    """

    n_agents: int
    edges: tuple
    capacities: tuple | None = None

    def __post_init__(self):
        clean = set()
        for a, b in self.edges:
            a, b = int(a), int(b)
            if a == b:
                raise InvalidInstanceError("self-loops are not allowed")
            if not (0 <= a < self.n_agents and 0 <= b < self.n_agents):
                raise InvalidInstanceError("edge refers to an unknown agent")
            clean.add((min(a, b), max(a, b)))
        object.__setattr__(self, "edges", tuple(sorted(clean)))
        if self.capacities is not None:
            object.__setattr__(self, "capacities", tuple(tuple(int(v) for v in row) for row in self.capacities))

    @classmethod
    def complete(cls, n: int, capacities=None) -> "TradeNetwork":
        return cls(n, tuple((a, b) for a in range(n) for b in range(a + 1, n)), capacities)

    @classmethod
    def star(cls, n: int, center: int = 0) -> "TradeNetwork":
        return cls(n, tuple((center, b) for b in range(n) if b != center))

    @classmethod
    def ring(cls, n: int) -> "TradeNetwork":
        return cls(n, tuple((a, (a + 1) % n) for a in range(n)))

    @classmethod
    def from_instance(cls, inst: EconomyInstance) -> "TradeNetwork":
        if inst.network is None:
            return cls.complete(inst.n_agents)
        return cls(inst.n_agents, inst.network)

    @property
    def arcs(self) -> tuple:
        return tuple(arc for a, b in self.edges for arc in ((a, b), (b, a)))

    @property
    def incidence(self) -> np.ndarray:
        arcs = self.arcs
        mat = np.zeros((self.n_agents, len(arcs)), dtype=np.int64)
        for col, (tail, head) in enumerate(arcs):
            mat[tail, col] = -1
            mat[head, col] = 1
        return mat

    def components(self) -> list:
        parent = list(range(self.n_agents))

        def find(v):
            while parent[v] != v:
                parent[v] = parent[parent[v]]
                v = parent[v]
            return v

        for a, b in self.edges:
            parent[find(a)] = find(b)
        groups: dict = {}
        for v in range(self.n_agents):
            groups.setdefault(find(v), []).append(v)
        return sorted(groups.values())


@dataclass
class FlowRecord:
    """Gross flow of each commodity along each arc, plus capacity slacks."""

    arcs: tuple
    y: list
    slacks: np.ndarray | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["commodity", "from", "to", "amount"])
        for c, flows in enumerate(self.y):
            for (tail, head), amount in zip(self.arcs, flows):
                if amount:
                    writer.writerow([c, tail, head, format_number(amount)])
        return buf.getvalue()


class NetworkResult(NamedTuple):
    final: np.ndarray
    flows: FlowRecord
    log: TradeLog


def flows_from_log(inst: EconomyInstance, net: TradeNetwork, log: TradeLog) -> list:
    """Accumulate each event's weighted transfers on the direct arc between the traders."""
    index = {arc: col for col, arc in enumerate(net.arcs)}
    y = [[Fraction(0)] * len(index) for _ in range(inst.n_commodities)]
    for ev in log.events:
        d = direction(inst, ev.h, ev.k, ev.i, ev.j)
        for c, s in ((ev.i, d.step[0]), (ev.j, d.step[1])):
            received = inst.weights[ev.h] * s * ev.alpha
            if received > 0:
                y[c][index[(ev.k, ev.h)]] += received
            elif received < 0:
                y[c][index[(ev.h, ev.k)]] -= received
    return y


def run_network_ser(inst: EconomyInstance, net: TradeNetwork,
                    config: SearchConfig = SearchConfig()) -> NetworkResult:
    """Local search where only adjacent agents trade, under the network's capacities."""
    if net.n_agents != inst.n_agents:
        raise InvalidInstanceError("network and instance disagree on the number of agents")
    if net.capacities is not None:
        inst = inst.replace(capacities=net.capacities)
    active = {h for h in range(inst.n_agents) if any(inst.endowments[h])}
    pieces = [comp for comp in net.components() if active.intersection(comp)]
    if len(pieces) > 1:
        warnings.warn(f"trade network splits the economy into {len(pieces)} independent parts")
    final, log, _ = run_ser(inst, config, pairs=list(net.edges))
    y = flows_from_log(inst, net, log)
    slacks = None
    if inst.capacities is not None:
        slacks = np.array(inst.capacities, dtype=np.int64) - final
    return NetworkResult(final, FlowRecord(net.arcs, y, slacks), log)


def check_flow_balance(inst: EconomyInstance, net: TradeNetwork, x_final, flows: FlowRecord) -> bool:
    """Exact check of ``A y_c = D (x_c - q_c)`` for every commodity ``c``."""
    x_final = np.asarray(x_final)
    if len(flows.y) != inst.n_commodities or tuple(flows.arcs) != net.arcs:
        return False
    for c, yc in enumerate(flows.y):
        if any(v < 0 for v in yc):
            return False
        net_in = [Fraction(0)] * inst.n_agents
        for (tail, head), amount in zip(net.arcs, yc):
            net_in[tail] -= amount
            net_in[head] += amount
        for h in range(inst.n_agents):
            if net_in[h] != inst.weights[h] * (int(x_final[h, c]) - inst.endowments[h][c]):
                return False
    return True
