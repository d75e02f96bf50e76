"""Exchange economy at fixed prices: instances, utilities and feasibility.

Prices and weights are exact rationals so every feasibility decision is
made in exact arithmetic.  Utilities are either linear (rational gradient,
exact values) or CARA, ``u(x) = offset - sum_j exp(-a_j x_j)``, evaluated in
floating point.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property
from typing import Any, NamedTuple, Sequence

import numpy as np

from .errors import InvalidInstanceError

LINEAR = "linear"
CARA = "cara"


def to_fraction(value: Any) -> Fraction:
    """Parse an int, ``"num/den"`` string, Fraction or decimal float."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise InvalidInstanceError(f"not a rational: {value!r}")
    if isinstance(value, (int, np.integer)):
        return Fraction(int(value))
    if isinstance(value, float):
        if not math.isfinite(value):
            raise InvalidInstanceError(f"not a rational: {value!r}")
        return Fraction(repr(value))
    if isinstance(value, str):
        try:
            return Fraction(value.strip())
        except (ValueError, ZeroDivisionError) as exc:
            raise InvalidInstanceError(f"not a rational: {value!r}") from exc
    raise InvalidInstanceError(f"not a rational: {value!r}")


def fraction_to_json(value: Fraction) -> int | str:
    value = Fraction(value)
    if value.denominator == 1:
        return value.numerator
    return f"{value.numerator}/{value.denominator}"


def format_number(value: Any) -> str:
    """Text form used in CSV output: exact for rationals, repr for floats."""
    if isinstance(value, Fraction):
        return str(fraction_to_json(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


@dataclass(frozen=True)
class UtilitySpec:
    """Separable utility of a single agent.

    ``coefficients`` holds the gradient ``c`` for linear utilities (exact
    rationals) or the CARA coefficients ``a`` (positive floats).
    """

    kind: str
    coefficients: tuple
    offset: float = 0.0

    @classmethod
    def linear(cls, c: Sequence[Any]) -> "UtilitySpec":
        return cls(LINEAR, tuple(to_fraction(v) for v in c))

    @classmethod
    def cara(cls, a: Sequence[float], offset: float = 0.0) -> "UtilitySpec":
        return cls(CARA, tuple(float(v) for v in a), float(offset))

    @property
    def is_linear(self) -> bool:
        return self.kind == LINEAR

    def value(self, row: Sequence[int]):
        if self.kind == LINEAR:
            return sum((c * int(v) for c, v in zip(self.coefficients, row)), Fraction(0))
        return self.offset - sum(math.exp(-a * float(v)) for a, v in zip(self.coefficients, row))

    def gradient(self, row: Sequence[float]) -> tuple:
        if self.kind == LINEAR:
            return self.coefficients
        return tuple(a * math.exp(-a * float(v)) for a, v in zip(self.coefficients, row))

    def hessian_diag(self, row: Sequence[float]) -> np.ndarray:
        """Diagonal of the Hessian (the utility is separable)."""
        if self.kind == LINEAR:
            return np.zeros(len(self.coefficients))
        a = np.asarray(self.coefficients, dtype=float)
        return -a * a * np.exp(-a * np.asarray(row, dtype=float))

    def to_dict(self) -> dict:
        if self.kind == LINEAR:
            return {"kind": LINEAR, "c": [fraction_to_json(c) for c in self.coefficients]}
        return {"kind": CARA, "a": list(self.coefficients), "offset": self.offset}

    @classmethod
    def from_dict(cls, data: dict) -> "UtilitySpec":
        kind = data.get("kind")
        if kind == LINEAR:
            return cls.linear(data["c"])
        if kind == CARA:
            return cls.cara(data["a"], data.get("offset", 0.0))
        raise InvalidInstanceError(f"unknown utility kind {kind!r}")


def _int_matrix(rows: Any, name: str) -> tuple[tuple[int, ...], ...]:
    out = []
    for row in rows:
        vals = []
        for v in row:
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                if isinstance(v, float) and v.is_integer():
                    v = int(v)
                else:
                    raise InvalidInstanceError(f"{name} must hold integers, got {v!r}")
            vals.append(int(v))
        out.append(tuple(vals))
    return tuple(out)


@dataclass(frozen=True)
class EconomyInstance:
    """Immutable description of a fixed-price exchange economy.

    Agents and commodities are indexed from zero.  ``rationing`` is the pair
    ``(l, L)`` of per-commodity bounds on the change of a holding in a single
    reallocation; ``capacities`` caps every holding ``x[h, j]``.
    ``network`` optionally lists the agent pairs allowed to trade.
    """

    prices: tuple
    weights: tuple
    endowments: tuple
    utilities: tuple
    rationing: tuple | None = None
    capacities: tuple | None = None
    network: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "prices", tuple(to_fraction(p) for p in self.prices))
        object.__setattr__(self, "weights", tuple(to_fraction(d) for d in self.weights))
        object.__setattr__(self, "endowments", _int_matrix(self.endowments, "endowments"))
        utils = tuple(u if isinstance(u, UtilitySpec) else UtilitySpec.from_dict(u) for u in self.utilities)
        object.__setattr__(self, "utilities", utils)
        if self.rationing is not None:
            low, high = self.rationing
            object.__setattr__(self, "rationing", _int_matrix([low, high], "rationing"))
        if self.capacities is not None:
            object.__setattr__(self, "capacities", _int_matrix(self.capacities, "capacities"))
        if self.network is not None:
            edges = tuple(sorted({(min(int(a), int(b)), max(int(a), int(b))) for a, b in self.network}))
            object.__setattr__(self, "network", edges)

    @property
    def n_agents(self) -> int:
        return len(self.endowments)

    @property
    def n_commodities(self) -> int:
        return len(self.prices)

    @cached_property
    def q(self) -> np.ndarray:
        arr = np.array(self.endowments, dtype=np.int64).reshape(self.n_agents, self.n_commodities)
        arr.flags.writeable = False
        return arr

    @cached_property
    def budgets(self) -> tuple:
        """Exact budget ``P . q^h`` of every agent."""
        return tuple(sum((p * v for p, v in zip(self.prices, row)), Fraction(0)) for row in self.endowments)

    @cached_property
    def supplies(self) -> tuple:
        """Exact weighted supply ``sum_h d^h q_j^h`` of every commodity."""
        return tuple(
            sum((d * row[j] for d, row in zip(self.weights, self.endowments)), Fraction(0))
            for j in range(self.n_commodities)
        )

    @property
    def all_linear(self) -> bool:
        return all(u.is_linear for u in self.utilities)

    def replace(self, **changes) -> "EconomyInstance":
        data = {
            "prices": self.prices,
            "weights": self.weights,
            "endowments": self.endowments,
            "utilities": self.utilities,
            "rationing": self.rationing,
            "capacities": self.capacities,
            "network": self.network,
        }
        data.update(changes)
        return EconomyInstance(**data)

    # -- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        data: dict[str, Any] = {
            "n": self.n_agents,
            "m": self.n_commodities,
            "prices": [fraction_to_json(p) for p in self.prices],
            "weights": [fraction_to_json(d) for d in self.weights],
            "endowments": [list(row) for row in self.endowments],
            "utilities": [u.to_dict() for u in self.utilities],
        }
        if self.rationing is not None:
            data["rationing"] = {"l": list(self.rationing[0]), "L": list(self.rationing[1])}
        if self.capacities is not None:
            data["capacities"] = [list(row) for row in self.capacities]
        if self.network is not None:
            data["network"] = {"edges": [list(e) for e in self.network]}
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "EconomyInstance":
        try:
            rationing = data.get("rationing")
            if isinstance(rationing, dict):
                rationing = (rationing["l"], rationing["L"])
            capacities = data.get("capacities")
            network = data.get("network")
            edges = None
            if network is not None:
                edges = [tuple(e) for e in network.get("edges", [])]
                if capacities is None and network.get("capacities") is not None:
                    capacities = network["capacities"]
            inst = cls(
                prices=data["prices"],
                weights=data["weights"],
                endowments=data["endowments"],
                utilities=[UtilitySpec.from_dict(u) for u in data["utilities"]],
                rationing=rationing,
                capacities=capacities,
                network=edges,
            )
        except (KeyError, TypeError) as exc:
            raise InvalidInstanceError(f"malformed instance document: {exc}") from exc
        for key, actual in (("n", inst.n_agents), ("m", inst.n_commodities)):
            if key in data and int(data[key]) != actual:
                raise InvalidInstanceError(f"declared {key}={data[key]} but data has {actual}")
        return inst

    @classmethod
    def from_json(cls, text: str) -> "EconomyInstance":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidInstanceError(f"invalid JSON: {exc}") from exc
        return cls.from_dict(data)


def load_instance(path) -> EconomyInstance:
    with open(path, encoding="utf-8") as fh:
        return EconomyInstance.from_json(fh.read())


def save_instance(inst: EconomyInstance, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(inst.to_json())


def validate_instance(inst: EconomyInstance) -> str | None:
    """Return ``None`` when the instance is valid, else the first violation."""
    n, m = inst.n_agents, inst.n_commodities
    if n < 1 or m < 1:
        return "at least one agent and one commodity required"
    if any(p <= 0 for p in inst.prices):
        return "price must be positive"
    if len(inst.weights) != n:
        return "one weight per agent required"
    if any(d <= 0 for d in inst.weights):
        return "weight must be positive"
    if any(len(row) != m for row in inst.endowments):
        return "endowment rows must have one entry per commodity"
    if any(v < 0 for row in inst.endowments for v in row):
        return "endowments must be nonnegative"
    if len(inst.utilities) != n:
        return "one utility per agent required"
    for u in inst.utilities:
        if u.kind not in (LINEAR, CARA):
            return f"unknown utility kind {u.kind!r}"
        if len(u.coefficients) != m:
            return "utility coefficients must have one entry per commodity"
        if u.kind == LINEAR and any(c < 0 for c in u.coefficients):
            return "linear utility gradient must be nonnegative"
        if u.kind == CARA and not all(a > 0 and math.isfinite(a) for a in u.coefficients):
            return "cara coefficients must be positive"
    if inst.rationing is not None:
        low, high = inst.rationing
        if len(low) != m or len(high) != m:
            return "rationing bounds need one entry per commodity"
        if any(lo > 0 for lo in low) or any(hi < 0 for hi in high):
            return "L >= 0 >= l required"
    if inst.capacities is not None:
        if len(inst.capacities) != n or any(len(row) != m for row in inst.capacities):
            return "capacities must be an n x m matrix"
        if any(c < 0 for row in inst.capacities for c in row):
            return "capacities must be nonnegative"
        if any(q > c for qr, cr in zip(inst.endowments, inst.capacities) for q, c in zip(qr, cr)):
            return "endowments exceed capacities"
    if inst.network is not None:
        for a, b in inst.network:
            if a == b:
                return "network self-loop"
            if not (0 <= a < n and 0 <= b < n):
                return "network edge refers to unknown agent"
    return None


def require_valid(inst: EconomyInstance) -> None:
    problem = validate_instance(inst)
    if problem is not None:
        raise InvalidInstanceError(problem)


class Feasibility(NamedTuple):
    ok: bool
    violated: list

    def __bool__(self) -> bool:
        return self.ok


def as_allocation(x: Any, inst: EconomyInstance | None = None) -> np.ndarray:
    """Copy ``x`` into a read-only int64 matrix, checking shape against ``inst``."""
    arr = np.array(x)
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise InvalidInstanceError("allocation entries must be integers")
    arr = arr.astype(np.int64)
    if inst is not None and arr.shape != (inst.n_agents, inst.n_commodities):
        raise InvalidInstanceError(
            f"allocation shape {arr.shape} != ({inst.n_agents}, {inst.n_commodities})"
        )
    arr.flags.writeable = False
    return arr


def is_feasible(inst: EconomyInstance, x: Any) -> Feasibility:
    """Check budgets, weighted conservation, nonnegativity and capacities exactly."""
    x = as_allocation(x, inst)
    violated = []
    rows = [[int(v) for v in row] for row in x]
    for h, row in enumerate(rows):
        if any(v < 0 for v in row):
            violated.append(f"nonnegativity agent {h}")
        spent = sum((p * v for p, v in zip(inst.prices, row)), Fraction(0))
        if spent != inst.budgets[h]:
            violated.append(f"budget agent {h}")
    for j in range(inst.n_commodities):
        total = sum((d * row[j] for d, row in zip(inst.weights, rows)), Fraction(0))
        if total != inst.supplies[j]:
            violated.append(f"conservation commodity {j}")
    if inst.capacities is not None:
        for h, (row, cap) in enumerate(zip(rows, inst.capacities)):
            if any(v > c for v, c in zip(row, cap)):
                violated.append(f"capacity agent {h}")
    return Feasibility(not violated, violated)


def _check_agent(inst: EconomyInstance, h: int) -> None:
    if not 0 <= h < inst.n_agents:
        raise IndexError(f"agent index {h} out of range")


def utility(inst: EconomyInstance, h: int, x: Any):
    """Utility of agent ``h``; exact Fraction for linear, float for CARA."""
    _check_agent(inst, h)
    return inst.utilities[h].value(np.asarray(x)[h])


def utility_vector(inst: EconomyInstance, x: Any) -> tuple:
    x = np.asarray(x)
    return tuple(u.value(x[h]) for h, u in enumerate(inst.utilities))


def utility_gradient(inst: EconomyInstance, h: int, x: Any) -> tuple:
    _check_agent(inst, h)
    return inst.utilities[h].gradient(np.asarray(x)[h])
