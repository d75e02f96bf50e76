"""Random instance generation and the experiment runner behind the CLI."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .economy import EconomyInstance, UtilitySpec, format_number, utility_vector
from .errors import InvalidInstanceError, NotConvergedError
from .instances import worked_example
from .ipm import relaxation, run_ipm
from .network import TradeNetwork, check_flow_balance, run_network_ser
from .netstats import CurveFit, FAMILIES, fit_curve
from .oracle import branch_and_bound_linear
from .pareto import enumerate_paths, frontier_csv
from .ser import SearchConfig, run_ser, welfare

KINDS = ("ser_vs_bnb", "scaling", "factors", "network_topologies", "path_enumeration", "ipm_trace")
DEFAULT_LEVELS = (0.0, 0.4, 0.8)


def sub_seed(master: int, *names) -> int:
    """Deterministic child seed for a named stage; ``names`` may mix str and int."""
    key = [int(master) & 0xFFFFFFFF]
    for name in names:
        key.append(zlib.crc32(name.encode()) if isinstance(name, str) else int(name) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(key).generate_state(1)[0])


@dataclass(frozen=True)
class Factors:
    """Price spread and rank association between endowments and utility gradients.

    ``same``: each agent's gradient row against its own endowment row.
    ``cross``: agent ``h``'s endowment row against the gradient row of
    agent ``h + 1`` (cyclically).
    """

    price_sigma: float = 0.5
    same: float = 0.0
    cross: float = 0.0


def _spearman(a, b) -> float:
    r = spearmanr(a, b).statistic
    return float(r) if np.isfinite(r) else 0.0


def _associated_order(rng, values, targets: list, levels: list, sweeps: int = 8):
    """Arrangement of ``values`` whose Spearman correlation with each target
    row is at least the matching level.

    Starts from the arrangement sorted by a rank-weighted score of the
    targets and applies random transpositions, each kept only if no
    constraint that currently holds is broken.  A single target is always
    met; two targets can contradict each other, and then the result is
    only as close as the transpositions get.
    """
    m = len(values)
    vals = np.sort(np.asarray(values))
    active = [(t, lv) for t, lv in zip(targets, levels) if lv > 0]
    if active:
        score = sum(lv * np.argsort(np.argsort(t)) for t, lv in active)
        order = np.argsort(np.argsort(score, kind="stable"), kind="stable")
    else:
        order = rng.permutation(m)
    arr = vals[order]
    for _ in range(sweeps * m):
        a, b = rng.choice(m, size=2, replace=False) if m > 1 else (0, 0)
        trial = arr.copy()
        trial[a], trial[b] = trial[b], trial[a]
        if all(_spearman(trial, t) >= min(lv, _spearman(arr, t)) for t, lv in active):
            arr = trial
    return arr


def generate_instance(n: int, m: int, seed: int, factors: Factors = Factors(),
                      utility: str = "linear") -> EconomyInstance:
    """Random economy with unit weights.

    Prices are ``exp(sigma z)`` rounded to tenths (all 1 when ``sigma = 0``);
    each endowment row holds ``m`` distinct integers from ``0..3m``; gradient
    rows are ``m`` distinct integers (linear) or tenths (cara) rearranged to
    meet the association levels.
    """
    if n < 1 or m < 1:
        raise InvalidInstanceError("need at least one agent and one commodity")
    rng = np.random.default_rng(sub_seed(seed, "instance", n, m))
    if factors.price_sigma == 0:
        prices = tuple(Fraction(1) for _ in range(m))
    else:
        z = rng.standard_normal(m)
        prices = tuple(Fraction(max(1, round(10 * math.exp(factors.price_sigma * v))), 10) for v in z)
    q = np.array([rng.choice(3 * m + 1, size=m, replace=False) for _ in range(n)], dtype=np.int64)
    # every commodity present and every agent endowed
    for j in range(m):
        if q[:, j].sum() == 0:
            q[rng.integers(n), j] = 1
    utilities = []
    for h in range(n):
        raw = rng.choice(np.arange(1, 3 * m + 1), size=m, replace=False)
        row = _associated_order(rng, raw, [q[h], q[(h - 1) % n]], [factors.same, factors.cross])
        if utility == "linear":
            utilities.append(UtilitySpec.linear([int(v) for v in row]))
        elif utility == "cara":
            utilities.append(UtilitySpec.cara([float(v) / (30.0 * m) for v in row], offset=float(m)))
        else:
            raise InvalidInstanceError(f"unknown utility kind {utility!r}")
    return EconomyInstance(prices=prices, weights=tuple(1 for _ in range(n)),
                           endowments=tuple(tuple(int(v) for v in row) for row in q),
                           utilities=tuple(utilities))


def association(inst: EconomyInstance, h: int, partner: int | None = None) -> float:
    """Spearman correlation between agent ``h``'s endowments and a gradient row."""
    k = h if partner is None else partner
    return _spearman(inst.endowments[h], inst.utilities[k].coefficients)


# -- experiment spec ----------------------------------------------------------


@dataclass
class ExperimentSpec:
    kind: str
    sizes: list = field(default_factory=lambda: [4])
    replicates: int = 1
    seed: int = 0
    price_sigma: list = field(default_factory=lambda: list(DEFAULT_LEVELS))
    same: list = field(default_factory=lambda: list(DEFAULT_LEVELS))
    cross: list = field(default_factory=lambda: list(DEFAULT_LEVELS))
    utility: str = "linear"
    mode: str = "best_improve"
    objective: str = "welfare"
    topologies: list = field(default_factory=lambda: ["complete", "star", "ring"])
    instance: dict | str | None = None  # instance dict or "worked_example"
    workers: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInstanceError(f"unknown experiment kind {self.kind!r}")
        if self.replicates < 1 or not self.sizes or any(int(s) < 1 for s in self.sizes):
            raise InvalidInstanceError("need positive sizes and at least one replicate")
        self.sizes = sorted(int(s) for s in self.sizes)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise InvalidInstanceError(f"unknown experiment fields: {sorted(extra)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentSpec":
        try:
            return cls.from_dict(json.loads(text))
        except (json.JSONDecodeError, TypeError) as exc:
            raise InvalidInstanceError(f"bad experiment spec: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def cells(self) -> list:
        """Deterministic (size, replicate) grid."""
        return [(s, r) for s in self.sizes for r in range(self.replicates)]

    def search_config(self) -> SearchConfig:
        return SearchConfig(mode=self.mode, objective=self.objective)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_number(v) if isinstance(v, Fraction) else v for v in row])
    return buf.getvalue()


def _attach_seed(exc: Exception, seed: int) -> Exception:
    exc.instance_seed = seed
    exc.args = (f"{exc.args[0] if exc.args else exc} (instance seed {seed})",) + tuple(exc.args[1:])
    return exc


def _parallel(spec: ExperimentSpec, fn, items) -> list:
    if spec.workers > 1:
        with ThreadPoolExecutor(spec.workers) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


def _instance_for(spec: ExperimentSpec, stage: str, size: int, rep: int, factors=None):
    seed = sub_seed(spec.seed, stage, size, rep)
    facs = factors or Factors(price_sigma=spec.price_sigma[len(spec.price_sigma) // 2] if spec.price_sigma else 0.5)
    return seed, generate_instance(size, size, seed, facs, spec.utility)


def _ser_vs_bnb(spec: ExperimentSpec) -> dict:
    def cell(item):
        size, rep = item
        seed, inst = _instance_for(spec, "ser_vs_bnb", size, rep)
        before = inst.to_json()
        try:
            u0 = utility_vector(inst, inst.q)
            first = run_ser(inst, SearchConfig(mode="first_improve", objective=spec.objective))
            best = run_ser(inst, SearchConfig(mode="best_improve", objective=spec.objective))
            opt = branch_and_bound_linear(inst).welfare if inst.all_linear else ""
        except Exception as exc:
            raise _attach_seed(exc, seed)
        assert inst.to_json() == before
        wf = welfare(list(utility_vector(inst, first.final)))
        wb = welfare(list(utility_vector(inst, best.final)))
        return [size, rep, seed, welfare(list(u0)), f"{first.log.mean_neighborhood:.6g}",
                first.log.erps_solved, best.log.erps_solved, wf, wb, opt]

    rows = _parallel(spec, cell, spec.cells())
    header = ["size", "replicate", "seed", "initial_welfare", "neighborhood_fraction",
              "erps_first", "erps_best", "welfare_first", "welfare_best", "welfare_optimal"]
    return {"ser_vs_bnb.csv": _csv(header, rows)}


def scaling_points(spec: ExperimentSpec) -> list:
    def cell(item):
        size, rep = item
        seed, inst = _instance_for(spec, "scaling", size, rep)
        try:
            res = run_ser(inst, spec.search_config())
        except Exception as exc:
            raise _attach_seed(exc, seed)
        return (size, rep, seed, res.log.erps_solved)

    return _parallel(spec, cell, spec.cells())


def fit_scaling(points) -> dict:
    pts = [(s, e) for s, _, _, e in points if e > 0]
    return {fam: fit_curve(pts, fam) for fam in FAMILIES}


def _scaling(spec: ExperimentSpec) -> dict:
    points = scaling_points(spec)
    fits = fit_scaling(points)
    fit_rows = [[f.family, repr(f.beta0), repr(f.beta1), repr(f.r_squared)] for f in fits.values()]
    return {
        "scaling.csv": _csv(["size", "replicate", "seed", "erps"], points),
        "scaling_fit.csv": _csv(["family", "beta0", "beta1", "r_squared"], fit_rows),
    }


def _factors(spec: ExperimentSpec) -> dict:
    combos = list(itertools.product(spec.price_sigma, spec.same, spec.cross))
    items = [(c, size, rep) for c in combos for size in spec.sizes for rep in range(spec.replicates)]

    def cell(item):
        (sig, same, cross), size, rep = item
        seed = sub_seed(spec.seed, "factors", size, rep, f"{sig}/{same}/{cross}")
        inst = generate_instance(size, size, seed, Factors(sig, same, cross), "linear")
        try:
            pe = enumerate_paths(inst)
        except Exception as exc:
            raise _attach_seed(exc, seed)
        return [sig, same, cross, size, rep, seed, len(pe.terminal), pe.neighborhoods]

    rows = _parallel(spec, cell, items)
    header = ["price_sigma", "same_association", "cross_association", "size", "replicate", "seed",
              "non_dominated", "neighborhoods_explored"]
    return {"factors.csv": _csv(header, rows)}


def _topology(name: str, n: int) -> TradeNetwork:
    if name == "complete":
        return TradeNetwork.complete(n)
    if name == "star":
        return TradeNetwork.star(n)
    if name == "ring":
        return TradeNetwork.ring(n)
    raise InvalidInstanceError(f"unknown topology {name!r}")


def _network_topologies(spec: ExperimentSpec) -> dict:
    items = [(t, s, r) for t in spec.topologies for s, r in spec.cells()]

    def cell(item):
        topo, size, rep = item
        seed, inst = _instance_for(spec, "network", size, rep)
        net = _topology(topo, size)
        try:
            res = run_network_ser(inst, net, spec.search_config())
        except Exception as exc:
            raise _attach_seed(exc, seed)
        balanced = check_flow_balance(inst, net, res.final, res.flows)
        return [topo, size, rep, seed, res.log.converged, res.log.erps_solved,
                f"{res.log.mean_neighborhood:.6g}", welfare(list(utility_vector(inst, res.final))), balanced]

    rows = _parallel(spec, cell, items)
    header = ["topology", "size", "replicate", "seed", "converged", "erps", "neighborhood_fraction",
              "final_welfare", "flow_balanced"]
    return {"network_topologies.csv": _csv(header, rows)}


def _spec_instances(spec: ExperimentSpec, stage: str):
    if spec.instance == "worked_example":
        yield "worked_example", None, worked_example()
        return
    if spec.instance is not None:
        yield "given", None, EconomyInstance.from_dict(spec.instance)
        return
    for size, rep in spec.cells():
        seed, inst = _instance_for(spec, stage, size, rep)
        yield f"{size}_{rep}", seed, inst


def _path_enumeration(spec: ExperimentSpec) -> dict:
    out = {}
    for label, seed, inst in _spec_instances(spec, "paths"):
        try:
            pe = enumerate_paths(inst)
        except Exception as exc:
            raise _attach_seed(exc, seed) if seed is not None else exc
        out[f"paths_{label}.csv"] = frontier_csv(pe.waves)
    return out


def _ipm_trace(spec: ExperimentSpec) -> dict:
    out = {}
    for label, seed, inst in _spec_instances(spec, "ipm"):
        res = run_ipm(relaxation(inst, rational=True), q=inst.q)
        out[f"ipm_{label}.csv"] = res.trace_csv()
        if not res.converged:
            exc = NotConvergedError(f"interior-point method stopped after {res.iterations} iterations")
            raise _attach_seed(exc, seed) if seed is not None else exc
    return out


_RUNNERS = {
    "ser_vs_bnb": _ser_vs_bnb,
    "scaling": _scaling,
    "factors": _factors,
    "network_topologies": _network_topologies,
    "path_enumeration": _path_enumeration,
    "ipm_trace": _ipm_trace,
}


def run_experiment(spec: ExperimentSpec, out_dir=None) -> dict:
    """Run ``spec``; returns ``{file name: CSV text}`` and writes the files to ``out_dir``."""
    reports = _RUNNERS[spec.kind](spec)
    if out_dir is not None:
        path = Path(out_dir)
        path.mkdir(parents=True, exist_ok=True)
        for name, text in reports.items():
            (path / name).write_text(text)
    return reports


def scaling_fit_summary(fits: dict) -> str:
    return "; ".join(f"{f.family}: b0={f.beta0:.4g} b1={f.beta1:.4g} R2={f.r_squared:.4f}"
                     for f in fits.values() if isinstance(f, CurveFit))
