"""Statistics on valued agent networks produced by a trade sequence.

Assortativity between utility gradients, trade intensity and strengths;
weighted and binary clustering; conditionally uniform null models for
p-values; least-squares growth curves.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ResourceLimitError

TYPE1, TYPE2, TYPE3 = "type1", "type2", "type3"
FIXED_TOTAL, FIXED_ROWS = "fixed_total", "fixed_rows"
FAMILIES = ("linear", "exponential", "power")


@dataclass(frozen=True)
class ValuedNetwork:
    """Symmetric nonnegative matrix with zero diagonal."""

    matrix: np.ndarray

    def __post_init__(self):
        mat = np.array(self.matrix, dtype=float)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise ValueError("network matrix must be square")
        if not np.array_equal(mat, mat.T):
            raise ValueError("network matrix must be symmetric")
        if np.any(np.diag(mat) != 0):
            raise ValueError("network matrix must have a zero diagonal")
        if np.any(mat < 0):
            raise ValueError("network values must be nonnegative")
        mat.setflags(write=False)
        object.__setattr__(self, "matrix", mat)

    @classmethod
    def from_log(cls, log, which: str = "interaction") -> "ValuedNetwork":
        if which == "interaction":
            return cls(np.asarray(log.interaction, dtype=float))
        if which == "flow":
            return cls(np.array([[float(v) for v in row] for row in log.flow]))
        raise ValueError(f"unknown network {which!r}")

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def strengths(self) -> np.ndarray:
        return self.matrix.sum(axis=1)

    @property
    def total(self) -> float:
        return float(np.triu(self.matrix, 1).sum())

    def pair_values(self) -> np.ndarray:
        iu = np.triu_indices(self.n, 1)
        return self.matrix[iu]

    def relabel(self, perm) -> "ValuedNetwork":
        perm = np.asarray(perm)
        return ValuedNetwork(self.matrix[np.ix_(perm, perm)])


def pearson(a, b) -> float:
    """Pearson correlation, ``nan`` when either side has zero variance."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2:
        return math.nan
    da, db = a - a.mean(), b - b.mean()
    sa, sb = math.sqrt(float(da @ da)), math.sqrt(float(db @ db))
    if sa == 0.0 or sb == 0.0:
        return math.nan
    return float(np.clip((da @ db) / (sa * sb), -1.0, 1.0))


def _pair_distances(rows: np.ndarray) -> np.ndarray:
    n = rows.shape[0]
    iu = np.triu_indices(n, 1)
    diff = rows[iu[0]] - rows[iu[1]]
    return np.sqrt((diff * diff).sum(axis=1))


def assortativity(net: ValuedNetwork, c_rows, kind: str = TYPE1) -> float:
    """Pearson correlation over unordered pairs ``h < k``.

    type1: gradient distance vs. pair value; type2: strength distance vs.
    pair value; type3: gradient distance vs. strength distance.
    """
    if net.n < 3:
        raise ValueError("assortativity needs at least three nodes")
    c = np.asarray(c_rows, dtype=float)
    if c.ndim != 2 or c.shape[0] != net.n:
        raise ValueError("need one utility-gradient row per node")
    dc = _pair_distances(c)
    df = _pair_distances(net.strengths[:, None])
    x = net.pair_values()
    if kind == TYPE1:
        return pearson(dc, x)
    if kind == TYPE2:
        return pearson(df, x)
    if kind == TYPE3:
        return pearson(dc, df)
    raise ValueError(f"unknown assortativity kind {kind!r}")


def strength_assortativity(net: ValuedNetwork) -> float:
    """Correlation of endpoint strengths over edges, each edge weighted by its value."""
    f = net.strengths
    hs, ks = np.nonzero(net.matrix)
    if hs.size == 0:
        return math.nan
    w = net.matrix[hs, ks]
    a, b = f[hs], f[ks]
    wsum = w.sum()
    ma, mb = (w * a).sum() / wsum, (w * b).sum() / wsum
    cov = (w * (a - ma) * (b - mb)).sum()
    va = (w * (a - ma) ** 2).sum()
    vb = (w * (b - mb) ** 2).sum()
    if va <= 0 or vb <= 0:
        return math.nan
    return float(np.clip(cov / math.sqrt(va * vb), -1.0, 1.0))


def local_weighted_clustering(net: ValuedNetwork) -> np.ndarray:
    """Barrat coefficient per node; ``nan`` for isolated nodes, 0 for degree one.

    ``C_i = sum_{j,h} (w_ij + w_ih)/2 a_ij a_ih a_jh / (s_i (k_i - 1))``.
    """
    w = net.matrix
    a = (w > 0).astype(float)
    k = a.sum(axis=1)
    s = w.sum(axis=1)
    out = np.full(net.n, math.nan)
    for i in range(net.n):
        if k[i] == 0:
            continue
        if k[i] < 2:
            out[i] = 0.0
            continue
        nb = np.flatnonzero(a[i])
        tri = 0.0
        for j in nb:
            for h in nb:
                if j != h and a[j, h]:
                    tri += (w[i, j] + w[i, h]) / 2.0
        out[i] = tri / (s[i] * (k[i] - 1))
    return out


def weighted_clustering(net: ValuedNetwork) -> float:
    """Barrat weighted clustering averaged over non-isolated nodes."""
    if net.n < 3:
        raise ValueError("clustering needs at least three nodes")
    vals = local_weighted_clustering(net)
    vals = vals[~np.isnan(vals)]
    return float(vals.mean()) if vals.size else math.nan


def binary_clustering(net: ValuedNetwork) -> float:
    """Average local clustering of the graph with edges where the value is positive."""
    if net.n < 3:
        raise ValueError("clustering needs at least three nodes")
    return weighted_clustering(ValuedNetwork((net.matrix > 0).astype(float)))


# -- null models ---------------------------------------------------------------


def _composition(rng: np.random.Generator, total: int, parts: int) -> np.ndarray:
    """Uniform weak composition of ``total`` into ``parts`` cells (stars and bars)."""
    if parts == 1:
        return np.array([total], dtype=np.int64)
    bars = np.sort(rng.choice(total + parts - 1, size=parts - 1, replace=False))
    edges = np.concatenate([[-1], bars, [total + parts - 1]])
    return np.diff(edges) - 1


def _from_upper(n: int, values) -> np.ndarray:
    mat = np.zeros((n, n), dtype=np.int64)
    iu = np.triu_indices(n, 1)
    mat[iu] = values
    return mat + mat.T


def _integer_matrix(net: ValuedNetwork) -> np.ndarray:
    mat = net.matrix
    if not np.all(mat == np.round(mat)):
        raise ValueError("null models need an integer-valued network")
    return mat.astype(np.int64)


def _check_degrees(rows) -> None:
    rows = np.asarray(rows, dtype=np.int64)
    if np.any(rows < 0):
        raise ValueError("row sums must be nonnegative")
    total = int(rows.sum())
    if total % 2:
        raise ValueError("row sums of a symmetric matrix must add up to an even number")
    if rows.size and 2 * int(rows.max()) > total:
        raise ValueError("a row sum exceeds the sum of all other rows")


class _RowCounter:
    """Number of symmetric zero-diagonal completions, cell by cell.

    The upper triangle is filled row by row; a state is the current cell
    plus the residual row sums.  ``count`` memoises on states and gives up
    once more than ``max_states`` are stored.
    """

    def __init__(self, rows, max_states: int):
        self.n = len(rows)
        self.rows = tuple(int(v) for v in rows)
        self.max_states = max_states
        self.memo: dict = {}

    def count(self, i: int, k: int, res: tuple) -> int:
        n = self.n
        if k == n:
            if res[i]:
                return 0
            i, k = i + 1, i + 2
        if i >= n - 1:
            return int(all(v == 0 for v in res))
        if res[i] > sum(res[k:]):
            return 0
        key = (i, k, res)
        hit = self.memo.get(key)
        if hit is not None:
            return hit
        if len(self.memo) >= self.max_states:
            raise ResourceLimitError("row-sum state space too large for exact counting")
        total = 0
        for v in range(min(res[i], res[k]) + 1):
            total += self.count(i, k + 1, _spend(res, i, k, v))
        self.memo[key] = total
        return total

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        n = self.n
        mat = np.zeros((n, n), dtype=np.int64)
        res = self.rows
        i, k = 0, 1
        while i < n - 1:
            if k == n:
                i, k = i + 1, i + 2
                continue
            weights = [self.count(i, k + 1, _spend(res, i, k, v)) for v in range(min(res[i], res[k]) + 1)]
            total = sum(weights)
            pick = int(rng.integers(total)) if total < 2 ** 63 else _big_randbelow(rng, total)
            v = 0
            while pick >= weights[v]:
                pick -= weights[v]
                v += 1
            mat[i, k] = mat[k, i] = v
            res = _spend(res, i, k, v)
            k += 1
        return mat


def _spend(res: tuple, i: int, k: int, v: int) -> tuple:
    out = list(res)
    out[i] -= v
    out[k] -= v
    return tuple(out)


def _big_randbelow(rng: np.random.Generator, bound: int) -> int:
    nbits = bound.bit_length()
    while True:
        words = rng.integers(0, 2 ** 32, size=(nbits + 31) // 32, dtype=np.uint64)
        v = 0
        for w in words:
            v = (v << 32) | int(w)
        v >>= 32 * len(words) - nbits
        if v < bound:
            return v


def _fixed_rows_mcmc(rng, start: np.ndarray, steps: int) -> np.ndarray:
    """Alternating four-cycle moves; each move keeps every row sum."""
    mat = start.copy()
    n = mat.shape[0]
    for _ in range(steps):
        a, b, c, d = rng.choice(n, size=4, replace=False)
        if mat[b, c] > 0 and mat[d, a] > 0:
            for (u, v), delta in (((a, b), 1), ((b, c), -1), ((c, d), 1), ((d, a), -1)):
                mat[u, v] += delta
                mat[v, u] += delta
    return mat


class NullSample(NamedTuple):
    networks: list
    sampler: str


def sample_null(net: ValuedNetwork, model: str, samples: int, seed: int,
                max_states: int = 200_000, mcmc_steps: int | None = None) -> NullSample:
    """Networks drawn uniformly from those sharing ``net``'s total or row sums.

    ``fixed_total`` is exact (stars and bars over the upper triangle).
    ``fixed_rows`` is exact by counting completions cell by cell; when the
    count needs more than ``max_states`` memoised states the draws come
    from a four-cycle Markov chain started at ``net`` instead, and the
    returned ``sampler`` says so.  Each draw uses its own child of the
    master seed.
    """
    mat = _integer_matrix(net)
    n = net.n
    children = np.random.SeedSequence(seed).spawn(samples)
    if model == FIXED_TOTAL:
        total = int(np.triu(mat, 1).sum())
        cells = n * (n - 1) // 2
        if cells == 0:
            return NullSample([ValuedNetwork(np.zeros((n, n))) for _ in range(samples)], "exact")
        out = [ValuedNetwork(_from_upper(n, _composition(np.random.default_rng(c), total, cells)))
               for c in children]
        return NullSample(out, "exact")
    if model != FIXED_ROWS:
        raise ValueError(f"unknown null model {model!r}")
    rows = mat.sum(axis=1)
    _check_degrees(rows)
    counter = _RowCounter(rows, max_states)
    try:
        counter.count(0, 1, counter.rows)
    except ResourceLimitError:
        counter = None
    if counter is not None:
        return NullSample([ValuedNetwork(counter.sample(np.random.default_rng(c))) for c in children], "exact")
    warnings.warn("row-sum space too large for exact sampling; using a four-cycle chain")
    if n < 4:
        raise ResourceLimitError("no four-cycle moves on fewer than four nodes")
    steps = mcmc_steps if mcmc_steps is not None else 50 * n * n
    chain = mat
    out = []
    for c in children:
        chain = _fixed_rows_mcmc(np.random.default_rng(c), chain, steps)
        out.append(ValuedNetwork(chain))
    return NullSample(out, "mcmc")


def null_pvalue(observed: float, null_values: Sequence[float], tail: str = "left") -> float:
    """Tail proportion with add-one smoothing: ``(1 + #extreme) / (N + 1)``."""
    vals = np.asarray([v for v in null_values if not math.isnan(v)], dtype=float)
    if vals.size < 100:
        raise ValueError("need at least 100 defined null values")
    if tail == "left":
        hits = int((vals <= observed).sum())
    elif tail == "right":
        hits = int((vals >= observed).sum())
    else:
        raise ValueError(f"unknown tail {tail!r}")
    return (1 + hits) / (vals.size + 1)


class StatRow(NamedTuple):
    network: str
    prop: str
    mean: float
    std: float
    observed: float
    p_value: float
    sampler: str


NETWORK_PROPERTIES = {
    "AC": strength_assortativity,
    "CC": weighted_clustering,
    "CC_binary": binary_clustering,
}


def network_statistics(name: str, net: ValuedNetwork, model: str, samples: int, seed: int,
                       tail: str = "left") -> list:
    """Observed value, null mean/std and p-value for every network property."""
    null = sample_null(net, model, samples, seed)
    rows = []
    for prop, fn in NETWORK_PROPERTIES.items():
        vals = np.array([fn(s) for s in null.networks])
        defined = vals[~np.isnan(vals)]
        obs = fn(net)
        if defined.size >= 100 and not math.isnan(obs):
            p = null_pvalue(obs, defined, tail)
        else:
            p = math.nan
        mean = float(defined.mean()) if defined.size else math.nan
        std = float(defined.std(ddof=1)) if defined.size > 1 else math.nan
        rows.append(StatRow(name, prop, mean, std, obs, p, f"{model}:{null.sampler}"))
    return rows


def stats_csv(rows: Sequence[StatRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["network", "property", "sample_mean", "sample_std", "observed", "p_value", "null_sampler"])
    for r in rows:
        writer.writerow([r.network, r.prop] + [repr(float(v)) for v in (r.mean, r.std, r.observed, r.p_value)]
                        + [r.sampler])
    return buf.getvalue()


# -- curve fitting -------------------------------------------------------------


@dataclass(frozen=True)
class CurveFit:
    """``y = b0 + b1 x``, ``y = b0 exp(b1 x)`` or ``y = b0 x^b1``; R^2 on the fitting scale."""

    family: str
    beta0: float
    beta1: float
    r_squared: float

    def predict(self, x):
        x = np.asarray(x, dtype=float)
        if self.family == "linear":
            return self.beta0 + self.beta1 * x
        if self.family == "exponential":
            return self.beta0 * np.exp(self.beta1 * x)
        return self.beta0 * x ** self.beta1


def fitting_scale(points, family: str) -> tuple:
    """Design columns and response on which the least-squares problem is posed."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be (x, y) pairs")
    if pts.shape[0] < 3:
        raise ValueError("need at least three points")
    x, y = pts[:, 0], pts[:, 1]
    if family == "linear":
        return x, y
    if np.any(y <= 0):
        raise ValueError(f"{family} fit needs positive y")
    if family == "exponential":
        return x, np.log(y)
    if family == "power":
        if np.any(x <= 0):
            raise ValueError("power fit needs positive x")
        return np.log(x), np.log(y)
    raise ValueError(f"unknown curve family {family!r}")


def fit_curve(points, family: str = "power") -> CurveFit:
    u, v = fitting_scale(points, family)
    A = np.column_stack([np.ones_like(u), u])
    coef, *_ = np.linalg.lstsq(A, v, rcond=None)
    resid = v - A @ coef
    ss_tot = float(((v - v.mean()) ** 2).sum())
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    b0 = float(coef[0]) if family == "linear" else float(math.exp(coef[0]))
    return CurveFit(family, b0, float(coef[1]), max(0.0, min(1.0, r2)))
