"""Primal-dual interior-point method for the continuous relaxation.

The relaxation maximises ``sum_h alpha_h u^h(x^h)`` over real allocations
subject to the per-agent budget rows, the commodity linking rows (with
nonnegative slacks, or as equalities) and optionally the rationality rows
``u^h(x^h) - u^h(q^h) - s^h = 0`` with ``0 <= s <= u_s``.

Besides the allocation, the solver handles *singleton columns*: variables
that appear in exactly one budget or linking row with coefficient +-1.  The
linking slacks are singletons, and so are the artificial variables of the
elastic phase-one problem used to certify infeasibility.

Each Newton step eliminates the bound duals, reduces the augmented system
with the diagonal budget block, and solves a single m x m system for the
linking duals.  ``newton_direction_dense`` assembles and solves the full
Jacobian instead and serves as a reference.

Variable layout for bound duals: ``z`` pairs with ``x - lower``, ``w`` with
``upper - x``; ``zs``/``ws`` likewise for ``s``; ``zc``/``wc`` for singletons.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .economy import EconomyInstance, LINEAR, require_valid, utility_vector
from .errors import InvalidInstanceError

BUDGET, LINK = 0, 1


@dataclass
class RelaxationProblem:
    prices: np.ndarray
    weights: np.ndarray
    budgets: np.ndarray
    supplies: np.ndarray
    utilities: tuple
    alpha: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    rational: bool = True
    disagreement: np.ndarray | None = None
    s_upper: float = 1.0
    # singleton columns
    sing_row: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    sing_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    sing_coef: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sing_upper: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sing_cost: np.ndarray = field(default_factory=lambda: np.zeros(0))
    n_link_slacks: int = 0

    @property
    def n(self) -> int:
        return len(self.weights)

    @property
    def m(self) -> int:
        return len(self.prices)

    @property
    def free(self) -> np.ndarray:
        return self.upper - self.lower > 0

    def active_rows(self) -> tuple:
        free = self.free
        bud = free.any(axis=1)
        link = free.any(axis=0)
        for kind, idx in zip(self.sing_row, self.sing_idx):
            if kind == BUDGET:
                bud[idx] = True
            else:
                link[idx] = True
        if self.sing_row.size == 0 and link.any():
            # sum_j p_j (linking row j) = sum_h d_h (budget row h): one row is redundant
            link[np.flatnonzero(link)[-1]] = False
        return bud, link

    def values(self, x) -> np.ndarray:
        return np.array([_uval(u, x[h]) for h, u in enumerate(self.utilities)])

    def gradients(self, x) -> np.ndarray:
        return np.array([_ugrad(u, x[h]) for h, u in enumerate(self.utilities)])

    def hessians(self, x) -> np.ndarray:
        return np.array([u.hessian_diag(x[h]) for h, u in enumerate(self.utilities)])

    def welfare(self, x) -> float:
        return float(self.alpha @ self.values(x))

    def without_rationality(self) -> "RelaxationProblem":
        return replace(self, rational=False)


def _uval(u, row) -> float:
    a = np.asarray(u.coefficients, dtype=float)
    if u.kind == LINEAR:
        return float(a @ row)
    return float(u.offset - np.exp(-a * row).sum())


def _ugrad(u, row) -> np.ndarray:
    a = np.asarray(u.coefficients, dtype=float)
    if u.kind == LINEAR:
        return a
    return a * np.exp(-a * row)


def relaxation(inst: EconomyInstance, alpha=None, rational: bool = True, linking: str = "equality",
               lower=None, upper=None, s_scale: float = 1e6) -> RelaxationProblem:
    """Continuous relaxation of ``inst``.

    Holdings of agent ``h`` in commodity ``j`` are bounded by
    ``supply_j / d^h`` unless ``upper`` is given.  With ``linking =
    "inequality"`` each linking row gets a slack in ``[0, supply_j]``.
    A single agent is pinned at its endowment.
    """
    require_valid(inst)
    n, m = inst.n_agents, inst.n_commodities
    if any(u.kind not in ("linear", "cara") for u in inst.utilities):
        raise InvalidInstanceError("only concave (linear or cara) utilities are supported")
    alpha = np.ones(n) if alpha is None else np.asarray(alpha, dtype=float)
    if alpha.shape != (n,) or np.any(alpha < 0):
        raise InvalidInstanceError("welfare weights must be n nonnegative numbers")
    supplies = np.array([float(v) for v in inst.supplies])
    weights = np.array([float(d) for d in inst.weights])
    if np.any(supplies <= 0):
        raise InvalidInstanceError("every commodity needs positive total supply")
    if any(b == 0 for b in inst.budgets):
        raise InvalidInstanceError("every agent needs a positive endowment")
    default_upper = supplies[None, :] / weights[:, None]
    if n == 1 and lower is None and upper is None:
        # the linking rows leave the endowment as the only point
        lower = upper = np.array([[float(v) for v in inst.endowments[0]]])
    lower = np.zeros((n, m)) if lower is None else np.asarray(lower, dtype=float)
    upper = default_upper if upper is None else np.asarray(upper, dtype=float)
    u0 = np.array([float(v) for v in utility_vector(inst, inst.q)])
    prob = RelaxationProblem(
        prices=np.array([float(p) for p in inst.prices]),
        weights=weights,
        budgets=np.array([float(b) for b in inst.budgets]),
        supplies=supplies,
        utilities=inst.utilities,
        alpha=alpha,
        lower=lower,
        upper=upper,
        rational=rational,
        disagreement=u0,
        s_upper=s_scale * (1.0 + float(np.max(np.abs(u0)))),
    )
    if linking == "inequality":
        prob = with_singletons(prob, [(LINK, j, 1.0, supplies[j], 0.0) for j in range(m)])
        prob.n_link_slacks = m
    elif linking != "equality":
        raise ValueError(f"unknown linking mode {linking!r}")
    return prob


def with_singletons(prob: RelaxationProblem, cols) -> RelaxationProblem:
    cols = list(cols)
    if not cols:
        return prob
    rows, idx, coef, up, cost = (np.array(v) for v in zip(*cols))
    return replace(
        prob,
        sing_row=np.concatenate([prob.sing_row, rows.astype(int)]),
        sing_idx=np.concatenate([prob.sing_idx, idx.astype(int)]),
        sing_coef=np.concatenate([prob.sing_coef, coef.astype(float)]),
        sing_upper=np.concatenate([prob.sing_upper, up.astype(float)]),
        sing_cost=np.concatenate([prob.sing_cost, cost.astype(float)]),
    )


def phase_one(prob: RelaxationProblem, bound: float | None = None) -> RelaxationProblem:
    """Elastic problem maximising minus the total constraint violation."""
    n, m = prob.n, prob.m
    big = bound if bound is not None else 10.0 * (1.0 + float(max(prob.budgets.max(), prob.supplies.max())))
    cols = []
    for h in range(n):
        cols += [(BUDGET, h, 1.0, big, -1.0), (BUDGET, h, -1.0, big, -1.0)]
    for j in range(m):
        cols += [(LINK, j, 1.0, big, -1.0), (LINK, j, -1.0, big, -1.0)]
    base = replace(prob, alpha=np.zeros(n), rational=False)
    return with_singletons(base, cols)


@dataclass
class IpmState:
    x: np.ndarray
    xc: np.ndarray
    s: np.ndarray
    y1: np.ndarray
    y2: np.ndarray
    t: np.ndarray
    z: np.ndarray
    w: np.ndarray
    zc: np.ndarray
    wc: np.ndarray
    zs: np.ndarray
    ws: np.ndarray
    mu: float

    def copy(self) -> "IpmState":
        return IpmState(**{k: (np.array(v) if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()})


class Residuals(NamedTuple):
    r1b: np.ndarray  # budget rows
    r1l: np.ndarray  # linking rows
    r2: np.ndarray   # rationality rows
    r3: np.ndarray   # stationarity, allocation
    r3c: np.ndarray  # stationarity, singletons
    r4: np.ndarray   # stationarity, s
    r5: np.ndarray   # (x - l) z - mu
    r5c: np.ndarray
    r6: np.ndarray   # s zs - mu
    r7: np.ndarray   # (u - x) w - mu
    r7c: np.ndarray
    r8: np.ndarray   # (u_s - s) ws - mu

    def primal(self) -> float:
        return _maxabs(self.r1b, self.r1l, self.r2)

    def dual(self) -> float:
        return _maxabs(self.r3, self.r3c, self.r4)


def _maxabs(*arrays) -> float:
    return max((float(np.max(np.abs(a))) for a in arrays if a.size), default=0.0)


def _row_sum(prob, kind, values, size) -> np.ndarray:
    out = np.zeros(size)
    mask = prob.sing_row == kind
    np.add.at(out, prob.sing_idx[mask], values[mask])
    return out


def kkt_residuals(prob: RelaxationProblem, st: IpmState, mu: float | None = None) -> Residuals:
    """Perturbed KKT residuals at ``st``; fixed variables contribute zeros."""
    mu = st.mu if mu is None else mu
    free = prob.free
    bud, link = prob.active_rows()
    x = st.x
    cx = prob.sing_coef * st.xc
    r1b = x @ prob.prices + _row_sum(prob, BUDGET, cx, prob.n) - prob.budgets
    r1l = prob.weights @ x + _row_sum(prob, LINK, cx, prob.m) - prob.supplies
    grad = prob.gradients(x)
    if prob.rational:
        r2 = prob.values(x) - prob.disagreement - st.s
        r4 = st.t + st.zs - st.ws
        r6 = st.s * st.zs - mu
        r8 = (prob.s_upper - st.s) * st.ws - mu
        tt = st.t
    else:
        r2 = r4 = r6 = r8 = np.zeros(0)
        tt = np.zeros(prob.n)
    y1 = np.where(bud, st.y1, 0.0)
    y2 = np.where(link, st.y2, 0.0)
    r3 = (np.outer(y1, prob.prices) + np.outer(prob.weights, y2) + st.z - st.w
          + grad * (prob.alpha - tt)[:, None])
    r3 = np.where(free, r3, 0.0)
    r5 = np.where(free, (x - prob.lower) * st.z - mu, 0.0)
    r7 = np.where(free, (prob.upper - x) * st.w - mu, 0.0)
    on_budget = prob.sing_row == BUDGET
    yrow = np.zeros(prob.sing_idx.size)
    yrow[on_budget] = y1[prob.sing_idx[on_budget]]
    yrow[~on_budget] = y2[prob.sing_idx[~on_budget]]
    r3c = prob.sing_coef * yrow + st.zc - st.wc + prob.sing_cost
    r5c = st.xc * st.zc - mu
    r7c = (prob.sing_upper - st.xc) * st.wc - mu
    return Residuals(np.where(bud, r1b, 0.0), np.where(link, r1l, 0.0), r2, r3, r3c, r4,
                     r5, r5c, r6, r7, r7c, r8)


class NewtonDirection(NamedTuple):
    dx: np.ndarray
    dxc: np.ndarray
    ds: np.ndarray
    dy1: np.ndarray
    dy2: np.ndarray
    dt: np.ndarray
    dz: np.ndarray
    dw: np.ndarray
    dzc: np.ndarray
    dwc: np.ndarray
    dzs: np.ndarray
    dws: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([np.ravel(a) for a in self])


@dataclass
class SolveStats:
    factorizations: int = 0
    regularized: int = 0


def _hessian_block(prob, st, stats: SolveStats | None) -> np.ndarray:
    tt = st.t if prob.rational else np.zeros(prob.n)
    K = prob.hessians(st.x) * (prob.alpha - tt)[:, None]
    if np.any(K > 0):
        # keep the reduced system negative definite
        if stats is not None:
            stats.regularized += 1
        K = np.minimum(K, 0.0)
    return np.where(prob.free, K, 0.0)


def _reduced_parts(prob, st, res, K):
    """Diagonal scalings Phi = Theta^-1 and reduced right-hand sides rho."""
    free = prob.free
    dl = np.where(free, st.x - prob.lower, 1.0)
    du = np.where(free, prob.upper - st.x, 1.0)
    theta = K - st.z / dl - st.w / du
    phi = np.divide(1.0, theta, out=np.zeros_like(theta), where=free)
    rho = np.where(free, -res.r3 + res.r5 / dl - res.r7 / du, 0.0)
    theta_c = -st.zc / st.xc - st.wc / (prob.sing_upper - st.xc)
    phi_c = 1.0 / theta_c
    rho_c = -res.r3c + res.r5c / st.xc - res.r7c / (prob.sing_upper - st.xc)
    if prob.rational:
        theta_s = -st.zs / st.s - st.ws / (prob.s_upper - st.s)
        phi_s = 1.0 / theta_s
        rho_s = -res.r4 + res.r6 / st.s - res.r8 / (prob.s_upper - st.s)
    else:
        phi_s = rho_s = np.zeros(0)
    return phi, rho, phi_c, rho_c, phi_s, rho_s


def _recover_bound_duals(prob, st, res, dx, dxc, ds):
    free = prob.free
    dl = np.where(free, st.x - prob.lower, 1.0)
    du = np.where(free, prob.upper - st.x, 1.0)
    dz = np.where(free, -(res.r5 + st.z * dx) / dl, 0.0)
    dw = np.where(free, (-res.r7 + st.w * dx) / du, 0.0)
    dzc = -(res.r5c + st.zc * dxc) / st.xc
    dwc = (-res.r7c + st.wc * dxc) / (prob.sing_upper - st.xc)
    if prob.rational:
        dzs = -(res.r6 + st.zs * ds) / st.s
        dws = (-res.r8 + st.ws * ds) / (prob.s_upper - st.s)
    else:
        dzs = dws = np.zeros(0)
    return dz, dw, dzc, dwc, dzs, dws


def _ups_apply(phi, a, v, B) -> np.ndarray:
    """``Upsilon v`` with ``Upsilon = Phi - Phi a a^T Phi / B`` in pairwise form.

    ``(Upsilon v)_i = sum_k Phi_i Phi_k a_k (a_k v_i - a_i v_k) / B``; the
    i = k term vanishes exactly, so no large terms are subtracted.
    """
    T = np.outer(phi, phi * a) * (np.outer(v, a) - np.outer(a, v))
    return T.sum(axis=1) / B


def _ups_form(phi, a, u, v, B) -> float:
    """``u^T Upsilon v`` via the Lagrange identity over pairs."""
    U = np.outer(u, a) - np.outer(a, u)
    V = np.outer(v, a) - np.outer(a, v)
    return float((np.outer(phi, phi) * U * V).sum() / (2.0 * B))


def _ups_matrix(phi, a, B) -> np.ndarray:
    a2phi = a * a * phi
    loo = np.tile(a2phi, (a.size, 1))
    np.fill_diagonal(loo, 0.0)
    out = -np.outer(phi * a, phi * a) / B
    np.fill_diagonal(out, phi * loo.sum(axis=1) / B)
    return out


def newton_direction_structured(prob: RelaxationProblem, st: IpmState, mu: float | None = None,
                                stats: SolveStats | None = None) -> NewtonDirection:
    """Newton step through the block reduction, with one m x m factorisation.

    Per agent the budget row is eliminated through ``Upsilon_h``; what is
    left is an m x m system in the linking duals (after also eliminating
    the rationality duals when present).
    """
    n, m = prob.n, prob.m
    res = kkt_residuals(prob, st, mu)
    K = _hessian_block(prob, st, stats)
    phi, rho, phi_c, rho_c, phi_s, rho_s = _reduced_parts(prob, st, res, K)
    P, d = prob.prices, prob.weights
    G = prob.gradients(st.x)
    bud, link = prob.active_rows()
    rational = prob.rational

    # per-agent column sets: m allocation columns plus budget singletons
    agent_cols = []
    for h in range(n):
        sel = np.flatnonzero((prob.sing_row == BUDGET) & (prob.sing_idx == h))
        a = np.concatenate([P, prob.sing_coef[sel]])
        ph = np.concatenate([phi[h], phi_c[sel]])
        rh = np.concatenate([rho[h], rho_c[sel]])
        gh = np.concatenate([G[h], np.zeros(sel.size)])
        B = float((a * a * ph).sum())
        agent_cols.append((sel, a, ph, rh, gh, B if bud[h] and B != 0 else 0.0))

    is_l = prob.sing_row == LINK
    D_ups = np.zeros((m, m))
    np.add.at(D_ups, (prob.sing_idx[is_l], prob.sing_idx[is_l]), (prob.sing_coef ** 2 * phi_c)[is_l])
    g2r = res.r1l.copy()
    np.add.at(g2r, prob.sing_idx[is_l], (prob.sing_coef * phi_c * rho_c)[is_l])
    C_ups = np.zeros((m, n))
    B_ups = np.zeros(n)
    g3r = np.zeros(n)
    for h, (sel, a, ph, rh, gh, B) in enumerate(agent_cols):
        if B == 0.0:
            g2r += d[h] * phi[h] * rho[h]
            if rational:
                B_ups[h] = float((G[h] ** 2 * phi[h]).sum()) + phi_s[h]
                g3r[h] = float((G[h] * phi[h] * rho[h]).sum()) - phi_s[h] * rho_s[h] + res.r2[h]
                C_ups[:, h] = d[h] * phi[h] * G[h]
            D_ups += d[h] ** 2 * np.diag(phi[h])
            continue
        D_ups += d[h] ** 2 * _ups_matrix(ph, a, B)[:m, :m]
        g2r += d[h] * (_ups_apply(ph, a, rh, B)[:m] - P * phi[h] * res.r1b[h] / B)
        if rational:
            C_ups[:, h] = d[h] * _ups_apply(ph, a, gh, B)[:m]
            B_ups[h] = _ups_form(ph, a, gh, gh, B) + phi_s[h]
            C1 = float((P * phi[h] * G[h]).sum())
            g3r[h] = (_ups_form(ph, a, gh, rh, B) - C1 * res.r1b[h] / B
                      - phi_s[h] * rho_s[h] + res.r2[h])

    if rational:
        R = D_ups - (C_ups / B_ups[None, :]) @ C_ups.T
        rhs = g2r - C_ups @ (g3r / B_ups)
    else:
        R, rhs = D_ups, g2r

    dy2 = np.zeros(m)
    act = np.flatnonzero(link)
    if act.size:
        Ra = R[np.ix_(act, act)]
        if stats is not None:
            stats.factorizations += 1
        try:
            dy2[act] = np.linalg.solve(Ra, rhs[act])
        except np.linalg.LinAlgError:
            if stats is not None:
                stats.regularized += 1
            shift = 1e-12 * (1.0 + np.max(np.abs(Ra)))
            dy2[act] = np.linalg.solve(Ra - shift * np.eye(act.size), rhs[act])

    dtau = (g3r - C_ups.T @ dy2) / B_ups if rational else np.zeros(n)

    dx = np.zeros((n, m))
    dxc = np.zeros(prob.sing_coef.size)
    dy1 = np.zeros(n)
    for h, (sel, a, ph, rh, gh, B) in enumerate(agent_cols):
        v = rh.copy()
        v[:m] -= d[h] * dy2 + G[h] * dtau[h]
        if B == 0.0:
            dx[h] = phi[h] * v[:m]
            continue
        dxa = _ups_apply(ph, a, v, B) - ph * a * res.r1b[h] / B
        dx[h] = dxa[:m]
        dxc[sel] = dxa[m:]
        dy1[h] = (float((a * ph * v).sum()) + res.r1b[h]) / B
    dxc[is_l] = phi_c[is_l] * (rho_c[is_l] - prob.sing_coef[is_l] * dy2[prob.sing_idx[is_l]])
    if rational:
        ds = phi_s * (rho_s + dtau)
        dt = -dtau
    else:
        ds = np.zeros(0)
        dt = np.zeros(n)
    dz, dw, dzc, dwc, dzs, dws = _recover_bound_duals(prob, st, res, dx, dxc, ds)
    return NewtonDirection(dx, dxc, ds, dy1, dy2, dt, dz, dw, dzc, dwc, dzs, dws)


def assemble_jacobian(prob: RelaxationProblem, st: IpmState, mu: float | None = None):
    """Full Jacobian ``J``, right-hand side ``-r`` and an unpacking function."""
    n, m = prob.n, prob.m
    res = kkt_residuals(prob, st, mu)
    K = _hessian_block(prob, st, None)
    free = prob.free
    bud, link = prob.active_rows()
    P, d = prob.prices, prob.weights
    G = prob.gradients(st.x)
    fx = [(h, j) for h in range(n) for j in range(m) if free[h, j]]
    nc = prob.sing_coef.size
    rows_b = list(np.flatnonzero(bud))
    rows_l = list(np.flatnonzero(link))
    nr = n if prob.rational else 0
    sizes = dict(x=len(fx), xc=nc, s=nr, y1=len(rows_b), y2=len(rows_l), t=nr,
                 z=len(fx), zc=nc, zs=nr, w=len(fx), wc=nc, ws=nr)
    off, pos = {}, 0
    for key, size in sizes.items():
        off[key] = pos
        pos += size
    N = pos
    J = np.zeros((N, N))
    rhs = np.zeros(N)
    yb = {h: off["y1"] + r for r, h in enumerate(rows_b)}
    yl = {j: off["y2"] + r for r, j in enumerate(rows_l)}
    eq = 0

    def put(r, c, v):
        J[r, c] += v

    # r1: structural rows
    for h in rows_b:
        r = eq
        for col, (a, j) in enumerate(fx):
            if a == h:
                put(r, off["x"] + col, P[j])
        for k in range(nc):
            if prob.sing_row[k] == BUDGET and prob.sing_idx[k] == h:
                put(r, off["xc"] + k, prob.sing_coef[k])
        rhs[r] = -res.r1b[h]
        eq += 1
    for j in rows_l:
        r = eq
        for col, (a, c) in enumerate(fx):
            if c == j:
                put(r, off["x"] + col, d[a])
        for k in range(nc):
            if prob.sing_row[k] == LINK and prob.sing_idx[k] == j:
                put(r, off["xc"] + k, prob.sing_coef[k])
        rhs[r] = -res.r1l[j]
        eq += 1
    # r2: rationality rows
    if prob.rational:
        for h in range(n):
            r = eq
            for col, (a, j) in enumerate(fx):
                if a == h:
                    put(r, off["x"] + col, G[h, j])
            put(r, off["s"] + h, -1.0)
            rhs[r] = -res.r2[h]
            eq += 1
    # r3: stationarity in x
    for col, (h, j) in enumerate(fx):
        r = eq
        put(r, off["x"] + col, K[h, j])
        if h in yb:
            put(r, yb[h], P[j])
        if j in yl:
            put(r, yl[j], d[h])
        if prob.rational:
            put(r, off["t"] + h, -G[h, j])
        put(r, off["z"] + col, 1.0)
        put(r, off["w"] + col, -1.0)
        rhs[r] = -res.r3[h, j]
        eq += 1
    for k in range(nc):
        r = eq
        target = yb.get(prob.sing_idx[k]) if prob.sing_row[k] == BUDGET else yl.get(prob.sing_idx[k])
        if target is not None:
            put(r, target, prob.sing_coef[k])
        put(r, off["zc"] + k, 1.0)
        put(r, off["wc"] + k, -1.0)
        rhs[r] = -res.r3c[k]
        eq += 1
    # r4: stationarity in s
    if prob.rational:
        for h in range(n):
            r = eq
            put(r, off["t"] + h, 1.0)
            put(r, off["zs"] + h, 1.0)
            put(r, off["ws"] + h, -1.0)
            rhs[r] = -res.r4[h]
            eq += 1
    # r5..r8: complementarity
    for col, (h, j) in enumerate(fx):
        put(eq, off["x"] + col, st.z[h, j])
        put(eq, off["z"] + col, st.x[h, j] - prob.lower[h, j])
        rhs[eq] = -res.r5[h, j]
        eq += 1
        put(eq, off["x"] + col, -st.w[h, j])
        put(eq, off["w"] + col, prob.upper[h, j] - st.x[h, j])
        rhs[eq] = -res.r7[h, j]
        eq += 1
    for k in range(nc):
        put(eq, off["xc"] + k, st.zc[k])
        put(eq, off["zc"] + k, st.xc[k])
        rhs[eq] = -res.r5c[k]
        eq += 1
        put(eq, off["xc"] + k, -st.wc[k])
        put(eq, off["wc"] + k, prob.sing_upper[k] - st.xc[k])
        rhs[eq] = -res.r7c[k]
        eq += 1
    if prob.rational:
        for h in range(n):
            put(eq, off["s"] + h, st.zs[h])
            put(eq, off["zs"] + h, st.s[h])
            rhs[eq] = -res.r6[h]
            eq += 1
            put(eq, off["s"] + h, -st.ws[h])
            put(eq, off["ws"] + h, prob.s_upper - st.s[h])
            rhs[eq] = -res.r8[h]
            eq += 1
    assert eq == N

    def unpack(sol):
        return _unpack(sol, prob, fx, off, sizes, yb, yl)

    def pack(dirn: NewtonDirection):
        return _pack(dirn, prob, fx, off, sizes, yb, yl, N)

    return J, rhs, unpack, pack


def _unpack(sol, prob, fx, off, sizes, yb, yl):
    n, m = prob.n, prob.m

    def grid(key):
        out = np.zeros((n, m))
        for col, (h, j) in enumerate(fx):
            out[h, j] = sol[off[key] + col]
        return out

    def vec(key):
        return np.array(sol[off[key]: off[key] + sizes[key]])

    dy1 = np.zeros(n)
    for h, r in yb.items():
        dy1[h] = sol[r]
    dy2 = np.zeros(m)
    for j, r in yl.items():
        dy2[j] = sol[r]
    dt = vec("t") if prob.rational else np.zeros(n)
    return NewtonDirection(grid("x"), vec("xc"), vec("s"), dy1, dy2, dt,
                           grid("z"), grid("w"), vec("zc"), vec("wc"), vec("zs"), vec("ws"))


def _pack(dirn, prob, fx, off, sizes, yb, yl, N):
    sol = np.zeros(N)
    for key in ("x", "z", "w"):
        arr = getattr(dirn, "d" + key)
        for col, (h, j) in enumerate(fx):
            sol[off[key] + col] = arr[h, j]
    for key in ("xc", "zc", "wc", "s", "zs", "ws"):
        if sizes[key]:
            sol[off[key]: off[key] + sizes[key]] = getattr(dirn, "d" + key)
    if prob.rational:
        sol[off["t"]: off["t"] + sizes["t"]] = dirn.dt
    for h, r in yb.items():
        sol[r] = dirn.dy1[h]
    for j, r in yl.items():
        sol[r] = dirn.dy2[j]
    return sol


def newton_direction_dense(prob: RelaxationProblem, st: IpmState, mu: float | None = None) -> NewtonDirection:
    """Newton step from the fully assembled Jacobian (reference solver)."""
    J, rhs, unpack, _ = assemble_jacobian(prob, st, mu)
    return unpack(np.linalg.solve(J, rhs))


def linearized_residual(prob: RelaxationProblem, st: IpmState, dirn: NewtonDirection,
                        mu: float | None = None) -> float:
    """Relative residual ``|J d + r| / (|J| |d| + |r|)`` of a direction."""
    J, rhs, _, pack = assemble_jacobian(prob, st, mu)
    v = pack(dirn)
    num = np.max(np.abs(J @ v - rhs))
    den = np.max(np.abs(J)) * np.max(np.abs(v)) + np.max(np.abs(rhs))
    return float(num / den) if den > 0 else float(num)


# -- driver -------------------------------------------------------------------


@dataclass
class IpmResult:
    x: np.ndarray
    state: IpmState
    welfare: float
    converged: bool
    iterations: int
    primal_residual: float
    dual_residual: float
    complementarity: float
    trace: list
    factorizations: int
    regularized: int

    @property
    def x0(self) -> np.ndarray:
        return self.state.xc

    def trace_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["iteration", "mu", "primal", "dual", "complementarity", "welfare", "step_primal", "step_dual"])
        for row in self.trace:
            writer.writerow([row["iteration"]] + [repr(float(row[k])) for k in
                            ("mu", "primal", "dual", "complementarity", "welfare", "step_primal", "step_dual")])
        return buf.getvalue()


def initial_state(prob: RelaxationProblem, q=None, margin: float = 0.1) -> IpmState:
    n, m = prob.n, prob.m
    lo, up = prob.lower, prob.upper
    width = up - lo
    base = lo + 0.5 * width if q is None else np.asarray(q, dtype=float)
    x = np.clip(base, lo + margin * width, up - margin * width)
    x = np.where(prob.free, x, lo)
    xc = np.zeros(prob.sing_coef.size)
    if xc.size:
        gap_l = prob.supplies - prob.weights @ x
        gap_b = prob.budgets - x @ prob.prices
        is_link = prob.sing_row == LINK
        guess = np.zeros(xc.size)
        guess[is_link] = gap_l[prob.sing_idx[is_link]]
        guess[~is_link] = gap_b[prob.sing_idx[~is_link]]
        guess *= prob.sing_coef
        xc = np.clip(guess, margin * prob.sing_upper, (1 - margin) * prob.sing_upper)
    scale = max(1.0, float(np.max(np.abs(prob.gradients(x) * prob.alpha[:, None]))) if n else 1.0)
    mu = scale
    dl = np.where(prob.free, x - lo, 1.0)
    du = np.where(prob.free, up - x, 1.0)
    z = np.where(prob.free, mu / dl, 0.0)
    w = np.where(prob.free, mu / du, 0.0)
    zc = mu / np.maximum(xc, 1e-300)
    wc = mu / (prob.sing_upper - xc)
    if prob.rational:
        spread = prob.values(x) - prob.disagreement
        s = np.clip(spread, 1e-2 * (1 + np.abs(prob.disagreement)), 0.5 * prob.s_upper)
        zs = mu / s
        ws = mu / (prob.s_upper - s)
    else:
        s = zs = ws = np.zeros(0)
    return IpmState(x, xc, s, np.zeros(n), np.zeros(m), np.zeros(n), z, w, zc, wc, zs, ws, mu)


def _max_step(v, dv, free=None) -> float:
    v, dv = np.ravel(v), np.ravel(dv)
    if free is not None:
        mask = np.ravel(free)
        v, dv = v[mask], dv[mask]
    neg = dv < 0
    if not np.any(neg):
        return math.inf
    return float(np.min(-v[neg] / dv[neg]))


def _strictly_interior(prob, st) -> bool:
    free = prob.free
    parts = [(st.x - prob.lower)[free], (prob.upper - st.x)[free], st.z[free], st.w[free],
             st.xc, prob.sing_upper - st.xc, st.zc, st.wc]
    if prob.rational:
        parts += [st.s, prob.s_upper - st.s, st.zs, st.ws]
    return all(bool(np.all(p > 0)) for p in parts)


def _complementarity(prob, st) -> float:
    free = prob.free
    parts = [((st.x - prob.lower) * st.z)[free], ((prob.upper - st.x) * st.w)[free],
             st.xc * st.zc, (prob.sing_upper - st.xc) * st.wc]
    if prob.rational:
        parts += [st.s * st.zs, (prob.s_upper - st.s) * st.ws]
    vals = np.concatenate(parts)
    return vals


def run_ipm(prob: RelaxationProblem, tol: float = 1e-8, max_iter: int = 200, sigma: float = 0.2,
            eta: float = 0.995, q=None, check_dense: bool = False, on_iteration=None) -> IpmResult:
    """Path-following primal-dual method with separate primal/dual step lengths.

    Stops when primal, dual and complementarity residuals are all below
    ``tol``.  ``check_dense`` recomputes every direction with the dense
    solver and records the relative difference in the trace.
    """
    st = initial_state(prob, q)
    stats = SolveStats()
    trace = []
    free = prob.free
    converged = False
    it = 0
    comp = _complementarity(prob, st)
    for it in range(1, max_iter + 1):
        gap = float(comp.mean()) if comp.size else 0.0
        mu = min(st.mu, sigma * gap)
        st.mu = max(mu, 1e-300)
        dirn = newton_direction_structured(prob, st, st.mu, stats)
        diff = None
        if check_dense:
            dense = newton_direction_dense(prob, st, st.mu)
            diff = float(np.max(np.abs(dirn.flat() - dense.flat())) / max(1.0, np.max(np.abs(dense.flat()))))
        ap = min(
            _max_step(st.x - prob.lower, dirn.dx, free),
            _max_step(prob.upper - st.x, -dirn.dx, free),
            _max_step(st.xc, dirn.dxc),
            _max_step(prob.sing_upper - st.xc, -dirn.dxc),
            _max_step(st.s, dirn.ds) if prob.rational else math.inf,
            _max_step(prob.s_upper - st.s, -dirn.ds) if prob.rational else math.inf,
        )
        ad = min(
            _max_step(st.z, dirn.dz, free), _max_step(st.w, dirn.dw, free),
            _max_step(st.zc, dirn.dzc), _max_step(st.wc, dirn.dwc),
            _max_step(st.zs, dirn.dzs), _max_step(st.ws, dirn.dws),
        )
        # a blocking ratio of exactly 1 must be damped too, or x lands on its bound
        ap = min(1.0, eta * ap)
        ad = min(1.0, eta * ad)
        st.x = np.where(free, st.x + ap * dirn.dx, prob.lower)
        st.xc = st.xc + ap * dirn.dxc
        if prob.rational:
            st.s = st.s + ap * dirn.ds
            st.t = st.t + ad * dirn.dt
            st.zs = st.zs + ad * dirn.dzs
            st.ws = st.ws + ad * dirn.dws
        st.y1 = st.y1 + ad * dirn.dy1
        st.y2 = st.y2 + ad * dirn.dy2
        st.z = st.z + ad * dirn.dz
        st.w = st.w + ad * dirn.dw
        st.zc = st.zc + ad * dirn.dzc
        st.wc = st.wc + ad * dirn.dwc
        res = kkt_residuals(prob, st, 0.0)
        comp = _complementarity(prob, st)
        pr, du_, cm = res.primal(), res.dual(), float(comp.max()) if comp.size else 0.0
        row = dict(iteration=it, mu=st.mu, primal=pr, dual=du_, complementarity=cm,
                   welfare=prob.welfare(st.x), step_primal=ap, step_dual=ad)
        if diff is not None:
            row["dense_difference"] = diff
        trace.append(row)
        if on_iteration is not None:
            on_iteration(prob, st, dirn)
        if pr <= tol and du_ <= tol and cm <= tol:
            converged = True
            break
        if not all(np.isfinite(v) for v in (pr, du_, cm)) or not _strictly_interior(prob, st):
            # rounding has pushed an iterate onto its bound; Newton steps are no longer defined
            break
    res = kkt_residuals(prob, st, 0.0)
    comp = _complementarity(prob, st)
    return IpmResult(
        x=np.where(free, st.x, prob.lower), state=st, welfare=prob.welfare(st.x), converged=converged,
        iterations=it, primal_residual=res.primal(), dual_residual=res.dual(),
        complementarity=float(comp.max()) if comp.size else 0.0, trace=trace,
        factorizations=stats.factorizations, regularized=stats.regularized,
    )


def solve_relaxation(inst: EconomyInstance, alpha=None, rational: bool = True, **kwargs) -> IpmResult:
    prob = relaxation(inst, alpha=alpha, rational=rational)
    return run_ipm(prob, q=inst.q, **kwargs)
