import math
import random

import numpy as np
import pytest
from scipy.optimize import linprog

from barter.economy import EconomyInstance, UtilitySpec, utility_vector
from barter.erp import direction
from barter.errors import InvalidInstanceError
from barter.ipm import (initial_state, kkt_residuals, linearized_residual, newton_direction_dense,
                        newton_direction_structured, relaxation, run_ipm, solve_relaxation)
from barter.oracle import branch_and_bound_linear, enumerate_allocations

from conftest import random_instance


def highs_lp(inst, c=None, lower=None, upper=None):
    """LP relaxation value from scipy's HiGHS, used as an independent oracle."""
    n, m = inst.n_agents, inst.n_commodities
    c = np.array([[float(v) for v in u.coefficients] for u in inst.utilities]) if c is None else c
    p = np.array([float(v) for v in inst.prices])
    d = np.array([float(v) for v in inst.weights])
    A, b = [], []
    for h in range(n):
        row = np.zeros((n, m))
        row[h] = p
        A.append(row.ravel())
        b.append(float(inst.budgets[h]))
    for j in range(m):
        row = np.zeros((n, m))
        row[:, j] = d
        A.append(row.ravel())
        b.append(float(inst.supplies[j]))
    if lower is None:
        bounds = (0, None)
    else:
        bounds = list(zip(np.ravel(lower), np.ravel(upper)))
    res = linprog(-c.ravel(), A_eq=np.array(A), b_eq=np.array(b), bounds=bounds, method="highs")
    assert res.status == 0
    return -res.fun


def test_mu_center_single_agent():
    # one agent, holdings pinned by the rows; the duals follow in closed form
    inst = EconomyInstance((1, 1), (1,), ((2, 3),), (UtilitySpec.linear((5, 7)),))
    prob = relaxation(inst, rational=False, upper=[[4.0, 6.0]])
    mu = 0.3
    st = initial_state(prob)
    st.x = np.array([[2.0, 3.0]])
    st.z = mu / st.x
    st.w = mu / (prob.upper - st.x)
    c = np.array([5.0, 7.0])
    bud, link = prob.active_rows()
    assert bud.tolist() == [True] and link.tolist() == [True, False]
    y1 = -(c[1] + st.z[0, 1] - st.w[0, 1])
    st.y1 = np.array([y1])
    st.y2 = np.array([-(c[0] + st.z[0, 0] - st.w[0, 0] + y1), 0.0])
    st.mu = mu
    res = kkt_residuals(prob, st)
    assert max(float(np.max(np.abs(r))) for r in res if r.size) <= 1e-10


def test_primal_rows_vanish_at_endowment(worked):
    prob = relaxation(worked)
    st = initial_state(prob)
    st.x = worked.q.astype(float)
    st.s = np.zeros(3)
    res = kkt_residuals(prob, st)
    assert np.all(res.r1b == 0) and np.all(res.r1l == 0) and np.all(res.r2 == 0)


def test_complementarity_block_definitional(nprng):
    inst = random_instance(random.Random(1), 3, 3, kind="cara")
    prob = relaxation(inst)
    st = initial_state(prob, inst.q)
    st.z = nprng.uniform(0.1, 2.0, size=st.z.shape)
    st.x = nprng.uniform(0.1, 0.9, size=st.x.shape) * prob.upper
    res = kkt_residuals(prob, st, 0.25)
    assert np.array_equal(res.r5, (st.x - prob.lower) * st.z - 0.25)


@pytest.mark.parametrize("kind", ["linear", "cara"])
@pytest.mark.parametrize("rational", [True, False])
def test_structured_equals_dense_every_iteration(kind, rational):
    rng = random.Random(f"{kind}-{rational}")
    for _ in range(6):
        n, m = rng.randint(1, 10), rng.randint(2, 10)
        inst = random_instance(rng, n, m, kind=kind, max_q=8)
        inst = inst.replace(endowments=tuple(tuple(v + 1 for v in row) for row in inst.endowments))
        prob = relaxation(inst, rational=rational)
        worst = []

        def check(pr, st, dirn):
            dense = newton_direction_dense(pr, st, st.mu)
            scale = max(1.0, float(np.max(np.abs(dense.flat()))))
            worst.append(float(np.max(np.abs(dirn.flat() - dense.flat()))) / scale)

        st0 = initial_state(prob, inst.q)
        check(prob, st0, newton_direction_structured(prob, st0, st0.mu))
        # the callback sees the updated iterate, so recompute its next direction
        run_ipm(prob, q=inst.q, on_iteration=lambda pr, st, _: check(pr, st, newton_direction_structured(pr, st, st.mu)))
        assert max(worst) <= 1e-8


def test_structured_direction_solves_linear_system():
    inst = random_instance(random.Random(4), 3, 4, kind="cara", max_q=9)
    prob = relaxation(inst)
    st = initial_state(prob, inst.q)
    dirn = newton_direction_structured(prob, st, st.mu)
    assert linearized_residual(prob, st, dirn, st.mu) <= 1e-8


def test_linear_hessian_block_absent():
    inst = random_instance(random.Random(9), 2, 2, max_q=9)
    inst = inst.replace(endowments=((3, 4), (5, 2)))
    prob = relaxation(inst)
    assert not np.any(prob.hessians(inst.q.astype(float)))
    st = initial_state(prob, inst.q)
    a = newton_direction_structured(prob, st, st.mu)
    b = newton_direction_dense(prob, st, st.mu)
    assert np.allclose(a.flat(), b.flat(), rtol=1e-8, atol=1e-8 * max(1, np.abs(b.flat()).max()))


def test_single_core_factorisation_per_iteration():
    inst = random_instance(random.Random(10), 10, 4, kind="cara", max_q=8)
    inst = inst.replace(endowments=tuple(tuple(v + 1 for v in row) for row in inst.endowments))
    res = solve_relaxation(inst)
    assert res.converged
    assert res.factorizations == res.iterations


def test_lp_matches_highs_and_branch_and_bound():
    rng = random.Random(11)
    for _ in range(15):
        inst = random_instance(rng, rng.randint(2, 4), rng.randint(2, 4))
        inst = inst.replace(endowments=tuple(tuple(v + 1 for v in row) for row in inst.endowments))
        res = solve_relaxation(inst, rational=False)
        assert res.converged
        ref = highs_lp(inst)
        assert res.welfare == pytest.approx(ref, abs=1e-6 * (1 + abs(ref)))
        # the root node solves over the propagated integer box
        bb = branch_and_bound_linear(inst)
        box = highs_lp(inst, lower=bb.root_bounds[0], upper=bb.root_bounds[1])
        assert bb.root_lp == pytest.approx(box, abs=1e-6 * (1 + abs(box)))
        assert bb.root_lp <= ref + 1e-6 * (1 + abs(ref))


def test_single_agent_weighting():
    inst = random_instance(random.Random(12), 3, 3)
    inst = inst.replace(endowments=((2, 3, 4), (5, 1, 2), (3, 3, 3)))
    res = solve_relaxation(inst, alpha=[0, 1, 0], rational=False)
    c = np.zeros((3, 3))
    c[1] = [float(v) for v in inst.utilities[1].coefficients]
    assert res.converged
    assert res.welfare == pytest.approx(highs_lp(inst, c), abs=1e-6)


def test_example_one_relaxation_dominates_frontier(ex1):
    res = solve_relaxation(ex1)
    assert res.converged
    d = direction(ex1, 0, 1, 0, 1)
    for a in range(4, 9):
        assert res.welfare >= sum(utility_vector(ex1, d.apply(ex1.q, a)))
    assert max(res.primal_residual, res.dual_residual, res.complementarity) <= 1e-6


def test_relaxation_bounds_integer_welfare():
    rng = random.Random(13)
    for _ in range(20):
        inst = random_instance(rng, 2, 3, max_q=4, kind=rng.choice(["linear", "cara"]))
        inst = inst.replace(endowments=tuple(tuple(v + 1 for v in row) for row in inst.endowments))
        res = solve_relaxation(inst)
        assert res.converged
        u0 = utility_vector(inst, inst.q)
        best = max(float(sum(utility_vector(inst, x))) for x in enumerate_allocations(inst).allocations
                   if all(a >= b for a, b in zip(utility_vector(inst, x), u0)))
        assert res.welfare >= best - 1e-6 * (1 + abs(best))


def test_mu_decreases_and_iterates_stay_interior():
    inst = random_instance(random.Random(14), 4, 3, kind="cara", max_q=7)
    inst = inst.replace(endowments=tuple(tuple(v + 1 for v in row) for row in inst.endowments))
    prob = relaxation(inst)
    seen = []

    def watch(pr, st, _):
        seen.append(st.mu)
        assert np.all(st.x > pr.lower) and np.all(st.x < pr.upper)
        assert np.all(st.s > 0) and np.all(st.s < pr.s_upper)
        assert np.all(st.z > 0) and np.all(st.w > 0)

    res = run_ipm(prob, q=inst.q, on_iteration=watch)
    assert res.converged
    assert all(b <= a for a, b in zip(seen, seen[1:]))
    assert seen[-1] < 1e-6 * seen[0]


def test_inequality_linking_mode(worked):
    eq = solve_relaxation(worked, rational=False)
    ineq = run_ipm(relaxation(worked, rational=False, linking="inequality"), q=worked.q)
    assert eq.converged and ineq.converged
    assert ineq.welfare >= eq.welfare - 1e-6


def test_rejects_bad_inputs(worked):
    with pytest.raises(InvalidInstanceError):
        relaxation(worked, alpha=[1, -1, 1])
    with pytest.raises(InvalidInstanceError):
        relaxation(worked.replace(utilities=(UtilitySpec("quadratic", (1, 1, 1)),) * 3))
    with pytest.raises(ValueError):
        relaxation(worked, linking="sideways")


def test_trace_csv(worked):
    res = solve_relaxation(worked, check_dense=True)
    lines = res.trace_csv().splitlines()
    assert lines[0].startswith("iteration,mu,primal,dual,complementarity,welfare")
    assert len(lines) == res.iterations + 1
    assert max(r["dense_difference"] for r in res.trace) <= 1e-8
    assert math.isfinite(res.welfare)
