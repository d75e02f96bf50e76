"""Acceptance criteria 1-13.

Each test prints one ``criterion N: PASS|FAIL`` line (visible with ``-s`` or
in the ``-v`` log) and then asserts the same verdict.
"""

import itertools
import math
import random
import time
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
from scipy.stats import chisquare

from barter.economy import EconomyInstance, UtilitySpec, is_feasible, utility_vector
from barter.erp import continuous_argmax, direction, pareto_frontier, step_interval, trader_utilities
from barter.experiments import ExperimentSpec, fit_scaling, scaling_points
from barter.instances import example_one, worked_example
from barter.ipm import (initial_state, newton_direction_dense, newton_direction_structured, relaxation, run_ipm,
                        solve_relaxation)
from barter.netstats import (FIXED_ROWS, FIXED_TOTAL, TYPE1, TYPE2, TYPE3, ValuedNetwork, assortativity,
                             sample_null, strength_assortativity)
from barter.network import TradeNetwork, check_flow_balance, run_network_ser
from barter.oracle import branch_and_bound_linear, enumerate_allocations, prop1_bound
from barter.pareto import enumerate_paths, pareto_filter
from barter.ser import SearchConfig, check_delta_bound, improving_moves, run_ser, welfare

from conftest import random_instance
from test_erp import brute_frontier
from test_ipm import highs_lp
from test_netstats import random_net, sym
from test_pareto import naive_filter


@pytest.fixture
def verdict(capsys):
    def report(number, ok, detail=""):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return report


# rows of the worked example's reference trajectory: wave -> [(allocation, utilities)]
REFERENCE_WAVES = {
    1: [(((21, 3, 0), (10, 4, 58), (22, 2, 2)), (1608, 574, 1220)),
        (((18, 3, 3), (11, 4, 57), (24, 2, 0)), (1422, 569, 1324))],
    2: [(((24, 0, 0), (7, 7, 58), (22, 2, 2)), (1800, 571, 1220)),
        (((19, 5, 0), (10, 4, 58), (24, 0, 2)), (1480, 574, 1326)),
        (((21, 3, 0), (8, 6, 58), (24, 0, 2)), (1608, 572, 1326)),
        (((21, 3, 0), (8, 4, 60), (24, 2, 0)), (1608, 584, 1324)),
        (((21, 3, 0), (10, 6, 56), (22, 0, 4)), (1422, 567, 1430)),
        (((21, 0, 3), (8, 7, 57), (24, 2, 0)), (1614, 566, 1324))],
    3: [(((21, 3, 0), (8, 4, 60), (24, 2, 0)), (1608, 584, 1324)),
        (((22, 2, 0), (7, 7, 58), (24, 0, 2)), (1672, 571, 1326)),
        (((24, 0, 0), (5, 9, 58), (24, 0, 2)), (1800, 569, 1326)),
        (((24, 0, 0), (5, 7, 60), (24, 2, 0)), (1800, 581, 1324)),
        (((24, 0, 0), (7, 9, 56), (22, 0, 4)), (1614, 564, 1430)),
        (((19, 5, 0), (8, 4, 60), (26, 0, 0)), (1480, 584, 1430)),
        (((19, 5, 0), (10, 2, 60), (24, 2, 0)), (1480, 586, 1324)),
        (((21, 1, 2), (8, 6, 58), (24, 2, 0)), (1608, 582, 1430))],
    4: [(((21, 3, 0), (8, 4, 60), (24, 2, 0)), (1608, 584, 1324)),
        (((24, 0, 0), (5, 7, 60), (24, 2, 0)), (1800, 581, 1324)),
        (((19, 5, 0), (8, 4, 60), (26, 0, 0)), (1480, 584, 1430)),
        (((19, 5, 0), (10, 2, 60), (24, 2, 0)), (1480, 586, 1324)),
        (((21, 1, 2), (8, 6, 58), (24, 2, 0)), (1608, 582, 1430)),
        (((21, 3, 0), (8, 6, 58), (24, 0, 2)), (1800, 579, 1430)),
        (((22, 0, 2), (7, 9, 56), (24, 0, 2)), (1672, 581, 1430)),
        (((24, 0, 0), (7, 7, 58), (22, 2, 2)), (1736, 582, 1324)),
        (((20, 2, 2), (7, 7, 58), (26, 0, 0)), (1672, 583, 1324))],
}
REFERENCE_WAVES[5] = REFERENCE_WAVES[4] + [(((21, 0, 3), (8, 7, 57), (24, 2, 0)), (1544, 583, 1430))]


def test_criterion_01_example_one(verdict):
    start = time.perf_counter()
    inst = example_one()
    d = direction(inst, 0, 1, 0, 1)
    front = pareto_frontier(inst, inst.q, d)
    argmaxes = [continuous_argmax(inst, h, inst.q, d) for h in (0, 1)]
    elapsed = time.perf_counter() - start
    printed = {4: (1.82412, 1.93043), 5: (1.81803, 1.94035), 6: (1.80882, 1.94873),
               7: (1.79752, 1.95558), 8: (1.78465, 1.96057)}
    got = {p.alpha: (p.u_h, p.u_k) for p in front}
    checks = {
        "direction": d.step == (12, -6, -10, 5),
        "argmax": abs(argmaxes[0] - 3.33) <= 0.01 and abs(argmaxes[1] - 8.94) <= 0.01,
        "frontier": sorted(got) == [4, 5, 6, 7, 8],
        "pairs": all(a in got and max(abs(x - y) for x, y in zip(got[a], pair)) <= 1e-3
                     for a, pair in printed.items()),
        "runtime": elapsed < 1.0,
    }
    bad = [k for k, v in checks.items() if not v]
    verdict(1, not bad, f"argmax=({argmaxes[0]:.3f},{argmaxes[1]:.3f}) frontier={sorted(got)} "
                        f"time={elapsed:.3f}s failing={bad}")


def test_criterion_02_worked_example(verdict):
    start = time.perf_counter()
    inst = worked_example()
    pe = enumerate_paths(inst)
    elapsed = time.perf_counter() - start
    initial = tuple(int(v) for v in utility_vector(inst, inst.q))
    wave1 = {(tuple(map(tuple, a)), tuple(int(v) for v in u))
             for a, u in zip(pe.waves[1].allocations, pe.waves[1].utilities)}
    rows_ok = True
    misprints = 0
    for t in range(2, 6):
        rows = REFERENCE_WAVES[t]
        kept = set(pareto_filter([u for _, u in rows]))
        for alloc, u in rows:
            rows_ok &= bool(is_feasible(inst, alloc)) and u in kept
            misprints += tuple(int(v) for v in utility_vector(inst, alloc)) != u
    terminal = len(pe.terminal)
    checks = {
        "initial": initial == (1422, 559, 1220),
        "wave1": wave1 == set(REFERENCE_WAVES[1]),
        "rows": rows_ok,
        "terminal": terminal in (10, 11),
        "runtime": elapsed < 10.0,
    }
    bad = [k for k, v in checks.items() if not v]
    verdict(2, not bad, f"terminal={terminal} (reference 11) rows with recomputed utilities differing "
                        f"from the reference={misprints} time={elapsed:.2f}s failing={bad}")


def test_criterion_03_erp_frontier_oracle(verdict):
    rng = random.Random(303)
    done = mismatches = 0
    while done < 500:
        inst = random_instance(rng, rng.randint(2, 4), rng.randint(2, 4),
                               kind="linear" if done % 2 else "cara", max_q=12)
        h, k = rng.sample(range(inst.n_agents), 2)
        i, j = rng.sample(range(inst.n_commodities), 2)
        d = direction(inst, h, k, i, j)
        iv = step_interval(inst, inst.q, d)
        if iv.hi_int - iv.lo_int > 60:
            continue
        mismatches += [p.alpha for p in pareto_frontier(inst, inst.q, d)] != brute_frontier(inst, inst.q, d)
        done += 1
    verdict(3, mismatches == 0, f"{mismatches} mismatches in {done} instances")


def test_criterion_04_pareto_filter(verdict):
    rng = random.Random(404)
    mismatches = 0
    for _ in range(1000):
        dim = rng.randint(1, 6)
        top = rng.choice([3, 10, 1000])
        vs = [tuple(rng.randint(0, top) for _ in range(dim)) for _ in range(rng.randint(1, 200))]
        out = pareto_filter(vs)
        mismatches += len(out) != len(set(out)) or set(out) != naive_filter(vs)
    verdict(4, mismatches == 0, f"{mismatches} mismatches in 1000 sets")


def test_criterion_05_ser_fixed_points(verdict):
    rng = random.Random(505)
    violations = converged = compared = attained = 0
    above = 0
    for t in range(100):
        n, m = rng.randint(2, 6), rng.randint(2, 6)
        kind = rng.choice(["linear", "cara"])
        inst = random_instance(rng, n, m, kind=kind, max_q=5)
        cfg = SearchConfig(mode=rng.choice(["first", "best"]), objective=rng.choice(["pareto", "welfare"]))
        res = run_ser(inst, cfg)
        if res.log.converged:
            converged += 1
            violations += bool(improving_moves(inst, res.final, cfg))
        if kind == "linear" and n <= 4 and m <= 4:
            wres = res if cfg.objective == "welfare" else run_ser(inst, SearchConfig(mode=cfg.mode, objective="welfare"))
            opt = branch_and_bound_linear(inst).welfare
            got = welfare(list(utility_vector(inst, wres.final)))
            compared += 1
            above += got > opt
            attained += got == opt
    ok = violations == 0 and above == 0 and converged > 0
    verdict(5, ok, f"converged={converged}/100 scan violations={violations}; welfare vs optimum: "
                   f"compared={compared} above={above} attained={attained}")


def test_criterion_06_proposition_one(verdict):
    rng = random.Random(606)
    checked = violations = 0
    for _ in range(400):
        inst = random_instance(rng, rng.randint(2, 4), rng.randint(1, 3), max_q=4, unit=rng.random() < 0.5)
        bound = prop1_bound(inst)
        if bound > 10 ** 5:
            continue
        res = enumerate_allocations(inst, limit=10 ** 6)
        checked += 1
        violations += not (isinstance(res.count, int) and res.count <= bound)
    verdict(6, violations == 0 and checked > 0, f"{violations} violations over {checked} instances")


def test_criterion_07_unimodality(verdict):
    rng = random.Random(707)
    violations = 0
    for _ in range(500):
        n, m = rng.randint(2, 4), rng.randint(2, 4)
        inst = random_instance(rng, n, m, kind="cara", max_q=25)
        h, k = rng.sample(range(n), 2)
        i, j = rng.sample(range(m), 2)
        d = direction(inst, h, k, i, j)
        iv = step_interval(inst, inst.q, d)
        for slot in (0, 1):
            vals = [trader_utilities(inst, inst.q, d, a)[slot] for a in iv.integers()]
            signs = [1 if b > a else -1 for a, b in zip(vals, vals[1:]) if b != a]
            changes = sum(1 for a, b in zip(signs, signs[1:]) if a != b)
            violations += changes > 1 or any(a < 0 < b for a, b in zip(signs, signs[1:]))
    verdict(7, violations == 0, f"{violations} violations in 500 trials")


def test_criterion_08_lyapunov_bound(verdict):
    rng = random.Random(808)
    violations = steps = 0
    for t in range(200):
        n, m = rng.randint(2, 5), rng.randint(2, 5)
        prices = tuple(Fraction(rng.randint(1, 10), 10) for _ in range(m))
        q = tuple(tuple(rng.randint(0, 8) for _ in range(m)) for _ in range(n))
        utils = tuple(UtilitySpec.linear([Fraction(rng.randint(0, 10), 10) for _ in range(m)]) for _ in range(n))
        inst = EconomyInstance(prices, (1,) * n, q, utils)
        cfg = SearchConfig(mode=rng.choice(["first", "best"]), objective=rng.choice(["pareto", "welfare"]))
        res = run_ser(inst, cfg)
        steps += len(res.lyapunov.deltas)
        violations += not check_delta_bound(inst, res.lyapunov)
    verdict(8, violations == 0, f"{violations} runs with a step above the bound ({steps} steps in 200 runs)")


def test_criterion_09_interior_point(verdict):
    rng = random.Random(909)
    worst_dir, worst_kkt, unconverged = {}, 0.0, 0
    for kind, rational in itertools.product(["linear", "cara"], [True, False]):
        worst = []
        for _ in range(4):
            n, m = rng.randint(1, 10), rng.randint(2, 10)
            inst = random_instance(rng, n, m, kind=kind, max_q=8)
            inst = inst.replace(endowments=tuple(tuple(v + 1 for v in row) for row in inst.endowments))
            prob = relaxation(inst, rational=rational)

            def check(pr, st):
                dirn = newton_direction_structured(pr, st, st.mu)
                dense = newton_direction_dense(pr, st, st.mu)
                scale = max(1.0, float(np.max(np.abs(dense.flat()))))
                worst.append(float(np.max(np.abs(dirn.flat() - dense.flat()))) / scale)

            st0 = initial_state(prob, inst.q)
            check(prob, st0)
            res = run_ipm(prob, q=inst.q, on_iteration=lambda pr, st, _: check(pr, st))
            if res.converged:
                worst_kkt = max(worst_kkt, res.primal_residual, res.dual_residual, res.complementarity)
            else:
                unconverged += 1
        worst_dir[f"{kind}/{'rational' if rational else 'plain'}"] = max(worst)

    lp_gap, relax_gap = 0.0, 0.0
    for _ in range(15):
        inst = random_instance(rng, rng.randint(2, 4), rng.randint(2, 4))
        inst = inst.replace(endowments=tuple(tuple(v + 1 for v in row) for row in inst.endowments))
        ref = highs_lp(inst)
        lp = solve_relaxation(inst, rational=False)
        lp_gap = max(lp_gap, abs(lp.welfare - ref) / (1 + abs(ref)))
        bb = branch_and_bound_linear(inst)
        box = highs_lp(inst, lower=bb.root_bounds[0], upper=bb.root_bounds[1])
        lp_gap = max(lp_gap, abs(bb.root_lp - box) / (1 + abs(box)))
        relax_gap = max(relax_gap, float(bb.welfare) - lp.welfare)
        # bilateral trades never push an agent below its endowment
        rational_x = run_ser(inst, SearchConfig("best", "pareto")).final
        relax_gap = max(relax_gap, float(sum(utility_vector(inst, rational_x))) - solve_relaxation(inst).welfare)
    checks = {
        "structured=dense": max(worst_dir.values()) <= 1e-8,
        "kkt": worst_kkt <= 1e-6 and unconverged == 0,
        "lp": lp_gap <= 1e-6,
        "relaxation>=integer": relax_gap <= 1e-6,
    }
    bad = [k for k, v in checks.items() if not v]
    dirs = " ".join(f"{k}={v:.1e}" for k, v in worst_dir.items())
    verdict(9, not bad, f"direction gaps {dirs}; kkt={worst_kkt:.1e} unconverged={unconverged} "
                        f"lp gap={lp_gap:.1e} integer excess={relax_gap:.1e} failing={bad}")


def test_criterion_10_scaling(verdict):
    start = time.perf_counter()
    spec = ExperimentSpec(kind="scaling", sizes=list(range(6, 21)), replicates=3, seed=0, workers=4)
    fit = fit_scaling(scaling_points(spec))["power"]
    elapsed = time.perf_counter() - start
    ok = fit.r_squared >= 0.9 and 1.5 <= fit.beta1 <= 2.6 and elapsed < 300
    verdict(10, ok, f"beta1={fit.beta1:.3f} R2={fit.r_squared:.4f} time={elapsed:.1f}s")


@pytest.mark.filterwarnings("ignore:trade network splits")
def test_criterion_11_network(verdict):
    rng = random.Random(1111)
    mismatched = unbalanced = over = 0
    runs = 0
    for _ in range(40):
        n, m = rng.randint(2, 5), rng.randint(2, 4)
        inst = random_instance(rng, n, m, kind=rng.choice(["linear", "cara"]))
        cfg = SearchConfig(mode=rng.choice(["first", "best"]), objective=rng.choice(["pareto", "welfare"]))
        full = run_network_ser(inst, TradeNetwork.complete(n), cfg)
        mismatched += full.log.to_csv() != run_ser(inst, cfg).log.to_csv()
        caps = [[v + rng.randint(0, 4) for v in row] for row in inst.endowments]
        edges = tuple((a, b) for a in range(n) for b in range(a + 1, n) if rng.random() < 0.7)
        net = TradeNetwork(n, edges, caps)
        for topo, res in ((TradeNetwork.complete(n), full), (net, run_network_ser(inst, net, cfg))):
            runs += 1
            unbalanced += not check_flow_balance(inst, topo, res.final, res.flows)
            x = np.array(inst.q)
            for e in res.log.events:
                x = direction(inst, e.h, e.k, e.i, e.j).apply(x, e.alpha)
                if topo.capacities is not None and np.any(x > np.array(topo.capacities)):
                    over += 1
                    break
    ok = mismatched == 0 and unbalanced == 0 and over == 0
    verdict(11, ok, f"log mismatches={mismatched}/40 unbalanced={unbalanced}/{runs} capacity breaches={over}")


def test_criterion_12_null_models(verdict):
    out = sample_null(ValuedNetwork(sym(3, [2, 0, 0])), FIXED_TOTAL, 10_000, seed=12)
    counts = Counter(tuple(s.pair_values()) for s in out.networks)
    space = [c for c in itertools.product(range(3), repeat=3) if sum(c) == 2]
    p = chisquare([counts[tuple(map(float, c))] for c in space]).pvalue
    conditioned = set(counts) <= {tuple(map(float, c)) for c in space}
    rng = np.random.default_rng(12)
    signs = Counter()
    for _ in range(20):
        net = random_net(rng, 6)
        conditioned &= all(s.total == net.total for s in sample_null(net, FIXED_TOTAL, 50, int(rng.integers(1e6))).networks)
        rows = sample_null(net, FIXED_ROWS, 50, int(rng.integers(1e6)))
        conditioned &= all(np.array_equal(s.strengths, net.strengths) for s in rows.networks)
        null = [v for v in (strength_assortativity(s) for s in rows.networks) if not math.isnan(v)]
        obs = strength_assortativity(net)
        if null and not math.isnan(obs):
            signs["observed below null mean" if obs < np.mean(null) else "observed at or above null mean"] += 1
    verdict(12, p > 0.01 and conditioned, f"chi-square p={p:.3f} conditioning exact={conditioned} "
                                          f"AC sign under fixed_rows null: {dict(signs)}")


def test_criterion_13_assortativity(verdict):
    hand = assortativity(ValuedNetwork(sym(3, [5, 1, 1])), [(1, 0), (0, 1), (1, 1)], TYPE1)
    rng = np.random.default_rng(13)
    outside = defined = 0
    for _ in range(100):
        n = int(rng.integers(3, 9))
        net = random_net(rng, n)
        c = rng.uniform(0, 3, size=(n, 3))
        for v in [assortativity(net, c, k) for k in (TYPE1, TYPE2, TYPE3)] + [strength_assortativity(net)]:
            if not math.isnan(v):
                defined += 1
                outside += not -1.0 <= v <= 1.0
    ok = abs(hand - 1.0) <= 1e-12 and outside == 0
    verdict(13, ok, f"hand example error={abs(hand - 1.0):.1e}; {outside} of {defined} defined values outside [-1,1]")
