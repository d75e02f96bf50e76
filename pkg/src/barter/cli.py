"""Command-line entry point: ``barter <verb> [options]``.

Exit codes: 0 ok, 1 invalid input, 2 not converged, 3 resource limit.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .economy import format_number, load_instance
from .errors import InvalidInstanceError, NotConvergedError, ResourceLimitError
from .experiments import ExperimentSpec, Factors, generate_instance, run_experiment
from .ipm import relaxation, run_ipm
from .netstats import (FIXED_ROWS, FIXED_TOTAL, TYPE1, TYPE2, TYPE3, ValuedNetwork, assortativity,
                       network_statistics, stats_csv)
from .oracle import enumerate_allocations
from .pareto import enumerate_paths, frontier_csv
from .ser import SearchConfig, run_ser

EXIT_OK, EXIT_INVALID, EXIT_NOT_CONVERGED, EXIT_LIMIT = 0, 1, 2, 3


def _emit(files: dict, out: str | None) -> None:
    if out is None:
        for name, text in files.items():
            if len(files) > 1:
                sys.stdout.write(f"# {name}\n")
            sys.stdout.write(text)
        return
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (path / name).write_text(text)


def _allocation_csv(x) -> str:
    rows = ["agent," + ",".join(f"c{j}" for j in range(len(x[0])))]
    rows += [f"{h}," + ",".join(str(int(v)) for v in row) for h, row in enumerate(x)]
    return "\n".join(rows) + "\n"


def _need_instance(args):
    if not args.instance:
        raise InvalidInstanceError("--instance is required")
    return load_instance(args.instance)


def cmd_generate(args) -> int:
    inst = generate_instance(args.n, args.m, args.seed,
                             Factors(args.price_sigma, args.same, args.cross), args.utility)
    _emit({"instance.json": inst.to_json()}, args.out)
    return EXIT_OK


def cmd_run(args) -> int:
    if args.spec:
        spec = ExperimentSpec.from_json(Path(args.spec).read_text())
        if args.seed is not None:
            spec.seed = args.seed
        reports = run_experiment(spec)
        _emit(reports, args.out)
        return EXIT_OK
    inst = _need_instance(args)
    config = SearchConfig(mode=args.mode, objective=args.objective, order_seed=args.seed)
    res = run_ser(inst, config)
    if args.format == "json":
        payload = res.log.to_dict()
        payload["final"] = res.final.tolist()
        payload["lyapunov"] = [format_number(v) for v in res.lyapunov.values]
        _emit({"run.json": json.dumps(payload, indent=1) + "\n"}, args.out)
    else:
        _emit({"trades.csv": res.log.to_csv(), "lyapunov.csv": res.lyapunov.to_csv(),
               "final.csv": _allocation_csv(res.final)}, args.out)
    return EXIT_OK if res.log.converged else EXIT_NOT_CONVERGED


def cmd_enumerate(args) -> int:
    inst = _need_instance(args)
    if args.allocations:
        res = enumerate_allocations(inst, limit=args.limit)
        if args.format == "json":
            text = json.dumps({"count": res.count, "bound": str(res.bound),
                               "allocations": [a.tolist() for a in res.allocations]}) + "\n"
            _emit({"allocations.json": text}, args.out)
        else:
            lines = ["allocation"] + [" | ".join(" ".join(str(v) for v in row) for row in a)
                                      for a in res.allocations]
            _emit({"allocations.csv": "\n".join(lines) + "\n"}, args.out)
        return EXIT_OK
    pe = enumerate_paths(inst, max_waves=args.limit)
    if args.format == "json":
        waves = [{"wave": w.wave, "allocations": [list(map(list, a)) for a in w.allocations],
                  "utilities": [[format_number(v) for v in u] for u in w.utilities]} for w in pe.waves]
        _emit({"frontier.json": json.dumps({"neighborhoods": pe.neighborhoods, "waves": waves}) + "\n"}, args.out)
    else:
        _emit({"frontier.csv": frontier_csv(pe.waves)}, args.out)
    return EXIT_OK


def cmd_solve_ipm(args) -> int:
    inst = _need_instance(args)
    prob = relaxation(inst, rational=not args.no_rationality)
    res = run_ipm(prob, tol=args.tol, q=inst.q, check_dense=args.check_dense)
    if args.format == "json":
        payload = {"converged": res.converged, "iterations": res.iterations, "welfare": res.welfare,
                   "x": res.x.tolist(), "primal_residual": res.primal_residual,
                   "dual_residual": res.dual_residual, "complementarity": res.complementarity}
        _emit({"ipm.json": json.dumps(payload, indent=1) + "\n"}, args.out)
    else:
        sol = "agent," + ",".join(f"c{j}" for j in range(inst.n_commodities)) + "\n"
        sol += "".join(f"{h}," + ",".join(repr(float(v)) for v in row) + "\n" for h, row in enumerate(res.x))
        _emit({"ipm_trace.csv": res.trace_csv(), "ipm_solution.csv": sol}, args.out)
    if not res.converged:
        raise NotConvergedError(f"interior-point method stopped after {res.iterations} iterations")
    return EXIT_OK


def cmd_stats(args) -> int:
    inst = _need_instance(args)
    res = run_ser(inst, SearchConfig(mode=args.mode, objective=args.objective))
    grads = np.array([[float(g) for g in inst.utilities[h].gradient(res.final[h])] for h in range(inst.n_agents)])
    nets = {"interaction": ValuedNetwork.from_log(res.log, "interaction"),
            "flow": ValuedNetwork.from_log(res.log, "flow")}
    assort = ["network,type1,type2,type3"]
    for name, net in nets.items():
        vals = [assortativity(net, grads, k) for k in (TYPE1, TYPE2, TYPE3)] if net.n >= 3 else [float("nan")] * 3
        assort.append(name + "," + ",".join(repr(v) for v in vals))
    rows = []
    seed = 0 if args.seed is None else args.seed
    if nets["interaction"].n >= 3:
        for model in (FIXED_TOTAL, FIXED_ROWS):
            rows += network_statistics(f"interaction/{model}", nets["interaction"], model, args.samples, seed)
    _emit({"assortativity.csv": "\n".join(assort) + "\n", "network_stats.csv": stats_csv(rows)}, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="barter", description="Barter economies: search, enumeration, relaxation.")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, instance=True):
        if instance:
            p.add_argument("--instance", help="instance JSON file")
        p.add_argument("--out", help="output directory (default: stdout)")
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        p.add_argument("--seed", type=int, default=None)

    g = sub.add_parser("generate", help="write a random instance")
    common(g, instance=False)
    g.add_argument("--n", type=int, default=4)
    g.add_argument("--m", type=int, default=4)
    g.add_argument("--price-sigma", type=float, default=0.5)
    g.add_argument("--same", type=float, default=0.0)
    g.add_argument("--cross", type=float, default=0.0)
    g.add_argument("--utility", choices=("linear", "cara"), default="linear")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="run the local search on an instance, or an experiment spec")
    common(r)
    r.add_argument("--spec", help="experiment spec JSON file")
    r.add_argument("--mode", choices=("first", "best"), default="first")
    r.add_argument("--objective", choices=("pareto", "welfare"), default="pareto")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("enumerate", help="wave-by-wave non-dominated allocations")
    common(e)
    e.add_argument("--allocations", action="store_true", help="list every feasible allocation instead")
    e.add_argument("--limit", type=int, default=1_000_000)
    e.set_defaults(func=cmd_enumerate)

    s = sub.add_parser("solve-ipm", help="continuous relaxation by interior point")
    common(s)
    s.add_argument("--tol", type=float, default=1e-8)
    s.add_argument("--no-rationality", action="store_true")
    s.add_argument("--check-dense", action="store_true")
    s.set_defaults(func=cmd_solve_ipm)

    t = sub.add_parser("stats", help="network statistics of a local-search run")
    common(t)
    t.add_argument("--mode", choices=("first", "best"), default="first")
    t.add_argument("--objective", choices=("pareto", "welfare"), default="pareto")
    t.add_argument("--samples", type=int, default=1000)
    t.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse reports usage errors with status 2, which here means "not converged"
        return EXIT_INVALID if exc.code else EXIT_OK
    if args.verb == "generate" and args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except ResourceLimitError as exc:
        print(f"resource limit: {exc}", file=sys.stderr)
        return EXIT_LIMIT
    except NotConvergedError as exc:
        print(f"not converged: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except (InvalidInstanceError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
