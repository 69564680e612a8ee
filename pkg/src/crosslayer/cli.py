"""Command-line interface.

Verbs:
  solve   run one algorithm on one seed:
            crosslayer solve --algo wmmse --config inst.json --seed 0 --out runs/
            crosslayer solve --algo joint-sched --slots 2 ...
            crosslayer solve --algo sparse-wmmse --lambda 0.3 ...
            crosslayer solve --algo nmaxmin --graph net.graph ...
            crosslayer solve --algo stochastic-wmmse --iters 500 --eval-samples 200 ...
  sweep   run a full experiment config (seed list) and emit per-seed artifacts
  cdf     empirical rate CDF from a rates.csv (or one-column) file
  oracle  brute-force references: grid-sumrate on an instance, maxflow on a graph

Exit codes: 0 ok, 1 configuration error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .errors import ConfigurationError, NumericError

ALGO_CHOICES = (
    "wmmse", "joint-sched", "joint-assign", "sparse-wmmse", "nmaxmin",
    "stochastic-wmmse", "nn-wmmse", "svd-mmse-tdma", "random-sched",
    "one-sample", "mean", "sgd",
)


def _build_parser():
    parser = argparse.ArgumentParser(prog="crosslayer")
    sub = parser.add_subparsers(dest="verb", required=True)

    ps = sub.add_parser("solve", help="run one algorithm for one seed")
    ps.add_argument("--algo", required=True, choices=ALGO_CHOICES)
    ps.add_argument("--config", help="instance JSON (or full experiment JSON)")
    ps.add_argument("--graph", help="backhaul graph file (nmaxmin)")
    ps.add_argument("--seed", type=int, default=0)
    ps.add_argument("--out", help="output directory")
    ps.add_argument("--slots", type=int)
    ps.add_argument("--lambda", dest="lam", type=float)
    ps.add_argument("--iters", type=int)
    ps.add_argument("--eval-samples", type=int)
    ps.add_argument("--theta", type=float)
    ps.add_argument("--workers", type=int, default=1)
    ps.add_argument("--alpha", type=float, help="alpha-fair utility parameter")
    ps.add_argument("--units", choices=("nats", "bits"), default="nats")

    pw = sub.add_parser("sweep", help="run an experiment config over its seed list")
    pw.add_argument("--config", required=True)
    pw.add_argument("--out", help="override the config's output directory")

    pc = sub.add_parser("cdf", help="empirical CDF of a rates file")
    pc.add_argument("--rates", required=True)
    pc.add_argument("--out", help="output CSV (default: stdout)")

    po = sub.add_parser("oracle", help="brute-force reference values")
    po.add_argument("--kind", required=True, choices=("grid-sumrate", "maxflow"))
    po.add_argument("--config", help="instance JSON (grid-sumrate)")
    po.add_argument("--graph", help="graph file (maxflow)")
    po.add_argument("--grid", type=int, default=200)
    po.add_argument("--seed", type=int, default=0)
    return parser


def _solve(args) -> int:
    from .harness import ExperimentConfig, run_experiment

    exp = {"algorithm": args.algo, "seeds": [args.seed], "units": args.units}
    if args.config:
        with open(args.config) as fh:
            blob = json.load(fh)
        if "algorithm" in blob:  # full experiment config: args override
            exp = {**blob, **{"algorithm": args.algo, "units": args.units}}
            exp.setdefault("seeds", [args.seed])
        else:
            exp["instance"] = blob
    if args.graph:
        exp["graph_path"] = args.graph
    if args.out:
        exp["out_dir"] = args.out
    params = dict(exp.get("params", {}))
    for key, name in (
        ("slots", "slots"), ("lam", "lam"), ("iters", "iterations"),
        ("eval_samples", "eval_samples"), ("theta", "theta"),
    ):
        val = getattr(args, key, None)
        if val is not None:
            params[name] = val
    if args.workers != 1:
        params["workers"] = args.workers
    if params:
        exp["params"] = params
    if args.alpha is not None:
        exp["utility"] = {"kind": "alpha-fair", "alpha": args.alpha}
    results = run_experiment(ExperimentConfig.from_dict(exp))
    for seed, rep in results:
        final = rep.sum_rate[-1] if rep.sum_rate else float("nan")
        print(
            f"seed={seed} algo={rep.algo} iterations={rep.iterations} "
            f"converged={rep.converged} final={final!r}"
        )
    return 0


def _sweep(args) -> int:
    from .harness import ExperimentConfig, run_experiment

    cfg = ExperimentConfig.from_file(args.config)
    if args.out:
        cfg.out_dir = args.out
    results = run_experiment(cfg)
    for seed, rep in results:
        final = rep.sum_rate[-1] if rep.sum_rate else float("nan")
        print(f"seed={seed} converged={rep.converged} final={final!r}")
    return 0


def _cdf(args) -> int:
    from .harness import rate_cdf

    rates = []
    with open(args.rates) as fh:
        for line in fh:
            cell = line.strip().split(",")[-1]
            try:
                rates.append(float(cell))
            except ValueError:
                continue  # header
    if not rates:
        raise ConfigurationError(f"no rates found in {args.rates}")
    points = rate_cdf(np.asarray(rates))
    lines = ["rate,quantile"] + [f"{float(r)!r},{float(q)!r}" for r, q in points]
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    else:
        print("\n".join(lines))
    return 0


def _oracle(args) -> int:
    if args.kind == "grid-sumrate":
        if not args.config:
            raise ConfigurationError("grid-sumrate requires --config")
        from .harness import brute_force_sumrate
        from .net_model import NetworkInstance

        inst = NetworkInstance.load(args.config, seed=args.seed)
        print(f"grid-sumrate={brute_force_sumrate(inst, args.grid)!r}")
    else:
        if not args.graph:
            raise ConfigurationError("maxflow requires --graph")
        from .backhaul import BackhaulGraph, solve_flow_lp

        graph = BackhaulGraph.from_file(args.graph, seed=args.seed)
        flow = solve_flow_lp(graph)
        print(f"maxmin-flow={flow.min_rate!r}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handler = {"solve": _solve, "sweep": _sweep, "cdf": _cdf, "oracle": _oracle}[args.verb]
    try:
        return handler(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
