"""Command line: ``bbmlab <experiment> --config FILE [--seed S] [--out DIR]`` plus module tools.

Exit status is 0 on success, 2 when the run completed with flagged rows and
1 on error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .experiments import EXPERIMENTS, emit_outputs, run_experiment
from .model import DomainError, load_config

log = logging.getLogger("bbmlab")


def _add_experiment(sub, name):
    p = sub.add_parser(name, help=f"run the {name} experiment")
    p.add_argument("--config", type=Path, help="JSON or TOML config")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", type=Path, default=Path("results"))
    p.add_argument("--format", default="csv,json", help="comma-separated: csv, json")


def _params_args(p):
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--epsilon", type=float)
    g.add_argument("--N", type=int)
    p.add_argument("--a", type=float, default=0.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bbmlab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        _add_experiment(sub, name)

    s = sub.add_parser("survive", help="Monte Carlo survival probability from one particle")
    _params_args(s)
    s.add_argument("--x", type=float, required=True)
    s.add_argument("--dt", type=float)
    s.add_argument("--horizon", type=float, default=200.0)
    s.add_argument("--replicas", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--pop-cap", type=int, default=1_000_000)

    w = sub.add_parser("wave", help="solve the traveling wave or the survival BVP")
    w.add_argument("--kind", choices=["theta", "Q"], default="theta")
    w.add_argument("--mu", type=float, help="drift for --kind Q")
    w.add_argument("--n", type=int, default=4097)
    w.add_argument("--tol", type=float, default=1e-10)
    w.add_argument("--out", type=Path, required=True, help="CSV path; a JSON sidecar is written next to it")

    c = sub.add_parser("csbp", help="sample CSBP paths or evaluate the Laplace flow")
    c.add_argument("--a", type=float, default=0.0)
    c.add_argument("--z0", type=float, default=1.0)
    c.add_argument("--T", type=float, default=3.0)
    c.add_argument("--steps", type=int, default=30)
    c.add_argument("--paths", type=int, default=10)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", type=Path)
    c.add_argument("--flow", nargs=2, type=float, metavar=("LAMBDA", "T"),
                   help="print u_T(LAMBDA) and exit")

    k = sub.add_parser("coalesce", help="sample Bolthausen-Sznitman partition processes")
    k.add_argument("--n", type=int, default=4)
    k.add_argument("--horizon", type=float, default=10.0)
    k.add_argument("--samples", type=int, default=100)
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--out", type=Path, required=True)
    return parser


def _run_experiment(args) -> int:
    cfg = load_config(args.config) if args.config else {}
    if args.seed is not None:
        cfg["master_seed"] = args.seed
    cfg.setdefault("master_seed", 0)
    table = run_experiment(args.command, cfg)
    paths = emit_outputs(table, args.out, tuple(f.strip() for f in args.format.split(",") if f.strip()))
    for p in paths:
        print(p)
    if table.flagged:
        log.warning("completed with flagged rows")
        return 2
    return 0


def _run_survive(args) -> int:
    from .engine import MCSettings, estimate_survival
    from .model import params_from_epsilon, params_from_N

    params = params_from_epsilon(args.epsilon, args.a) if args.epsilon is not None else params_from_N(args.N, args.a)
    est = estimate_survival(
        args.x, params,
        MCSettings(replicas=args.replicas, horizon=args.horizon, cap=args.pop_cap, dt=args.dt),
        args.seed,
    )
    print(json.dumps({"p_hat": est.p_hat, "ci_halfwidth": est.ci_halfwidth,
                      "decided_fraction": est.decided_fraction, "counts": est.counts}, sort_keys=True))
    return 2 if est.unreliable else 0


def _run_wave(args) -> int:
    from .wave import solve_kolmogorov_bvp, solve_traveling_wave

    if args.kind == "theta":
        sol = solve_traveling_wave(n=args.n, tol=args.tol)
    else:
        if args.mu is None:
            raise DomainError("--mu is required for --kind Q")
        sol = solve_kolmogorov_bvp(args.mu, n=args.n, tol=args.tol)
    sol.to_csv(args.out)
    print(args.out)
    return 0


def _run_csbp(args) -> int:
    from .csbp import CsbpParams, CsbpPath, laplace_flow, sample_log_paths, write_paths_csv

    params = CsbpParams(args.a)
    if args.flow is not None:
        print(repr(laplace_flow(args.flow[0], args.flow[1], params)))
        return 0
    if args.out is None:
        raise DomainError("--out is required when sampling paths")
    rng = np.random.default_rng(np.random.SeedSequence(args.seed))
    grid, logs = sample_log_paths(args.z0, np.linspace(0.0, args.T, args.steps + 1), params, args.paths, rng)
    paths = [CsbpPath(grid, row, args.z0) for row in logs]
    write_paths_csv(args.out, paths, params)
    print(args.out)
    return 0


def _run_coalesce(args) -> int:
    from .coalescent import bs_ensemble, save_ensemble

    rng = np.random.default_rng(np.random.SeedSequence(args.seed))
    save_ensemble(args.out, bs_ensemble(args.n, args.horizon, args.samples, rng))
    print(args.out)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    handlers = {"survive": _run_survive, "wave": _run_wave, "csbp": _run_csbp,
                "coalesce": _run_coalesce}
    try:
        if args.command in EXPERIMENTS:
            return _run_experiment(args)
        return handlers[args.command](args)
    except (DomainError, ValueError, OSError, KeyError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
