"""Command-line entry point: ``modcredit {analyze,run,env-dump,check}``.

Exit codes: 0 success (or modular), 2 not modular, 1 any error.
The environment variable ``MODCREDIT_OUT`` sets the default output root.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path

from . import analyzer as az
from .causal_graph import export_dot

EXIT_OK, EXIT_ERROR, EXIT_NOT_MODULAR = 0, 1, 2


class UsageError(Exception):
    pass


def _algorithm(args) -> az.AlgorithmClass:
    name = args.algo_class
    if name in az.NAMED_CLASSES and args.sharing is None and args.n is None:
        return az.NAMED_CLASSES[name]
    base = az.NAMED_CLASSES.get(name)
    if base is not None:
        kind, sharing, on_policy, n = base.kind, base.sharing, base.on_policy, base.n
    else:
        if name in ("td-mc", "mc", "monte-carlo"):
            kind, n = az.Kind.TD_N, az.MONTE_CARLO
        else:
            try:
                kind = az.Kind(name)
            except ValueError:
                choices = sorted([k.value for k in az.Kind] + list(az.NAMED_CLASSES) + ["td-mc"])
                raise UsageError(f"unknown class {name!r}; choose from {choices}") from None
            n = None
        sharing, on_policy = az.Sharing.FACTORIZED, True
    if args.sharing is not None:
        sharing = az.Sharing(args.sharing)
    if args.n is not None:
        n = az.MONTE_CARLO if args.n == "mc" else int(args.n)
    if args.off_policy:
        on_policy = False
    if kind is az.Kind.TD_N and n is None:
        n = 2
    try:
        return az.AlgorithmClass(kind, sharing, n=n if kind is az.Kind.TD_N else None, on_policy=on_policy)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _trace(spec: str, T: int, N: int) -> az.TraceSkeleton:
    try:
        if spec == "acyclic":
            return az.TraceSkeleton.acyclic(T, N)
        if spec.startswith("cycle-at:"):
            return az.TraceSkeleton.with_collision(T, N, int(spec.split(":", 1)[1]))
    except ValueError as e:
        raise UsageError(str(e)) from None
    raise UsageError(f"trace must be 'acyclic' or 'cycle-at:<t>', got {spec!r}")


def cmd_analyze(args) -> int:
    if args.T < 0 or args.N < 1:
        raise UsageError("need T >= 0 and N >= 1")
    algo = _algorithm(args)
    skeleton = _trace(args.trace, args.T, args.N)
    verdict = az.check_dynamic_modularity(algo, skeleton)
    print(verdict.to_json())
    if args.report:
        print(az.factorization_report(algo, skeleton), file=sys.stderr)
    if args.dot:
        acml = az.build_acml(algo, skeleton)
        Path(args.dot).write_text(export_dot(acml.graph, name=f"acml_{algo.label}"))
    return EXIT_OK if verdict.dynamic_modularity else EXIT_NOT_MODULAR


def cmd_run(args) -> int:
    from .harness import ConfigError, ExperimentConfig, run_suite

    try:
        config = ExperimentConfig.load(args.config, full=args.full)
    except (ConfigError, TypeError) as e:
        raise UsageError(str(e)) from None
    if args.jobs is not None:
        config.jobs = args.jobs
    if args.seeds:
        config.seeds = [int(s) for s in args.seeds.split(",")]
    if args.seed is not None:
        config.base_seed = args.seed
    try:
        config.validate()
    except ConfigError as e:
        raise UsageError(str(e)) from None
    root = Path(args.out or os.environ.get("MODCREDIT_OUT", "runs"))
    out = root / (args.name or f"{config.suite}-{time.strftime('%Y%m%d-%H%M%S')}")
    out.mkdir(parents=True, exist_ok=True)
    shutil.copy(args.config, out / ("input" + Path(args.config).suffix))
    cache = None if args.no_cache else root / "cache"
    result = run_suite(config, out, cache_dir=cache)
    print(json.dumps({"out": str(out), "rows": len(result.rows)}))
    return EXIT_OK


def cmd_env_dump(args) -> int:
    from .env import UnknownVariant, task_from_id

    try:
        task = task_from_id(args.task_id)
    except (UnknownVariant, KeyError, ValueError) as e:
        raise UsageError(f"unknown task id {args.task_id!r}: {e}") from None
    print(task.to_json())
    return EXIT_OK


def cmd_check(args) -> int:
    from .selfcheck import run_all

    failed = 0
    for name, ok, detail in run_all(n_oracle_seeds=args.oracle_seeds, n_grad=args.grad_instances, seed=args.seed or 0):
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        failed += not ok
    return EXIT_OK if not failed else EXIT_ERROR


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="modcredit", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None,
                   help="base seed mixed into every random stream (default: config value, else 0)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="modularity verdict for an algorithm class on a trace skeleton")
    a.add_argument("--class", dest="algo_class", required=True,
                   help="policy-gradient, tdn, td0, td-mc, or a named class (cvs, ppo, ppof, q-learning, ...)")
    a.add_argument("--T", type=int, default=3)
    a.add_argument("--N", type=int, default=3)
    a.add_argument("--trace", default="acyclic", help="acyclic or cycle-at:<t>")
    a.add_argument("--sharing", choices=[s.value for s in az.Sharing])
    a.add_argument("--n", help="TD(n) horizon, or 'mc'")
    a.add_argument("--off-policy", action="store_true", help="TD(0) target maximises over actions")
    a.add_argument("--dot", help="write the combined graph as DOT to this path")
    a.add_argument("--report", action="store_true", help="human-readable explanation on stderr")
    a.set_defaults(fn=cmd_analyze)

    r = sub.add_parser("run", help="run an experiment suite from a YAML/JSON config")
    r.add_argument("config")
    r.add_argument("--out", help="output root (default $MODCREDIT_OUT or ./runs)")
    r.add_argument("--name", help="run directory name (default: suite and timestamp)")
    r.add_argument("--full", action="store_true", help="use the full 1e7-sample budget")
    r.add_argument("--jobs", type=int, help="worker processes (default: available cores)")
    r.add_argument("--seeds", help="comma-separated seed list overriding the config")
    r.add_argument("--no-cache", action="store_true", help="recompute every chain")
    r.set_defaults(fn=cmd_run)

    e = sub.add_parser("env-dump", help="print a task specification as JSON")
    e.add_argument("task_id")
    e.set_defaults(fn=cmd_env_dump)

    c = sub.add_parser("check", help="self-test against independent oracles")
    c.add_argument("--oracle-seeds", type=int, default=60)
    c.add_argument("--grad-instances", type=int, default=3)
    c.set_defaults(fn=cmd_check)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_ERROR
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as e:  # noqa: BLE001  exit-code contract
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
