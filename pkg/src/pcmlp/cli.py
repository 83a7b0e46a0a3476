"""Command-line entry point: ``pcmlp run | lemmas | list-envs | eluder``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .core import RolloutError, TabularMdp, TabularPolicy, set_threads
from .envs import CATALOG
from .harness import ConfigError, load_config, resolve_config, run_experiment
from .odpc import ELUDER_INSTANCES, EluderInstance, eluder_dimension, eluder_instance

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

ELUDER_KEYS = {"builtin", "eps", "max_length", "no_repeat", "budget", "models", "policies", "context"}


def _threads_default() -> int:
    raw = os.environ.get("PCMLP_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcmlp", description="Policy-cover guided model-based exploration")
    p.add_argument("--threads", type=int, default=_threads_default(),
                   help="worker threads for rollouts (default: $PCMLP_THREADS or 1)")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-iteration progress")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a TOML config")
    run.add_argument("--config", help="TOML file with [run], [env], [pcmlp], [odpc], [ablation] sections")
    run.add_argument("--seed", type=int, help="override run.seed")
    run.add_argument("--out", help="override run.out (output directory)")
    run.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                     help="dotted-path override, e.g. pcmlp.N=5 (repeatable)")

    lem = sub.add_parser("lemmas", help="run the lemma diagnostic suite")
    lem.add_argument("--only", nargs="+", help="subset of checks to run")

    sub.add_parser("list-envs", help="print the environment catalog")

    el = sub.add_parser("eluder", help="brute-force eluder dimension of a small instance")
    el.add_argument("--instance", required=True,
                    help=f"TOML instance file or a built-in name ({', '.join(ELUDER_INSTANCES)})")
    el.add_argument("--eps", type=float, help="override the instance's eps")
    el.add_argument("--max-length", type=int, help="override max sequence length (default 10)")
    el.add_argument("--no-repeat", action="store_true", help="forbid repeated policies")
    el.add_argument("--budget", type=int, help="search node budget (default 10000)")
    return p


def load_eluder_instance(spec: str) -> tuple:
    """``(instance, options)`` from a TOML file or a built-in name."""
    if not Path(spec).exists():
        if spec in ELUDER_INSTANCES:
            return eluder_instance(spec), {}
        raise ConfigError(f"eluder instance {spec!r} is neither a file nor one of {ELUDER_INSTANCES}")
    raw = load_config(spec)
    unknown = sorted(set(raw) - ELUDER_KEYS)
    if unknown:
        raise ConfigError(f"eluder instance: unknown key(s) {', '.join(unknown)}")
    opts = {k: raw[k] for k in ("max_length", "no_repeat", "budget") if k in raw}
    try:
        if "builtin" in raw:
            return eluder_instance(raw["builtin"], raw.get("eps")), opts
        ctx = raw["context"]
        P = np.asarray(ctx["P"], dtype=float)
        S, A = P.shape[:2]
        mdp = TabularMdp(P, np.zeros((S, A)), int(ctx.get("horizon", 1)), int(ctx.get("initial_state", 0)))
        policies = [TabularPolicy.from_actions(np.asarray(a, dtype=int).reshape(mdp.horizon, S), A)
                    for a in raw["policies"]]
        return EluderInstance(tuple(raw["models"]), tuple(policies), mdp, float(raw["eps"])), opts
    except KeyError as err:
        raise ConfigError(f"eluder instance: missing key {err}") from None
    except (TypeError, ValueError) as err:
        raise ConfigError(f"eluder instance: {err}") from None


def _cmd_run(args) -> int:
    raw = load_config(args.config) if args.config else {}
    tree = resolve_config(raw, args.override, args.seed, args.out)
    summary = run_experiment(tree)
    print(json.dumps(summary, indent=2, sort_keys=True, default=str))
    print(f"wrote {tree['run']['out']}")
    return EXIT_OK


def _cmd_lemmas(args) -> int:
    from .lemmas import ALL_CHECKS

    names = args.only or list(ALL_CHECKS)
    unknown = [n for n in names if n not in ALL_CHECKS]
    if unknown:
        raise ConfigError(f"unknown check(s) {', '.join(unknown)}; choose from {list(ALL_CHECKS)}")
    ok = True
    for name in names:
        res = ALL_CHECKS[name]()
        print(res.line(), flush=True)
        ok &= res.passed
    return EXIT_OK if ok else EXIT_RUNTIME


def _cmd_list_envs(args) -> int:
    width = max(map(len, CATALOG))
    for name, (_, family, desc) in sorted(CATALOG.items()):
        print(f"{name:<{width}}  {family:<8}  {desc}")
    return EXIT_OK


def _cmd_eluder(args) -> int:
    inst, opts = load_eluder_instance(args.instance)
    if args.eps is not None:
        inst = inst.with_eps(args.eps)
    res = eluder_dimension(inst, max_length=args.max_length or opts.get("max_length", 10),
                           no_repeat=args.no_repeat or opts.get("no_repeat", False),
                           budget=args.budget or opts.get("budget", 10**4))
    print(f"eluder dimension {res.dimension} at eps={inst.eps:g}")
    print(f"sequence {list(res.sequence)}; capped={res.capped}; budget_exceeded={res.budget_exceeded}; "
          f"nodes={res.nodes}")
    return EXIT_OK


COMMANDS = {"run": _cmd_run, "lemmas": _cmd_lemmas, "list-envs": _cmd_list_envs, "eluder": _cmd_eluder}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    set_threads(args.threads)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (RolloutError, ArithmeticError, AssertionError, RuntimeError, ValueError, np.linalg.LinAlgError) as err:
        print(f"runtime failure: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
