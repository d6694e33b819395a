"""Command line interface: ``bilevel-rl {run,sweep,verify,sweep-phi}``.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration
error, 3 a run diverged, 130 interrupted.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .actor_critic import DivergenceError
from .config import ConfigError, apply_overrides, build, defaults, load, render
from .harness import build_problem, output_dir, phi_lattice, run_sweep, run_to_file, write_phi_lattice
from .trace import format_real

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_DIVERGED, EXIT_INTERRUPTED = 0, 1, 2, 3, 130


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="config file (flat key = value with sections)")
    common.add_argument("--seed", type=int, help="overrides run.seed")
    common.add_argument("--out", help="output directory (default $BILEVEL_RL_OUT or ./out)")
    common.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="set one config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="bilevel-rl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="execute one configuration and write its trace")
    sw = sub.add_parser("sweep", parents=[common], help="run the [sweep] grid of a config")
    sw.add_argument("--jobs", type=int, default=1, help="cells run in parallel (default 1)")
    sub.add_parser("sweep-phi", parents=[common], help="evaluate Phi on a lattice of x")
    vf = sub.add_parser("verify", help="run the invariant and identity suite")
    vf.add_argument("--check", action="append", default=[], metavar="NAME",
                    help="run only this check (repeatable); prefixes select groups")
    vf.add_argument("--list", action="store_true", help="list the checks and exit")
    return p


def _values(args):
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.config is not None:
        return load(args.config, overrides)
    return apply_overrides(defaults(), overrides)


def _stem(values, rc) -> str:
    if rc.name:
        return rc.name
    return "run" if values.source.startswith("<") else Path(values.source).stem


def _cmd_run(args) -> int:
    values = _values(args)
    rc = build(values)
    out = output_dir(args.out)
    stem = _stem(values, rc)
    path = out / f"{stem}_seed{rc.seed}.csv"
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}_seed{rc.seed}.ini").write_text(render(values))
    res = run_to_file(rc, path)
    fin = res.final
    print(f"{path}: k={fin.k} samples={fin.samples} phi={format_real(fin.phi)} "
          f"x=({', '.join(f'{v:.6g}' for v in fin.x)})")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    values = _values(args)
    if not values.sweep:
        raise ConfigError("sweep needs a [sweep] section", values.source)
    if args.jobs < 1:
        raise ConfigError("--jobs must be at least 1", "--jobs")
    out = output_dir(args.out)
    index, outcomes = run_sweep(values, out, args.jobs)
    bad = [oc for oc in outcomes if oc.status != "done"]
    print(f"{index}: {len(outcomes) - len(bad)} of {len(outcomes)} cells done")
    return EXIT_DIVERGED if bad else EXIT_OK


def _cmd_sweep_phi(args) -> int:
    values = _values(args)
    rc = build(values)
    problem = build_problem(rc)
    points, phis = phi_lattice(rc, problem)
    out = output_dir(args.out)
    path = write_phi_lattice(out / f"{_stem(values, rc)}_lattice.csv", points, phis)
    best = points[int(np.argmin(phis))]
    print(f"{path}: {len(points)} points, argmin x=({', '.join(f'{v:g}' for v in best)}) "
          f"phi={format_real(phis.min())}")
    return EXIT_OK


def _cmd_verify(args) -> int:
    from .verify import CHECKS, exit_code, run_checks

    if args.list:
        for c in CHECKS.values():
            print(f"{c.name}: {c.description}")
        return EXIT_OK
    names = list(CHECKS)
    if args.check:
        names = [n for n in names if any(n == c or n.startswith(c.rstrip(".") + ".") for c in args.check)]
        if not names:
            raise ConfigError(f"no check matches {args.check}", "--check")

    def report(r):
        print(f"{r.status:<10} {r.name} ({r.seconds:.1f}s): {r.detail}", flush=True)
        if r.known_failure and not r.passed:
            print(f"{'':<10} known limitation: {r.known_failure}", flush=True)

    results = run_checks(names, report)
    failed = sum(not r.passed and not r.known_failure for r in results)
    known = sum(not r.passed and bool(r.known_failure) for r in results)
    print(f"{len(results) - failed - known} passed, {failed} failed, {known} known failures")
    return EXIT_OK if exit_code(results) == 0 else EXIT_VERIFY


COMMANDS = {"run": _cmd_run, "sweep": _cmd_sweep, "sweep-phi": _cmd_sweep_phi, "verify": _cmd_verify}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_INTERRUPTED


if __name__ == "__main__":
    sys.exit(main())
