"""Command line entry points; exit codes are 0 on success, 1 on config errors, 2 on runtime failures."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .doar import DoarError, doar_loop
from .env import ConfigError
from .experiments import (
    CROSS_ATTACKER,
    CROSS_DEFENDER,
    ExperimentError,
    Scenario,
    SweepSpec,
    doar_strategies,
    emit_report,
    load_solution,
    resolve,
    run_cross_table,
    run_sweep,
    save_solution,
    sweep_checks,
)
from .learn import LearnError
from .model import Role
from .nvd import NvdError, ingest_nvd

log = logging.getLogger("cyberposg")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _scenario(path: str | None) -> Scenario:
    return Scenario.load(path) if path else Scenario()


def cmd_run(args) -> int:
    """Full pipeline: solve, cross-table against the baselines, report."""
    scenario = _scenario(args.scenario)
    out = Path(args.out)
    result = doar_loop(scenario.env, scenario.doar, seed=args.seed)
    save_solution(result, scenario, out / "solution")
    solution = doar_strategies(result)
    table = run_cross_table(scenario.env, resolve(CROSS_ATTACKER, Role.ATTACKER, solution),
                            resolve(CROSS_DEFENDER, Role.DEFENDER, solution), scenario.cross_runs, args.seed)
    print(emit_report(out, cross=table), end="")
    return EXIT_OK


def cmd_solve(args) -> int:
    scenario = _scenario(args.scenario)
    changes = {}
    if args.rounds is not None:
        changes["max_rounds"] = args.rounds
    if args.epsilon is not None:
        changes["epsilon"] = args.epsilon
    if changes:
        scenario = dataclasses.replace(scenario, doar=dataclasses.replace(scenario.doar, **changes))
    if scenario.doar.epsilon is not None and not scenario.doar.epsilon > 0:
        raise ConfigError("epsilon must be positive")
    result = doar_loop(scenario.env, scenario.doar, seed=args.seed)
    save_solution(result, scenario, args.out)
    for role in (Role.ATTACKER, Role.DEFENDER):
        mix = ", ".join(f"{i}={p:.3f}" for i, p in zip(result.pool.ids(role), result.profile.of(role)) if p > 0)
        print(f"{role.value}: value {result.values()[role]:.3f}  mixture {mix}")
    print(f"rounds {result.rounds}; outputs in {args.out}")
    return EXIT_OK


def cmd_cross_table(args) -> int:
    solution, scenario = None, _scenario(args.scenario)
    if args.solution:
        solution, solved = load_solution(args.solution)
        if not args.scenario:
            scenario = solved
    attackers = resolve(args.attacker.split(","), Role.ATTACKER, solution)
    defenders = resolve(args.defender.split(","), Role.DEFENDER, solution)
    table = run_cross_table(scenario.env, attackers, defenders, args.runs, args.seed)
    for p in table.write(args.out):
        print(p.read_text(), end="")
    return EXIT_OK


def cmd_sweep(args) -> int:
    spec = SweepSpec.load(args.spec)
    rows = run_sweep(spec)
    checks = sweep_checks(spec.parameter, spec.regime, rows, spec.known)
    print(emit_report(args.out, sweeps={spec.parameter: rows}, checks=checks), end="")
    return EXIT_OK


def cmd_ingest(args) -> int:
    if not Path(args.nvd).is_file():
        raise ConfigError(f"no NVD feed at {args.nvd}")
    rep = ingest_nvd(args.nvd, args.sample, args.seed)
    payload = [e.to_dict() for e in rep.exploits]
    text = json.dumps(payload, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    print(f"parsed {rep.parsed}, malformed {rep.malformed}, unmapped {rep.unmapped}, kept {len(payload)}",
          file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cyberposg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="solve, cross-table and report")
    r.add_argument("--scenario")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("solve", help="double-oracle equilibrium search")
    s.add_argument("--scenario")
    s.add_argument("--rounds", type=int)
    s.add_argument("--epsilon", type=float)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="solution")
    s.set_defaults(func=cmd_solve)

    c = sub.add_parser("cross-table", help="payoff table over strategy ids")
    c.add_argument("--attacker", default=",".join(CROSS_ATTACKER))
    c.add_argument("--defender", default=",".join(CROSS_DEFENDER))
    c.add_argument("--runs", type=int, default=10)
    c.add_argument("--solution", help="solve output directory providing the 'doar' strategies")
    c.add_argument("--scenario")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", default=".")
    c.set_defaults(func=cmd_cross_table)

    w = sub.add_parser("sweep", help="parameter sweep from a JSON spec")
    w.add_argument("--spec", required=True)
    w.add_argument("--out", default="sweep")
    w.set_defaults(func=cmd_sweep)

    i = sub.add_parser("ingest", help="map an offline NVD feed to exploit templates")
    i.add_argument("--nvd", required=True)
    i.add_argument("--sample", type=int, required=True)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out")
    i.set_defaults(func=cmd_ingest)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DoarError, ExperimentError, LearnError, NvdError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
