"""Command-line entry point: ``sgr <command> --config scenario.json``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .dynamics import ConfigurationError, SimulationDivergence
from .pipeline import run_certify, run_optimize, run_simulate, run_slice, run_sweep, run_verify
from .region.certify import CertificationRefused
from .scenario import ScenarioError, parse_scenario

COMMANDS = ("simulate", "certify", "estimate", "optimize", "verify", "slice", "sweep")


def _pair(text: str) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected two comma-separated integers, e.g. 1,2") from None
    return a, b


def _setting(text: str) -> tuple[str, list]:
    if "=" not in text:
        raise argparse.ArgumentTypeError("expected key=v1,v2,...")
    key, vals = text.split("=", 1)
    out = []
    for v in vals.split(","):
        try:
            out.append(json.loads(v))
        except json.JSONDecodeError:
            out.append(v)
    return key, out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sgr", description="Simulate, certify and verify multi-agent coordination regions.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="scenario JSON file")
    p.add_argument("--out", help="output directory (default: the scenario's outputs field)")
    p.add_argument("--seed", type=int, help="sampling seed (default: derived from the scenario)")
    p.add_argument("--slice-agent", type=int, help="agent whose position plane is sliced (1-based)")
    p.add_argument("--slice-dims", type=_pair, help="two 1-based coordinates of the slice plane")
    p.add_argument("--fix-at", choices=("formation", "initial"), default="formation",
                   help="value of the coordinates outside the slice plane")
    p.add_argument("--set", dest="sweep", type=_setting, action="append", default=[],
                   help="sweep parameter list as dotted.path=v1,v2 (repeatable)")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers for sweep")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "sweep":
            if not args.sweep:
                raise ScenarioError("--set", "sweep needs at least one parameter list")
            with open(args.config, encoding="utf-8") as fh:
                raw = json.load(fh)
            rows = run_sweep(raw, dict(args.sweep), args.out or raw.get("outputs", "out"), args.jobs)
            print(json.dumps(rows, indent=2, default=str))
            return 0 if all(r["status"] == "certified" for r in rows) else 3
        cfg = parse_scenario(args.config)
        if args.command == "simulate":
            summary = run_simulate(cfg, args.out)
        elif args.command in ("certify", "estimate"):
            summary = run_certify(cfg, args.out)
        elif args.command == "optimize":
            summary, _ = run_optimize(cfg, args.out)
        elif args.command == "verify":
            summary = run_verify(cfg, args.out, args.seed)
        else:
            summary = run_slice(cfg, args.out, args.slice_agent, args.slice_dims, args.fix_at)
    except CertificationRefused as exc:
        print(f"sgr: certification refused ({exc.status}): {exc}", file=sys.stderr)
        return 3
    except SimulationDivergence as exc:
        print(f"sgr: simulation diverged: {exc}", file=sys.stderr)
        return 4
    except (ScenarioError, ConfigurationError, ValueError) as exc:
        print(f"sgr: invalid input: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary, indent=2, sort_keys=True, default=str))
    if args.command == "verify":
        bad = summary["containment"]["n_failures"] or summary.get("grid", {}).get("certified_in_oracle_out", 0)
        return 5 if bad or not summary["certificates_verified"] else 0
    return 0


if __name__ == "__main__":
    sys.exit(main())
