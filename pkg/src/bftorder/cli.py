"""Scenario CLI: run one scenario, sweep block sizes, or check a trace dir.

Exit status is nonzero whenever an invariant check fails.
"""

from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

from .invariants import check_invariants, load_trace
from .runner import render_table, run_scenario, sweep
from .scenario import Scenario


def _resolve_scenario(name: str) -> Scenario:
    path = Path(name)
    if path.exists():
        return Scenario.load(path)
    builtin = resources.files("bftorder.scenarios").joinpath(f"{name}.json")
    if builtin.is_file():
        return Scenario.from_dict(json.loads(builtin.read_text()))
    raise SystemExit(f"no scenario file or builtin named {name!r}")


def _cmd_run(args: argparse.Namespace) -> int:
    scenario = _resolve_scenario(args.scenario)
    report = run_scenario(scenario, seed=args.seed, out_dir=args.out)
    print(render_table([report]))
    if not report.ok:
        print("\ninvariant violations:", file=sys.stderr)
        for finding in report.findings:
            print(f"  {finding}", file=sys.stderr)
        return 1
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    scenario = _resolve_scenario(args.scenario)
    batches = [int(b) for b in args.batches.split(",")]
    reports = sweep(scenario, batches, out_dir=args.out)
    print(render_table(reports))
    return 0 if all(r.ok for r in reports) else 1


def _cmd_check(args: argparse.Namespace) -> int:
    trace = load_trace(args.trace_dir)
    findings = check_invariants(trace)
    if findings:
        for finding in findings:
            print(str(finding), file=sys.stderr)
        return 1
    print("all invariants hold")
    return 0


def _cmd_list(_args: argparse.Namespace) -> int:
    for entry in sorted(resources.files("bftorder.scenarios").iterdir(),
                        key=lambda e: e.name):
        if entry.name.endswith(".json"):
            data = json.loads(entry.read_text())
            print(f"{entry.name[:-5]:<20} n={data.get('n', 4)} {data.get('latency', 'lan')}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="bftsim",
                                     description="BFT ordering cluster simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one scenario")
    p_run.add_argument("scenario", help="scenario file path or builtin name")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", type=Path, default=None, help="trace output directory")
    p_run.set_defaults(fn=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="run across batch sizes")
    p_sweep.add_argument("scenario")
    p_sweep.add_argument("--batches", default="100,250,500,1000")
    p_sweep.add_argument("--out", type=Path, default=None)
    p_sweep.set_defaults(fn=_cmd_sweep)

    p_check = sub.add_parser("check", help="re-check invariants over a trace directory")
    p_check.add_argument("trace_dir", type=Path)
    p_check.set_defaults(fn=_cmd_check)

    p_list = sub.add_parser("list", help="list builtin scenarios")
    p_list.set_defaults(fn=_cmd_list)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
