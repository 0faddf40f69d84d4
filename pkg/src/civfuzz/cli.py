"""Command line front end.

    civfuzz run --spec S.json --adapter sim|shim --seed N --max-runs N
                --time-budget SECS --out DIR [--workload CMD]
    civfuzz report DIR --format plain|csv|json
    civfuzz scenarios list|validate [--dir DIR]

Exit codes: 0 completed, 2 configuration error, 3 adapter error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .campaign import CampaignConfig, CampaignReport, run_campaign
from .errors import AdapterLaunchError, CivFuzzError, ConfigError, ScenarioError
from .mutation import MutationConfig
from .report import emit_table

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ADAPTER = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="civfuzz", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="fuzz one target")
    run.add_argument("--spec", required=True, type=Path,
                     help="scenario file (sim) or interface spec (shim)")
    run.add_argument("--adapter", choices=("sim", "shim"), default="sim")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--max-runs", type=int, default=None)
    run.add_argument("--time-budget", type=float, default=None)
    run.add_argument("--out", type=Path, default=None)
    run.add_argument("--workload", default=None, help="target command (shim adapter)")
    run.add_argument("--workload-n", type=int, default=1, help="workload repetitions (sim)")
    run.add_argument("--corpus", type=Path, default=None,
                     help="resume the alteration corpus from a previous campaign dump")
    run.add_argument("--p-hot", type=float, default=None)
    run.add_argument("--p-cold", type=float, default=None)
    run.add_argument("--patience", type=int, default=None)
    run.add_argument("--initial-threshold", type=int, default=None)
    run.add_argument("--no-adapt", action="store_true", help="freeze the crossing threshold")
    run.add_argument("--quiet", action="store_true")

    rep = sub.add_parser("report", help="render a finished campaign directory")
    rep.add_argument("out_dirs", nargs="+", type=Path)
    rep.add_argument("--format", choices=("plain", "csv", "json"), default="plain")
    rep.add_argument("--out", type=Path, default=None, help="write the table here instead of stdout")

    scen = sub.add_parser("scenarios", help="inspect the shipped scenario corpus")
    scen.add_argument("action", choices=("list", "validate"))
    scen.add_argument("--dir", type=Path, default=None)
    return parser


def _cmd_run(args) -> int:
    mutation = MutationConfig()
    if args.p_hot is not None:
        mutation.p_hot = args.p_hot
    if args.p_cold is not None:
        mutation.p_cold = args.p_cold
    if args.patience is not None:
        mutation.patience = args.patience
    if args.initial_threshold is not None:
        mutation.initial_threshold = args.initial_threshold
    if args.no_adapt:
        mutation.adapt_threshold = False
    config = CampaignConfig(
        spec_path=args.spec,
        adapter=args.adapter,
        seed=args.seed,
        max_runs=args.max_runs,
        time_budget=args.time_budget,
        workload=args.workload,
        workload_repetitions=args.workload_n,
        mutation=mutation,
        output_dir=args.out,
        corpus_path=args.corpus,
    )
    try:
        report = run_campaign(config)
    except (ConfigError, ScenarioError, OSError) as e:
        print(f"civfuzz: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (AdapterLaunchError, CivFuzzError) as e:
        print(f"civfuzz: adapter error: {e}", file=sys.stderr)
        return EXIT_ADAPTER
    if not args.quiet:
        print(emit_table([report]))
    return EXIT_OK


def _cmd_report(args) -> int:
    reports = []
    for d in args.out_dirs:
        path = d / "report.json"
        if not path.exists():
            print(f"civfuzz: no report.json under {d}", file=sys.stderr)
            return EXIT_CONFIG
        reports.append(CampaignReport.from_json(json.loads(path.read_text())))
    table = emit_table(reports, args.format)
    if args.out is not None:
        args.out.write_text(table if table.endswith("\n") else table + "\n")
    else:
        print(table)
    return EXIT_OK


def _cmd_scenarios(args) -> int:
    from .sim.machine import SimAdapter
    from .sim.scenario import corpus_dir, load_scenario
    from .wire import EventKind, PROCEED, TERMINATE

    directory = args.dir or corpus_dir()
    paths = sorted(Path(directory).glob("*.json"))
    status = EXIT_OK
    for path in paths:
        try:
            scenario = load_scenario(path)
        except (ScenarioError, CivFuzzError) as e:
            print(f"{path.name}: INVALID: {e}")
            status = EXIT_CONFIG
            continue
        if args.action == "list":
            planted = len(scenario.valid_planted())
            print(
                f"{path.name}: {scenario.name} [{scenario.spec.direction.value}] "
                f"{len(scenario.spec.api_functions)} functions, {planted} planted"
            )
            continue
        # validate: a command-free baseline run must finish without crashing
        session = SimAdapter(scenario).launch(0, "validate")
        verdict = "ok"
        while True:
            event = session.recv_event()
            if event.kind is EventKind.CRASH_REPORT:
                verdict = "BASELINE CRASH"
                status = EXIT_CONFIG
                session.send_command(TERMINATE)
                break
            if event.kind is EventKind.WORKLOAD_DONE:
                session.send_command(TERMINATE)
                break
            if event.is_crossing:
                session.send_command(PROCEED)
        print(f"{path.name}: {verdict}")
    return status


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "report":
        return _cmd_report(args)
    return _cmd_scenarios(args)


if __name__ == "__main__":
    sys.exit(main())
