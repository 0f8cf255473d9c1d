"""Command line front end.

Exit status: 0 on success, 1 for configuration errors, 2 for simulation errors.
Setting ``DATASHARE_REPORT_DIR`` makes ``run`` write its report, gas table,
event log and chain export into that directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Sequence

from .chain import import_chain, verify_blocks
from .crypto import get_provider
from .errors import ChainFormatError, ConfigError, DataShareError
from .scenario import (
    ScenarioFailure,
    audit_lines,
    emit_gas_report,
    execute_scenario,
    load_config,
    render_summary,
    run_scenario,
)

EXIT_OK, EXIT_CONFIG, EXIT_SIMULATION = 0, 1, 2
REPORT_DIR_ENV = "DATASHARE_REPORT_DIR"


def _cmd_run(args: argparse.Namespace) -> int:
    report_dir = args.report_dir or os.environ.get(REPORT_DIR_ENV)
    try:
        report = run_scenario(args.config, report_dir=report_dir)
    except ScenarioFailure as failure:
        print(render_summary(failure.report), end="")
        print(f"error: {failure}", file=sys.stderr)
        return EXIT_SIMULATION
    if args.json:
        print(json.dumps(report.to_dict(), indent=2))
    else:
        print(render_summary(report), end="")
    return EXIT_OK


def _cmd_audit(args: argparse.Namespace) -> int:
    _, report = execute_scenario(load_config(args.config))
    for line in audit_lines(report, args.contract):
        print(line)
    return EXIT_OK


def _cmd_gas_report(args: argparse.Namespace) -> int:
    _, report = execute_scenario(load_config(args.config))
    print(emit_gas_report(report), end="")
    return EXIT_OK


def _cmd_export_chain(args: argparse.Namespace) -> int:
    world, _ = execute_scenario(load_config(args.config))
    world.chain.export(args.path)
    print(f"wrote {len(world.chain.blocks)} blocks to {args.path}")
    return EXIT_OK


def _cmd_verify_chain(args: argparse.Namespace) -> int:
    try:
        blocks = import_chain(args.path)
    except ChainFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report = verify_blocks(blocks, provider=get_provider(args.crypto))
    print(report.summary())
    return EXIT_OK if report.ok else EXIT_SIMULATION


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="datashare", description="Escrowed user-data sharing simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and print its report")
    run.add_argument("config", help="scenario file or bundled scenario name")
    run.add_argument("--report-dir", help=f"write report files here (overrides ${REPORT_DIR_ENV})")
    run.add_argument("--json", action="store_true", help="print the report as JSON")
    run.set_defaults(func=_cmd_run)

    audit = sub.add_parser("audit", help="print the event trail of one contract")
    audit.add_argument("config")
    audit.add_argument("contract", help="contract address (0x-hex)")
    audit.set_defaults(func=_cmd_audit)

    gas_report = sub.add_parser("gas-report", help="print the per-call gas and fee table")
    gas_report.add_argument("config")
    gas_report.set_defaults(func=_cmd_gas_report)

    export = sub.add_parser("export-chain", help="run a scenario and export its ledger")
    export.add_argument("config")
    export.add_argument("path")
    export.set_defaults(func=_cmd_export_chain)

    verify = sub.add_parser("verify-chain", help="verify an exported ledger file")
    verify.add_argument("path")
    verify.add_argument("--crypto", default="rsa-aes", help="signature scheme the ledger was written with")
    verify.set_defaults(func=_cmd_verify_chain)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ScenarioFailure as failure:
        print(f"error: {failure}", file=sys.stderr)
        return EXIT_SIMULATION
    except DataShareError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SIMULATION


if __name__ == "__main__":
    sys.exit(main())
