"""Command line entry point: ``prfl run``, ``prfl summarize``, ``prfl compression-report``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..errors import PRFLError
from .configfile import parse_config
from .report import emit_compression_report, format_summary, summarize, summary_records
from .runner import run_to_dir

log = logging.getLogger("prfl")


def run(config_path, overrides=(), force: bool = False, out=None) -> int:
    """Execute one experiment; returns a process exit status."""
    try:
        cfg = parse_config(config_path, overrides)
        summary = run_to_dir(cfg, out, force)
    except (PRFLError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"{cfg.output_dir}: final mean accuracy {summary['final_mean_accuracy']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prfl", description="Federated learning experiments with SynKD and DPD.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("config", help="experiment config file (INI)")
    r.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key; KEY may be section.key")
    r.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    r.add_argument("--out", help="output directory (default: output_dir or runs/<strategy>_seed<seed>)")

    s = sub.add_parser("summarize", help="mean and std of final accuracy per strategy")
    s.add_argument("dirs", nargs="+")
    s.add_argument("--mixed", action="store_true", help="allow runs whose configs differ")
    s.add_argument("--json", dest="json_out", help="also write the summary as JSON here")

    c = sub.add_parser("compression-report", help="uploaded share of the full update per round")
    c.add_argument("dir")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        return run(args.config, args.overrides, args.force, args.out)
    try:
        if args.command == "summarize":
            rows = summarize(args.dirs, args.mixed)
            print(format_summary(rows))
            records = summary_records(rows)
            if args.json_out:
                Path(args.json_out).write_text(json.dumps(records, indent=2) + "\n")
            else:
                print(json.dumps(records))
        else:
            print(emit_compression_report(args.dir))
    except (PRFLError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0
