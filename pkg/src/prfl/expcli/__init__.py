"""Config files, run directories and reports."""
from .cli import build_parser, main, run
from .configfile import apply_overrides, dump_config, parse_config, parse_config_text
from .report import (
    emit_compression_report,
    final_accuracy,
    format_summary,
    read_metrics,
    summarize,
    summary_records,
)
from .runner import METRICS_HEADER, report_rows, run_to_dir

__all__ = [
    "METRICS_HEADER", "apply_overrides", "build_parser", "dump_config", "emit_compression_report",
    "final_accuracy", "format_summary", "main", "parse_config", "parse_config_text", "read_metrics",
    "report_rows", "run", "run_to_dir", "summarize", "summary_records",
]
