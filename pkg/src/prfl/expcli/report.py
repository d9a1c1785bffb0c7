"""Multi-run summaries and communication reports built from run directories."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError
from .configfile import parse_config
from .runner import CONFIG_NAME, METRICS_NAME

# Keys allowed to differ between runs that are summarised together.
_VARYING = {("experiment", "seed"), ("experiment", "strategy"), ("experiment", "output_dir")}


def read_metrics(run_dir) -> list[dict]:
    path = Path(run_dir) / METRICS_NAME
    if not path.exists():
        raise FileNotFoundError(f"{path} not found")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def final_accuracy(rows: list[dict], split: str = "test") -> float:
    means = [r for r in rows if r["scope"] == "mean" and r["split"] == split]
    if not means:
        raise ValueError("no mean rows in metrics")
    last = max(int(r["round"]) for r in means)
    return float(next(r["accuracy"] for r in means if int(r["round"]) == last))


def _comparable(path) -> dict:
    text = (Path(path) / CONFIG_NAME).read_text()
    out, section = {}, None
    for line in text.splitlines():
        line = line.strip()
        if line.startswith("["):
            section = line.strip("[]")
        elif "=" in line:
            k, v = (t.strip() for t in line.split("=", 1))
            if (section, k) not in _VARYING:
                out[(section, k)] = v
    return out


@dataclass
class SummaryRow:
    strategy: str
    n_runs: int
    mean: float
    std: float
    accuracies: list


def summarize(run_dirs, mixed: bool = False) -> list[SummaryRow]:
    """Final-round mean client accuracy per run, then mean and population std per strategy."""
    run_dirs = [Path(d) for d in run_dirs]
    if not run_dirs:
        raise ConfigurationError("summarize needs at least one run directory")
    ref = _comparable(run_dirs[0])
    groups: dict[str, list[float]] = {}
    for d in run_dirs:
        if not mixed:
            diff = sorted(f"{s}.{k}" for (s, k) in set(ref) | set(_comparable(d))
                          if ref.get((s, k)) != _comparable(d).get((s, k)))
            if diff:
                raise ConfigurationError(f"{d} differs from {run_dirs[0]} in {', '.join(diff)}; "
                                         "use --mixed to summarise anyway")
        cfg = parse_config(d / CONFIG_NAME)
        groups.setdefault(cfg.strategy, []).append(final_accuracy(read_metrics(d)))
    rows = []
    for strategy in sorted(groups):
        accs = groups[strategy]
        rows.append(SummaryRow(strategy, len(accs), float(np.mean(accs)), float(np.std(accs)), accs))
    return rows


def format_summary(rows: list[SummaryRow]) -> str:
    lines = ["# final-round mean client test accuracy; std is the population std over runs",
             f"{'strategy':<10} {'runs':>4}  {'accuracy (%)':>16}"]
    for r in rows:
        lines.append(f"{r.strategy:<10} {r.n_runs:>4}  {100 * r.mean:8.2f} ± {100 * r.std:5.2f}")
    return "\n".join(lines)


def summary_records(rows: list[SummaryRow]) -> list[dict]:
    return [{"strategy": r.strategy, "runs": r.n_runs, "mean": r.mean, "std": r.std,
             "accuracies": r.accuracies} for r in rows]


def compression_table(run_dir) -> tuple[list[tuple[int, int, int]], int, int]:
    rows = [r for r in read_metrics(run_dir) if r["scope"] == "mean" and r["split"] == "test"]
    per_round = [(int(r["round"]), int(r["uploaded_floats"]), int(r["full_floats"]))
                 for r in rows if int(r["round"]) > 0]
    return per_round, sum(u for _, u, _ in per_round), sum(f for _, _, f in per_round)


def _pct(up: int, full: int) -> str:
    return f"{100.0 * up / full:6.2f}%" if full else "   n/a"


def emit_compression_report(run_dir) -> str:
    """Uploaded floats as a share of the uncompressed upload, per round and overall."""
    per_round, up, full = compression_table(run_dir)
    lines = [f"{'round':>5}  {'uploaded':>10}  {'full':>10}  {'ratio':>7}"]
    for rnd, u, f in per_round:
        lines.append(f"{rnd:>5}  {u:>10}  {f:>10}  {_pct(u, f)}")
    lines.append(f"{'total':>5}  {up:>10}  {full:>10}  {_pct(up, full)}")
    return "\n".join(lines)
