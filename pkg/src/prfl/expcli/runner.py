"""Run an experiment into a self-describing output directory."""
from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np

from ..config import ExperimentConfig
from ..errors import ConfigurationError
from ..fedsim import RoundReport, run_experiment
from .configfile import dump_config

log = logging.getLogger(__name__)

METRICS_HEADER = ["round", "scope", "split", "accuracy", "l_bik_t", "l_bik_s",
                  "uploaded_floats", "full_floats", "wall_ms"]
CONFIG_NAME = "config.ini"
METRICS_NAME = "metrics.csv"
SUMMARY_NAME = "summary.json"


def _num(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".10g")


def report_rows(rep: RoundReport) -> list[list[str]]:
    rows = []
    for cid in sorted(rep.accuracy):
        loss = rep.losses.get(cid)
        up, full = rep.uploads.get(cid, (0, 0))
        rows.append([str(rep.round), str(cid), "test", _num(rep.accuracy[cid]),
                     _num(loss.l_bik_t if loss else None), _num(loss.l_bik_s if loss else None),
                     str(up), str(full), ""])
    losses = list(rep.losses.values())
    mt = float(np.mean([l.l_bik_t for l in losses])) if losses else None
    ms = float(np.mean([l.l_bik_s for l in losses])) if losses else None
    for split, acc in (("test", rep.mean_accuracy), ("val", rep.mean_val_accuracy)):
        rows.append([str(rep.round), "mean", split, _num(acc), _num(mt), _num(ms),
                     str(rep.uploaded_floats), str(rep.full_floats), format(rep.wall_ms, ".3f")])
    return rows


def prepare_output_dir(out: Path, force: bool) -> None:
    if out.exists() and any((out / n).exists() for n in (METRICS_NAME, SUMMARY_NAME, CONFIG_NAME)):
        if not force:
            raise ConfigurationError(f"{out} already holds a run; pass --force to overwrite", key="output_dir")
    out.mkdir(parents=True, exist_ok=True)


def default_output_dir(cfg: ExperimentConfig) -> Path:
    return Path("runs") / f"{cfg.strategy}_seed{cfg.seed}"


def run_to_dir(cfg: ExperimentConfig, out=None, force: bool = False) -> dict:
    out = Path(out or cfg.output_dir or default_output_dir(cfg))
    prepare_output_dir(out, force)
    cfg.output_dir = str(out)
    (out / CONFIG_NAME).write_text(dump_config(cfg))
    with open(out / METRICS_NAME, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)

        def on_round(rep: RoundReport):
            writer.writerows(report_rows(rep))
            fh.flush()
            if rep.round:
                log.info("round %d: mean acc %.4f, uploaded %d/%d floats",
                         rep.round, rep.mean_accuracy, rep.uploaded_floats, rep.full_floats)

        reports, summary = run_experiment(cfg, on_round)
    summary["dropped"] = sum(len(r.dropped) for r in reports)
    (out / SUMMARY_NAME).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
