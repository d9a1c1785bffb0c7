import json
import sys
import time

import numpy as np

from prfl.config import ExperimentConfig
from prfl.fedsim import run_experiment


def trend_config(**kw) -> ExperimentConfig:
    """Desk-scale setting: 8 classes, 16 features, 200 per class, 20 clients, 30 rounds."""
    base = dict(rounds=30, clients=20, participation_ratio=0.1, local_steps=5, lr=5e-3)
    base.update(kw)
    return ExperimentConfig(**base)


def final_accuracy(cfg: ExperimentConfig) -> tuple[float, float]:
    t0 = time.perf_counter()
    _, summary = run_experiment(cfg)
    return summary["final_mean_accuracy"], time.perf_counter() - t0


def sweep(label: str, make_cfg, seeds) -> dict:
    accs, secs = [], []
    for seed in seeds:
        acc, dt = final_accuracy(make_cfg(seed))
        accs.append(acc)
        secs.append(dt)
        print(f"  {label:<18} seed {seed}: acc {acc:.4f} ({dt:.1f}s)", file=sys.stderr)
    return {"mean": float(np.mean(accs)), "std": float(np.std(accs)), "accs": accs,
            "max_seconds": max(secs)}


def dump(obj, path=None):
    text = json.dumps(obj, indent=2)
    print(text)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
