"""PRFL vs FedAvg vs Local on the desk-scale Dirichlet setting.

    python3 scripts/trend.py --seeds 5 [--lam 0.1] [--ratio 0.1] [--json out.json]
"""
import argparse

from _common import dump, sweep, trend_config
from prfl.config import PartitionConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--lam", type=float, default=0.1)
    ap.add_argument("--ratio", type=float, default=0.1)
    ap.add_argument("--rounds", type=int, default=30)
    ap.add_argument("--json")
    args = ap.parse_args()
    out = {}
    for strategy in ("prfl", "fedavg", "local"):
        out[strategy] = sweep(strategy, lambda s: trend_config(
            seed=s, strategy=strategy, rounds=args.rounds, participation_ratio=args.ratio,
            partition=PartitionConfig(lam=args.lam)), range(args.seeds))
    out["margin_fedavg"] = out["prfl"]["mean"] - out["fedavg"]["mean"]
    out["margin_local"] = out["prfl"]["mean"] - out["local"]["mean"]
    dump(out, args.json)


if __name__ == "__main__":
    main()
