"""Accuracy drop under Gaussian noise on uploaded deltas, PRFL vs FedAvg.

    python3 scripts/dp_noise.py --taus 0 0.05 --seeds 5
"""
import argparse

from _common import dump, sweep, trend_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--taus", type=float, nargs="+", default=[0.0, 0.05])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args()
    out = {}
    for strategy in ("prfl", "fedavg"):
        rows = {str(t): sweep(f"{strategy} tau={t}", lambda s: trend_config(
            seed=s, strategy=strategy, dp_tau=t), range(args.seeds)) for t in args.taus}
        base = rows[str(args.taus[0])]["mean"]
        for r in rows.values():
            r["drop"] = base - r["mean"]
        out[strategy] = rows
    dump(out, args.json)


if __name__ == "__main__":
    main()
