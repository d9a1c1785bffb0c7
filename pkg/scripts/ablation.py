"""Ablations: plain hidden MSE (A), no latent term (B), no decomposition (C), no AIC window (D).

    python3 scripts/ablation.py --seeds 5
"""
import argparse

from _common import dump, sweep, trend_config
from prfl.dpd import DpdConfig

VARIANTS = {
    "prfl": {},
    "prfl-a": {"aux_matrix": False},
    "prfl-b": {"latent_loss": False},
    "prfl-c": {"dpd": DpdConfig(mode="full")},
    "prfl-d": {"dpd": DpdConfig(mode="variance_only")},
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--model", default="mlp", choices=["mlp", "smallcnn"])
    ap.add_argument("--json")
    args = ap.parse_args()
    from prfl.config import ModelConfig
    out = {name: sweep(name, lambda s: trend_config(seed=s, model=ModelConfig(kind=args.model), **kw),
                       range(args.seeds)) for name, kw in VARIANTS.items()}
    dump(out, args.json)


if __name__ == "__main__":
    main()
