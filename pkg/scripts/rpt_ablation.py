"""Validation MSE with and without the resolution prefix on a two-resolution corpus."""

import argparse

from ttm import synthetic as syn
from ttm.config import HeadConfig, ModelConfig, TrainConfig
from ttm.training import pretrain


def best_val(res):
    return min(r["mse"] for r in res.history if r["split"] == "val")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--lr", type=float, default=3e-3)
    args = ap.parse_args()

    wins = 0
    for seed in range(args.seeds):
        corpus = syn.two_resolution_corpus(seed, length=800, noise=0.6)
        scores = {}
        for prefix in (False, True):
            model = ModelConfig(sl=16, fl=16, pl=4, levels=2, blocks_per_level=1, hf=8, dropout=0.0,
                                resolution_prefix=prefix)
            res = pretrain(corpus, model, TrainConfig(epochs=args.epochs, lr=args.lr, seed=seed),
                           HeadConfig(decoder_layers=1, head_dropout=0.0))
            scores[prefix] = best_val(res)
        wins += scores[True] <= scores[False]
        print(f"seed {seed}: off {scores[False]:.4f}  on {scores[True]:.4f}")
    print(f"prefix no worse on {wins}/{args.seeds} seeds")


if __name__ == "__main__":
    main()
