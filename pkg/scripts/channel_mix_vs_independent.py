"""Fine-tune with and without decoder channel mixing on lag-coupled two-channel data."""

import argparse

from ttm import synthetic as syn
from ttm.adaptation import evaluate
from ttm.config import HeadConfig, ModelConfig, TrainConfig
from ttm.training import finetune, pretrain


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--lag", type=int, default=16)
    ap.add_argument("--pretrain-epochs", type=int, default=20)
    ap.add_argument("--finetune-epochs", type=int, default=20)
    ap.add_argument("--lr", type=float, default=3e-3)
    args = ap.parse_args()

    model = ModelConfig(sl=64, fl=16, pl=8, levels=2, blocks_per_level=1, hf=16, dropout=0.0)
    base = pretrain([syn.seasonal_mix(1500, 0, channels=2)], model,
                    TrainConfig(epochs=args.pretrain_epochs, lr=args.lr, seed=0),
                    HeadConfig(decoder_layers=2, head_dropout=0.0)).store
    wins = 0
    for seed in range(args.seeds):
        ds = syn.lag_coupled(1200, args.lag, 100 + seed)
        mse = {}
        for mix in (False, True):
            head = HeadConfig(num_channels=2, decoder_layers=2, channel_mix=mix, head_dropout=0.0)
            res = finetune(base, ds, head, TrainConfig(mode="finetune", epochs=args.finetune_epochs, lr=args.lr,
                                                       seed=seed))
            mse[mix] = evaluate(res.store, ds).mse
        wins += mse[True] < mse[False]
        print(f"seed {seed}: independent {mse[False]:.4f}  mixing {mse[True]:.4f}")
    print(f"channel mixing wins {wins}/{args.seeds}")


if __name__ == "__main__":
    main()
