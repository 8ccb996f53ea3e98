"""Small learning-rate by batch-size grid over one config; prints a table."""

import argparse
import statistics

from gcpo.config import load_config
from gcpo.trainer import train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("config")
    ap.add_argument("--lr", type=float, nargs="+", default=[3e-4, 1e-3, 3e-3, 1e-2])
    ap.add_argument("--batch", type=int, nargs="+", default=[8, 16])
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--window", type=int, default=25)
    args = ap.parse_args()

    print(f"{'lr':>8} {'batch':>6} {'early':>7} {'late':>7} {'eval':>7}")
    for batch in args.batch:
        for lr in args.lr:
            cfg = load_config(args.config, lr=lr, batch_queries=batch, steps=args.steps)
            recs = train(cfg).metrics
            early = statistics.mean(r["mean_reward"] for r in recs[:10])
            late = statistics.mean(r["mean_reward"] for r in recs[-args.window:])
            ev = recs[-1]["eval_mean_reward"]
            print(f"{lr:8.0e} {batch:6d} {early:7.3f} {late:7.3f} {'-' if ev is None else f'{ev:7.3f}'}")


if __name__ == "__main__":
    main()
