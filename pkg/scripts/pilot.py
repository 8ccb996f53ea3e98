"""Train one config and print a reward curve summary.

    python scripts/pilot.py configs/grpo.cfg --out runs/grpo --set lr=1e-3 --set batch_queries=16
"""

import argparse
import statistics
from pathlib import Path

from gcpo.config import load_config
from gcpo.trainer import train


def parse_set(items):
    out = {}
    for item in items:
        key, _, value = item.partition("=")
        out[key.strip()] = value.strip()
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("config")
    ap.add_argument("--out", default=None)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--window", type=int, default=25)
    args = ap.parse_args()

    cfg = load_config(args.config, **parse_set(args.set))
    res = train(cfg, Path(args.out) if args.out else None)
    rewards = [r["mean_reward"] for r in res.metrics]
    w = args.window
    for start in range(0, len(rewards), w):
        print(f"steps {start:4d}-{min(start + w, len(rewards)) - 1:4d}  "
              f"train reward {statistics.mean(rewards[start:start + w]):.3f}")
    evals = [(r["step"], r["eval_mean_reward"], r["pass_at_1"]) for r in res.metrics if r["eval_mean_reward"] is not None]
    for step, reward, p1 in evals:
        print(f"eval at step {step:4d}  reward {reward:.3f}  pass@1 {p1:.3f}")


if __name__ == "__main__":
    main()
