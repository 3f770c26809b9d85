#!/usr/bin/env python3
"""Replay-buffer capacity ablation for full finetuning with replay.

Writes one row per capacity (average BLEU and forgetting on validation)
and prints the table.

Example:
    python scripts/buffer_ablation.py --capacities 8,16,32,64 --seeds 1,2,3 --fast
"""

import argparse
from pathlib import Path

import numpy as np

from ppcl.harness import RunConfig, build_stream, run
from ppcl.metrics import average_bleu, forgetting

FAST = dict(train_size=96, valid_size=16, test_size=8, epochs_per_task=6, batch_size=8,
            warmup_steps=600, learning_rate=0.05, ft_learning_rate=3e-3, patience=3)


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--capacities", default="8,16,32,64")
    ap.add_argument("--seeds", default="1,2,3")
    ap.add_argument("--out", type=Path, default=Path("runs/buffer_ablation.csv"))
    ap.add_argument("--fast", action="store_true")
    args = ap.parse_args()

    capacities = [int(c) for c in args.capacities.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    lines = ["capacity,median_avg_bleu_val,median_forget_val,n_seeds"]
    for cap in capacities:
        bleus, forgets = [], []
        for seed in seeds:
            overrides = dict(FAST) if args.fast else {}
            cfg = RunConfig(method="seq_ft", use_er=True, buffer_capacity=cap,
                            seed=seed, **overrides)
            res = run(build_stream(cfg), cfg)
            bleus.append(average_bleu(res.val_matrix))
            forgets.append(forgetting(res.val_matrix))
        lines.append(f"{cap},{np.median(bleus):.6f},{np.median(forgets):.6f},{len(seeds)}")
        print(lines[-1])
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
