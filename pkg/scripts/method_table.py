#!/usr/bin/env python3
"""Run the full method roster on one synthetic stream and print a summary
table: per-task test BLEU, average BLEU (val/test), and forgetting (val).

Example:
    python scripts/method_table.py --seed 7 --out runs/table --fast
"""

import argparse
import time
from pathlib import Path

from ppcl.harness import METHODS, RunConfig, build_stream, run, summarize, write_artifacts

FAST = dict(train_size=96, valid_size=16, test_size=16, epochs_per_task=6, batch_size=8,
            warmup_steps=600, learning_rate=0.05, ft_learning_rate=3e-3, patience=3,
            diag_queries_per_task=16)


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--out", type=Path, default=Path("runs/method_table"))
    ap.add_argument("--fast", action="store_true",
                    help="reduced stream and epochs (minutes instead of an hour)")
    ap.add_argument("--er-variants", action="store_true",
                    help="also run seq_ft, shared_prompts and pp with a replay buffer")
    args = ap.parse_args()

    roster = [(m, False) for m in METHODS]
    if args.er_variants:
        roster += [("seq_ft", True), ("shared_prompts", True), ("pp", True)]

    rows = []
    for method, use_er in roster:
        overrides = dict(FAST) if args.fast else {}
        cfg = RunConfig(method=method, use_er=use_er, seed=args.seed, **overrides)
        label = method + ("+er" if use_er else "")
        t0 = time.time()
        result = run(build_stream(cfg), cfg)
        summary = write_artifacts(result, args.out / label)
        rows.append((label, summary, time.time() - t0))
        print(f"done {label:28s} {rows[-1][2]:6.0f}s")

    task_names = [t.name for t in build_stream(RunConfig(seed=args.seed, **(dict(FAST) if args.fast else {})))]
    print("\nmethod                        " + "  ".join(f"{n[:9]:>9s}" for n in task_names)
          + "   <BLEU_t>  <BLEU_v>  <Forget_v>")
    for label, s, _ in rows:
        per = [s["per_task_test"][str(t)] for t in range(len(task_names))]
        forget = f"{s['forget_val']:9.2f}" if "forget_val" in s else "        -"
        print(f"{label:28s} " + "  ".join(f"{v:9.2f}" for v in per)
              + f"  {s['avg_bleu_test']:9.2f} {s['avg_bleu_val']:9.2f} {forget}")


if __name__ == "__main__":
    main()
