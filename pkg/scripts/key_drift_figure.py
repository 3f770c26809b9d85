#!/usr/bin/env python3
"""Produce the key-drift CSVs for pooled prompting with and without
teacher forcing: per-stage PCA projections of fixed queries and current
keys, plus nearest-centroid fractions and displacement per stage.

The stage CSVs (point_type, task_label, pc1..pc3) are the plotting
contract; feed them to any 3-d scatter tool.

Example:
    python scripts/key_drift_figure.py --seed 3 --out runs/drift --fast
"""

import argparse
from pathlib import Path

from ppcl.harness import RunConfig, build_stream, run, write_artifacts

FAST = dict(train_size=96, valid_size=16, test_size=8, epochs_per_task=6, batch_size=8,
            warmup_steps=600, learning_rate=0.05, ft_learning_rate=3e-3, patience=3,
            diag_queries_per_task=16)


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--out", type=Path, default=Path("runs/drift"))
    ap.add_argument("--fast", action="store_true")
    args = ap.parse_args()

    for method in ("pp", "pp_tf"):
        overrides = dict(FAST) if args.fast else {}
        cfg = RunConfig(method=method, seed=args.seed, **overrides)
        result = run(build_stream(cfg), cfg)
        write_artifacts(result, args.out / method)
        drift = (args.out / method / "drift_stats.csv").read_text(encoding="utf-8")
        print(f"--- {method} ---")
        print(drift)


if __name__ == "__main__":
    main()
