"""Command-line entry point.

Subcommands:
  run        execute one configured method over a task stream
  sweep      repeat a run along one axis (buffer_size | method | seed)
  diagnose   rebuild PCA + drift CSVs from a run's saved pool snapshots
  gen-data   materialize the synthetic stream as JSONL files
  eval       score a hypotheses file against a references file

Exit codes: 0 success, 1 partial sweep failure, 2 configuration error,
3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from .data import synth4_stream, write_jsonl_dir
from .diagnostics import drift_stats, make_snapshot, write_drift_csv, write_stage_csv
from .errors import ContractError, NumericError, ParseError
from .harness import METHODS, RunConfig, execute_run
from .metrics import BleuConfig, corpus_bleu
from .serialize import read_records

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _out_root() -> Path:
    return Path(os.environ.get("PPCL_OUT", "runs"))


def _add_override_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="JSON config file")
    p.add_argument("--method", choices=METHODS, default=None)
    p.add_argument("--tasks", default=None, help="synth4 or jsonl:<dir>")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--buffer", type=int, default=None, dest="buffer_capacity")
    p.add_argument("--er", type=_parse_bool, default=None, dest="use_er")
    p.add_argument("--lambda", type=float, default=None, dest="lam")
    p.add_argument("--pool-size", type=int, default=None)
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--shared-frac", type=float, default=None, dest="shared_fraction")
    p.add_argument("--epochs", type=int, default=None, dest="epochs_per_task")
    p.add_argument("--batch", type=int, default=None, dest="batch_size")
    p.add_argument("--warmup-steps", type=int, default=None)
    p.add_argument("--train-size", type=int, default=None)
    p.add_argument("--valid-size", type=int, default=None)
    p.add_argument("--test-size", type=int, default=None)
    p.add_argument("--out", type=Path, default=None)


_OVERRIDE_FIELDS = ("method", "tasks", "seed", "buffer_capacity", "use_er", "lam",
                    "pool_size", "top_k", "shared_fraction", "epochs_per_task",
                    "batch_size", "warmup_steps", "train_size", "valid_size", "test_size")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then flag overrides."""
    raw: dict = {}
    if args.config is not None:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(raw, dict):
            raise ContractError("config file must hold a JSON object")
    for name in _OVERRIDE_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            raw[name] = value
    return RunConfig.from_dict(raw)


def _cmd_run(args: argparse.Namespace) -> int:
    try:
        config = resolve_config(args)
    except (ContractError, ValueError, OSError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or _out_root() / f"{config.method}_seed{config.seed}"
    try:
        summary = execute_run(config, out)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ContractError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(summary, indent=2, sort_keys=True))
    print(f"artifacts: {out}")
    return EXIT_OK


def _sweep_job(payload: tuple[dict, str, str]) -> tuple[str, dict | None, str]:
    raw, value, out_dir = payload
    try:
        summary = execute_run(RunConfig.from_dict(raw), out_dir)
        return value, summary, ""
    except Exception as e:  # noqa: BLE001 - sub-run failures become rows
        return value, None, f"{type(e).__name__}: {e}"


def _cmd_sweep(args: argparse.Namespace) -> int:
    try:
        config = resolve_config(args)
        values = [v.strip() for v in args.values.split(",") if v.strip()]
        if not values:
            raise ContractError("no sweep values given")
    except (ContractError, ValueError, OSError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or _out_root() / f"sweep_{args.axis}"
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)

    jobs = []
    for value in values:
        raw = dataclasses.asdict(config)
        if args.axis == "buffer_size":
            raw["buffer_capacity"] = int(value)
            raw["use_er"] = True
        elif args.axis == "seed":
            raw["seed"] = int(value)
        elif args.axis == "method":
            if value not in METHODS:
                print(f"configuration error: unknown method {value!r}", file=sys.stderr)
                return EXIT_CONFIG
            raw["method"] = value
        jobs.append((raw, value, str(out / f"{args.axis}_{value}")))

    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]

    lines = ["value,avg_bleu_val,avg_bleu_test,forget_val,status"]
    failures = 0
    for value, summary, error in results:
        if summary is None:
            failures += 1
            lines.append(f"{value},,,,failed: {error}")
            continue
        forget = f"{summary['forget_val']:.6f}" if "forget_val" in summary else ""
        lines.append(f"{value},{summary['avg_bleu_val']:.6f},"
                     f"{summary['avg_bleu_test']:.6f},{forget},ok")
    (out / "summary.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print((out / "summary.csv").read_text(encoding="utf-8"))
    return EXIT_PARTIAL if failures else EXIT_OK


def _cmd_diagnose(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    snap_path = run_dir / "snapshots.ppcl"
    labels_path = run_dir / "snapshot_labels.json"
    if not snap_path.exists() or not labels_path.exists():
        print(f"no pool snapshots under {run_dir}; only pool methods (pp, pp_tf) "
              "record key snapshots", file=sys.stderr)
        return EXIT_CONFIG
    records = read_records(snap_path)
    labels = json.loads(labels_path.read_text(encoding="utf-8"))
    key_tasks = [tuple(t) if t is not None else None for t in labels["key_tasks"]]
    queries = records["queries"]
    query_tasks = records["query_tasks"].astype(np.int64)
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    snaps = []
    for i, stage in enumerate(labels["stages"]):
        snap = make_snapshot(records[f"stage{i}.keys"], key_tasks, queries, query_tasks, stage)
        snaps.append(snap)
        write_stage_csv(snap, out / f"stage_{stage}.csv")
    write_drift_csv(drift_stats(snaps), out / "drift_stats.csv")
    print(f"wrote {len(snaps)} stage CSVs and drift_stats.csv to {out}")
    return EXIT_OK


def _cmd_gen_data(args: argparse.Namespace) -> int:
    try:
        stream = synth4_stream(args.train_size, args.valid_size, args.test_size, seed=args.seed)
        written = write_jsonl_dir(stream, args.out)
    except ContractError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"wrote {len(written)} files to {args.out}")
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    try:
        hyps = Path(args.hypotheses).read_text(encoding="utf-8").splitlines()
        refs = Path(args.references).read_text(encoding="utf-8").splitlines()
        score = corpus_bleu(hyps, refs, BleuConfig(lowercase=args.lowercase))
    except (ContractError, ParseError, OSError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"{score:.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ppcl",
                                     description="continual prompt-pool training runs")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one run")
    _add_override_flags(p_run)
    p_run.set_defaults(fn=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="one sub-run per value along an axis")
    _add_override_flags(p_sweep)
    p_sweep.add_argument("--axis", choices=("buffer_size", "method", "seed"), required=True)
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.add_argument("--jobs", type=int, default=1, help="parallel sub-run processes")
    p_sweep.set_defaults(fn=_cmd_sweep)

    p_diag = sub.add_parser("diagnose", help="recompute PCA/drift CSVs for a run")
    p_diag.add_argument("run_dir")
    p_diag.add_argument("--out", type=Path, default=None)
    p_diag.set_defaults(fn=_cmd_diagnose)

    p_gen = sub.add_parser("gen-data", help="write the synthetic stream as JSONL")
    p_gen.add_argument("--out", type=Path, required=True)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--train-size", type=int, default=512)
    p_gen.add_argument("--valid-size", type=int, default=64)
    p_gen.add_argument("--test-size", type=int, default=64)
    p_gen.set_defaults(fn=_cmd_gen_data)

    p_eval = sub.add_parser("eval", help="corpus BLEU of hypotheses vs references")
    p_eval.add_argument("hypotheses")
    p_eval.add_argument("references")
    p_eval.add_argument("--lowercase", action="store_true")
    p_eval.set_defaults(fn=_cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception:  # noqa: BLE001 - last-resort diagnostics
        traceback.print_exc()
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
