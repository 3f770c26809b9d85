"""Task datasets: JSONL ingestion and deterministic synthetic generators.

The four generator kinds mimic a stream of sequence-to-sequence coding
tasks whose input and output mini-languages differ sharply, so training
them one after another produces real distribution shift:

  gen_like      keyword description   ->  pseudo-code line
  trans_like    dialect A code        ->  dialect B code (token rewrite)
  summ_like     dialect B code        ->  fixed-template summary (many-to-one)
  refine_like   code with one corrupted token -> the corrected original
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError
from .vocab import Vocabulary

KINDS = ("gen_like", "trans_like", "summ_like", "refine_like")

NAMES = ("x", "y", "z", "w", "u", "v", "p", "q")


@dataclass(frozen=True)
class Example:
    input: str
    target: str
    task_id: int

    def __post_init__(self):
        if not self.input.strip() or not self.target.strip():
            raise ContractError("example input and target must be non-empty")


@dataclass
class TaskData:
    task_id: int
    name: str
    train: list[Example]
    valid: list[Example]
    test: list[Example]

    def splits(self) -> dict[str, list[Example]]:
        return {"train": self.train, "valid": self.valid, "test": self.test}


@dataclass
class TaskStream:
    tasks: list[TaskData]

    def __post_init__(self):
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ContractError("task ids must be unique")
        for t in self.tasks:
            if not (t.train and t.valid and t.test):
                raise ContractError(f"task {t.task_id} has an empty split")

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def all_text(self) -> list[str]:
        out = []
        for t in self.tasks:
            for split in t.splits().values():
                for ex in split:
                    out.append(ex.input)
                    out.append(ex.target)
        return out


@dataclass
class SyntheticTaskSpec:
    kind: str
    train_size: int = 512
    valid_size: int = 64
    test_size: int = 64
    seed: int = 0
    names: tuple[str, ...] = NAMES

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown synthetic kind {self.kind!r}")
        if min(self.train_size, self.valid_size, self.test_size) <= 0:
            raise ContractError("split sizes must be positive")


# ----------------------------------------------------------------------
# generator internals

TRANS_RULES = {"let": "var", ":=": "=", "emit": "log", "plus": "+", "minus": "-", "zap": "rm"}

REFINE_CORRUPTIONS = {"fun": "fnu", "do": "dd", "ret": "rte", "end": "edn",
                      "(": "((", ")": "))"}


def rewrite_dialect(text: str) -> str:
    """Apply the dialect A -> dialect B token rules (the trans_like oracle)."""
    return " ".join(TRANS_RULES.get(tok, tok) for tok in text.split())


def _gen_like_pair(rng: np.random.Generator, names) -> tuple[str, str]:
    # several clause forms on purpose: a replay buffer that stores only a
    # couple of examples cannot cover them all
    def clause():
        form = rng.integers(0, 5)
        name = names[rng.integers(0, len(names))]
        num = int(rng.integers(0, 100))
        if form == 0:
            return f"set {name} to {num}", f"{name} = {num}"
        if form == 1:
            return f"show {name}", f"print {name}"
        if form == 2:
            return f"bump {name} by {num}", f"{name} += {num}"
        if form == 3:
            return f"double {name}", f"{name} *= 2"
        return f"drop {name}", f"del {name}"

    n = int(rng.integers(1, 3))
    parts = [clause() for _ in range(n)]
    return " then ".join(p[0] for p in parts), " ; ".join(p[1] for p in parts)


def _trans_like_pair(rng: np.random.Generator, names) -> tuple[str, str]:
    def stmt():
        form = rng.integers(0, 5)
        name = names[rng.integers(0, len(names))]
        if form == 0:
            return f"let {name} := {int(rng.integers(0, 100))}"
        if form == 1:
            return f"emit {name}"
        if form == 2:
            return f"zap {name}"
        other = names[rng.integers(0, len(names))]
        op = "plus" if form == 3 else "minus"
        return f"let {name} := {other} {op} {int(rng.integers(0, 10))}"

    n = int(rng.integers(1, 3))
    src = " ; ".join(stmt() for _ in range(n))
    return src, rewrite_dialect(src)


def _summ_like_pair(rng: np.random.Generator, names) -> tuple[str, str]:
    n = int(rng.integers(1, 4))
    stmts = []
    n_var = n_log = 0
    for _ in range(n):
        form = rng.integers(0, 3)
        name = names[rng.integers(0, len(names))]
        if form == 0:
            stmts.append(f"var {name} = {int(rng.integers(0, 100))}")
            n_var += 1
        elif form == 1:
            other = names[rng.integers(0, len(names))]
            stmts.append(f"var {name} = {other}")
            n_var += 1
        else:
            stmts.append(f"log {name}")
            n_log += 1
    return " ; ".join(stmts), f"{n_var} vars and {n_log} logs"


def _refine_like_pair(rng: np.random.Generator, names) -> tuple[str, str]:
    fname = names[rng.integers(0, len(names))]
    arg = names[rng.integers(0, len(names))]
    op = "+-*"[rng.integers(0, 3)]
    num = int(rng.integers(0, 100))
    clean = f"fun {fname} ( {arg} ) do ret {arg} {op} {num} end"
    tokens = clean.split()
    corruptible = [i for i, t in enumerate(tokens) if t in REFINE_CORRUPTIONS]
    pick = corruptible[rng.integers(0, len(corruptible))]
    tokens[pick] = REFINE_CORRUPTIONS[tokens[pick]]
    return " ".join(tokens), clean


_PAIR_FNS = {
    "gen_like": _gen_like_pair,
    "trans_like": _trans_like_pair,
    "summ_like": _summ_like_pair,
    "refine_like": _refine_like_pair,
}


def synth_task(spec: SyntheticTaskSpec, task_id: int | None = None) -> TaskData:
    """Generate one task's train/valid/test splits.

    Examples are deduplicated on the input string as they are drawn, so
    the splits are disjoint by construction; the same spec always yields
    the same data.
    """
    tid = task_id if task_id is not None else KINDS.index(spec.kind)
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    pair_fn = _PAIR_FNS[spec.kind]
    total = spec.train_size + spec.valid_size + spec.test_size
    seen: set[str] = set()
    examples: list[Example] = []
    attempts = 0
    while len(examples) < total:
        attempts += 1
        if attempts > 200 * total:
            raise ContractError(
                f"could not draw {total} unique {spec.kind} examples; space too small")
        src, tgt = pair_fn(rng, spec.names)
        if src in seen:
            continue
        seen.add(src)
        examples.append(Example(src, tgt, tid))
    a, b = spec.train_size, spec.train_size + spec.valid_size
    return TaskData(tid, spec.kind, examples[:a], examples[a:b], examples[b:])


def synth4_stream(train_size: int = 512, valid_size: int = 64, test_size: int = 64,
                  seed: int = 0) -> TaskStream:
    """The default four-task stream, one task per generator kind."""
    children = np.random.SeedSequence(seed).spawn(len(KINDS))
    tasks = []
    for tid, (kind, child) in enumerate(zip(KINDS, children)):
        spec = SyntheticTaskSpec(kind, train_size, valid_size, test_size,
                                 seed=int(child.generate_state(1)[0]))
        tasks.append(synth_task(spec, task_id=tid))
    return TaskStream(tasks)


# ----------------------------------------------------------------------
# JSONL ingestion

SPLIT_FILES = ("train", "valid", "test")


def load_jsonl_file(path: str | Path, task_id: int) -> list[Example]:
    """One example per line, fields "input" and "target"; order preserved."""
    path = Path(path)
    examples: list[Example] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}:{line_no}: invalid JSON ({e.msg})", line_no) from e
            if not isinstance(obj, dict):
                raise ParseError(f"{path}:{line_no}: expected an object", line_no)
            for field_name in ("input", "target"):
                if field_name not in obj or not isinstance(obj[field_name], str):
                    raise ParseError(f"{path}:{line_no}: missing string field {field_name!r}", line_no)
            examples.append(Example(obj["input"], obj["target"], task_id))
    if not examples:
        raise ContractError(f"{path}: no examples")
    return examples


def load_jsonl(prefix: str | Path, task_id: int, name: str | None = None) -> TaskData:
    """Load a task from `<prefix>.train.jsonl`, `.valid.jsonl`, `.test.jsonl`."""
    prefix = Path(prefix)
    splits = {}
    for split in SPLIT_FILES:
        path = prefix.parent / f"{prefix.name}.{split}.jsonl"
        if not path.exists():
            raise ContractError(f"missing split file {path}")
        splits[split] = load_jsonl_file(path, task_id)
    return TaskData(task_id, name or prefix.name, splits["train"], splits["valid"], splits["test"])


def load_jsonl_dir(directory: str | Path) -> TaskStream:
    """Every `<base>.train.jsonl` in the directory becomes one task.

    Tasks are ordered by base filename; each base needs matching valid and
    test files.
    """
    directory = Path(directory)
    bases = sorted(p.name[: -len(".train.jsonl")] for p in directory.glob("*.train.jsonl"))
    if not bases:
        raise ContractError(f"no *.train.jsonl files under {directory}")
    return TaskStream([load_jsonl(directory / base, tid, base) for tid, base in enumerate(bases)])


def write_jsonl_dir(stream: TaskStream, directory: str | Path) -> list[Path]:
    """Materialize a stream in the layout load_jsonl_dir expects."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for t in stream:
        base = f"task{t.task_id}_{t.name}"
        for split, examples in t.splits().items():
            path = directory / f"{base}.{split}.jsonl"
            with open(path, "w", encoding="utf-8") as fh:
                for ex in examples:
                    fh.write(json.dumps({"input": ex.input, "target": ex.target, "task": t.task_id}))
                    fh.write("\n")
            written.append(path)
    return written


def build_vocab(stream: TaskStream) -> Vocabulary:
    chars = set()
    for text in stream.all_text():
        chars.update(text)
    return Vocabulary(sorted(chars), n_tasks=len(stream))
