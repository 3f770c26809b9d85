"""Corpus BLEU and the continual-learning aggregates.

The score grid is a lower-triangular matrix b[i][j]: performance on task
j measured right after finishing training on task i. `average_bleu` is
the mean of the final row; `forgetting` is the mean, over all but the
last task, of (best score the task ever had before the final task) minus
(its final score). Negative forgetting means backward transfer.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .errors import ContractError


@dataclass
class BleuConfig:
    max_order: int = 4
    smooth_add_one: bool = True  # add-one on zero-count precisions, order >= 2
    lowercase: bool = False

    def __post_init__(self):
        if self.max_order < 1:
            raise ContractError("max_order must be >= 1")


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: list[str], references: list[str],
                cfg: BleuConfig | None = None) -> float:
    """Corpus-level BLEU in [0, 100] over whitespace-tokenized text."""
    cfg = cfg or BleuConfig()
    if len(hypotheses) != len(references):
        raise ContractError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ContractError("empty corpus")
    matches = [0] * cfg.max_order
    totals = [0] * cfg.max_order
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        if cfg.lowercase:
            hyp, ref = hyp.lower(), ref.lower()
        hyp_toks = hyp.split()
        ref_toks = ref.split()
        hyp_len += len(hyp_toks)
        ref_len += len(ref_toks)
        for n in range(1, cfg.max_order + 1):
            hyp_grams = _ngrams(hyp_toks, n)
            ref_grams = _ngrams(ref_toks, n)
            totals[n - 1] += sum(hyp_grams.values())
            matches[n - 1] += sum(min(c, ref_grams[g]) for g, c in hyp_grams.items())
    if hyp_len == 0:
        return 0.0
    log_sum = 0.0
    for n in range(1, cfg.max_order + 1):
        m, t = matches[n - 1], totals[n - 1]
        if m == 0 and n >= 2 and cfg.smooth_add_one:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_sum += math.log(m / t) / cfg.max_order
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_sum)


class MetricsMatrix:
    """Scores b[i][j] for j <= i; writing above the diagonal is an error."""

    def __init__(self, n_tasks: int):
        if n_tasks < 1:
            raise ContractError("need at least one task")
        self.n_tasks = n_tasks
        self._scores: dict[tuple[int, int], float] = {}

    def set(self, after_task: int, task: int, score: float) -> None:
        if not (0 <= after_task < self.n_tasks and 0 <= task < self.n_tasks):
            raise ContractError(f"index ({after_task}, {task}) out of range")
        if task > after_task:
            raise ContractError(f"cannot score task {task} before it is learned (after_task={after_task})")
        if not (0.0 <= score <= 100.0):
            raise ContractError(f"score {score} outside [0, 100]")
        self._scores[(after_task, task)] = float(score)

    def get(self, after_task: int, task: int) -> float:
        return self._scores[(after_task, task)]

    def is_complete(self) -> bool:
        return all((i, j) in self._scores for i in range(self.n_tasks) for j in range(i + 1))

    def last_row(self) -> list[float]:
        i = self.n_tasks - 1
        return [self.get(i, j) for j in range(self.n_tasks)]

    def to_csv(self, path: str | Path) -> None:
        lines = ["after_task," + ",".join(f"task_{j}" for j in range(self.n_tasks))]
        for i in range(self.n_tasks):
            cells = [f"{self._scores[(i, j)]:.6f}" if (i, j) in self._scores else ""
                     for j in range(self.n_tasks)]
            lines.append(f"{i}," + ",".join(cells))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def from_csv(cls, path: str | Path) -> "MetricsMatrix":
        lines = Path(path).read_text(encoding="utf-8").strip().split("\n")
        n = len(lines[0].split(",")) - 1
        m = cls(n)
        for line in lines[1:]:
            cells = line.split(",")
            i = int(cells[0])
            for j, cell in enumerate(cells[1:]):
                if cell:
                    m.set(i, j, float(cell))
        return m


def average_bleu(m: MetricsMatrix) -> float:
    last = m.n_tasks - 1
    for j in range(m.n_tasks):
        if (last, j) not in m._scores:
            raise ContractError(f"final row incomplete: missing task {j}")
    return sum(m.last_row()) / m.n_tasks


def forgetting(m: MetricsMatrix, include_final_row: bool = False) -> float:
    """Mean over earlier tasks of (peak score before the final task) minus
    (final score); `include_final_row` widens the peak to every row."""
    if m.n_tasks < 2:
        raise ContractError("forgetting needs at least two tasks")
    if not m.is_complete():
        raise ContractError("matrix incomplete")
    last = m.n_tasks - 1
    top = m.n_tasks if include_final_row else last
    total = 0.0
    for j in range(last):
        peak = max(m.get(i, j) for i in range(j, top))
        total += peak - m.get(last, j)
    return total / (m.n_tasks - 1)
