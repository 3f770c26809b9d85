"""Sequential task training for every method on the roster, plus the
replay buffer, early stopping, and run-artifact emission.

A run always starts from the same place: build the vocabulary over the
stream, initialize the backbone, give it a short balanced warm-up across
all tasks (the stand-in for a pretrained model), then apply the method.
Prompt methods freeze the backbone afterwards; full-finetuning methods
unfreeze it again.

Methods:
  seq_ft                 finetune everything on each task in order
  individual             a separate finetune per task from the warm start
  multitask              one model over the union, descriptor tokens prepended
  shared_prompts         one prompt block trained by every task
  task_specific_prompts  a private prompt block per task
  pp                     pooled prompts, free top-k selection
  pp_tf                  pooled prompts, selection teacher-forced to task assignments
Any sequential method can add experience replay (`use_er`).
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import Example, TaskData, TaskStream, build_vocab, load_jsonl_dir, synth4_stream
from .diagnostics import DriftSnapshot, drift_stats, snapshot_keys, write_drift_csv, write_stage_csv
from .errors import ContractError, NumericError
from .metrics import MetricsMatrix, corpus_bleu, forgetting
from .model import BackboneConfig, BackboneModel, PromptedInput, _FrozenView, set_trainable
from .optim import Adam
from .serialize import write_records
from .pool import (PoolTrainConfig, PromptPool, QueryEncoder, assign_tasks, compute_query,
                   inference_select, init_pool, pp_loss, pptf_loss, prompt_block, select_topk)
from .vocab import EOS, Vocabulary

METHODS = ("seq_ft", "individual", "multitask", "shared_prompts",
           "task_specific_prompts", "pp", "pp_tf")
SEQUENTIAL_METHODS = ("seq_ft", "shared_prompts", "task_specific_prompts", "pp", "pp_tf")
POOL_METHODS = ("pp", "pp_tf")


@dataclass
class RunConfig:
    method: str = "pp_tf"
    use_er: bool = False
    buffer_capacity: int = 64
    epochs_per_task: int = 5
    batch_size: int = 16
    replay_mix_ratio: float = 0.25
    patience: int = 2
    seed: int = 0
    learning_rate: float = 5e-2      # prompt-parameter methods
    ft_learning_rate: float = 3e-3   # full-finetuning methods and warm-up
    warmup_steps: int = 600
    max_len_factor: float = 1.5
    tasks: str = "synth4"            # "synth4" or "jsonl:<dir>"
    train_size: int = 512
    valid_size: int = 64
    test_size: int = 64
    pool_size: int = 20
    prompt_len: int = 4
    top_k: int = 4
    lam: float = 0.1
    shared_fraction: float = 0.2
    literal_similarity_sign: bool = False
    diag_queries_per_task: int = 64
    task_order: list[int] | None = None
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.use_er and self.buffer_capacity <= 0:
            raise ContractError("experience replay needs a positive buffer capacity")

    def pool_train_cfg(self) -> PoolTrainConfig:
        return PoolTrainConfig(k=self.top_k, lam=self.lam,
                               shared_fraction=self.shared_fraction,
                               literal_similarity_sign=self.literal_similarity_sign)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        backbone = BackboneConfig(**raw.pop("backbone", {}))
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ContractError(f"unknown config fields: {sorted(unknown)}")
        return cls(backbone=backbone, **raw)


def full_scale_config(**overrides) -> RunConfig:
    """Preset mirroring the reference full-scale hyperparameters (pool of
    500 with top-100 selection, replay buffer of 5000)."""
    base = dict(pool_size=500, top_k=100, buffer_capacity=5000)
    base.update(overrides)
    return RunConfig(**base)


# ----------------------------------------------------------------------
# replay buffer


class ReplayBuffer:
    """Capacity-bounded store that keeps per-task shares within one of
    each other, down-sampling older tasks as new ones arrive."""

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ContractError("buffer capacity must be positive")
        self.capacity = capacity
        self._store: dict[int, list[Example]] = {}

    def total(self) -> int:
        return sum(len(v) for v in self._store.values())

    def counts(self) -> dict[int, int]:
        return {t: len(v) for t, v in sorted(self._store.items())}

    def insert(self, task_id: int, examples: list[Example], rng: np.random.Generator) -> None:
        self._store[task_id] = list(examples)
        tasks = sorted(self._store)
        base, extra = divmod(self.capacity, len(tasks))
        for pos, tid in enumerate(tasks):
            quota = base + (1 if pos < extra else 0)
            pool = self._store[tid]
            if len(pool) > quota:
                picked = rng.choice(len(pool), size=quota, replace=False)
                self._store[tid] = [pool[i] for i in sorted(picked)]

    def sample(self, n: int, rng: np.random.Generator) -> list[Example]:
        flat = [ex for tid in sorted(self._store) for ex in self._store[tid]]
        if not flat:
            raise ContractError("cannot sample from an empty buffer")
        replace = n > len(flat)
        picked = rng.choice(len(flat), size=n, replace=replace)
        return [flat[i] for i in picked]


def buffer_insert(buffer: ReplayBuffer, task_id: int, examples: list[Example], seed: int) -> None:
    buffer.insert(task_id, examples, np.random.Generator(np.random.PCG64(seed)))


def buffer_sample(buffer: ReplayBuffer, n: int, seed: int) -> list[Example]:
    return buffer.sample(n, np.random.Generator(np.random.PCG64(seed)))


def early_stop_check(history: list[float], patience: int) -> tuple[str, int]:
    """("continue" | "stop", best epoch index); higher scores are better.

    Stops once `patience` epochs have passed without strict improvement
    over the best score so far; a plateau is no improvement.
    """
    if patience < 1:
        raise ContractError("patience must be >= 1")
    if not history:
        return "continue", 0
    best = 0
    for i, score in enumerate(history):
        if score > history[best]:
            best = i
    staleness = len(history) - 1 - best
    return ("stop" if staleness >= patience else "continue"), best


# ----------------------------------------------------------------------
# encoded views of a task


@dataclass
class EncodedExample:
    input_ids: np.ndarray
    target_ids: np.ndarray   # ends with EOS
    target_text: str
    task_id: int


class EncodedTask:
    def __init__(self, task: TaskData, vocab: Vocabulary):
        self.task_id = task.task_id
        self.name = task.name
        self.splits: dict[str, list[EncodedExample]] = {}
        for split, examples in task.splits().items():
            self.splits[split] = [self._encode(ex, vocab) for ex in examples]

    @staticmethod
    def _encode(ex: Example, vocab: Vocabulary) -> EncodedExample:
        return EncodedExample(input_ids=vocab.encode(ex.input),
                              target_ids=np.concatenate([vocab.encode(ex.target), [EOS]]),
                              target_text=ex.target,
                              task_id=ex.task_id)


def _encode_one(ex: Example, vocab: Vocabulary) -> EncodedExample:
    return EncodedTask._encode(ex, vocab)


# ----------------------------------------------------------------------
# method states: per-example loss + which parameters a batch may step


class _MethodState:
    uses_pool = False

    def __init__(self, backbone: BackboneModel):
        self.backbone = backbone

    def loss(self, ex: EncodedExample, task_id: int):
        raise NotImplementedError

    def eval_prompts(self, input_ids: np.ndarray, task_id: int):
        return None

    def eval_input_ids(self, input_ids: np.ndarray, task_id: int) -> np.ndarray:
        return input_ids

    def trainable(self) -> list[Tensor]:
        return self.backbone.trainable_parameters()


class _FinetuneState(_MethodState):
    """Plain LM training of the whole model (seq_ft / individual)."""

    def loss(self, ex: EncodedExample, task_id: int):
        loss = self.backbone.lm_loss(PromptedInput(token_ids=ex.input_ids), ex.target_ids)
        return loss, self.backbone.trainable_parameters(), []


class _MultitaskState(_MethodState):
    """Full finetuning with the task descriptor token prepended."""

    def __init__(self, backbone: BackboneModel, vocab: Vocabulary):
        super().__init__(backbone)
        self.vocab = vocab

    def _with_descriptor(self, input_ids: np.ndarray, task_id: int) -> np.ndarray:
        return np.concatenate([[self.vocab.descriptor_id(task_id)], input_ids])

    def loss(self, ex: EncodedExample, task_id: int):
        ids = self._with_descriptor(ex.input_ids, task_id)
        loss = self.backbone.lm_loss(PromptedInput(token_ids=ids), ex.target_ids)
        return loss, self.backbone.trainable_parameters(), []

    def eval_input_ids(self, input_ids: np.ndarray, task_id: int) -> np.ndarray:
        return self._with_descriptor(input_ids, task_id)


class _SharedPromptState(_MethodState):
    """One prompt block, trained by every task, used verbatim at eval."""

    def __init__(self, backbone: BackboneModel, n_prompts: int, prompt_len: int, seed: int):
        super().__init__(backbone)
        d = backbone.config.d_model
        rng = np.random.Generator(np.random.PCG64(seed))
        bound = 0.5 / np.sqrt(d)
        self.block = Tensor(rng.uniform(-bound, bound, size=(n_prompts * prompt_len, d)),
                            requires_grad=True, name="shared_prompts")

    def loss(self, ex: EncodedExample, task_id: int):
        loss = self.backbone.lm_loss(
            PromptedInput(token_ids=ex.input_ids, prompt_vectors=self.block), ex.target_ids)
        return loss, [self.block], []

    def eval_prompts(self, input_ids, task_id):
        return self.block.data

    def trainable(self) -> list[Tensor]:
        return [self.block]


class _TaskPromptState(_MethodState):
    """A private prompt block per task; only the current task's block trains."""

    def __init__(self, backbone: BackboneModel, n_tasks: int, per_task: int,
                 prompt_len: int, seed: int):
        super().__init__(backbone)
        if per_task < 1:
            raise ContractError("pool too small to give every task a prompt block")
        d = backbone.config.d_model
        rng = np.random.Generator(np.random.PCG64(seed))
        bound = 0.5 / np.sqrt(d)
        self.blocks = [Tensor(rng.uniform(-bound, bound, size=(per_task * prompt_len, d)),
                              requires_grad=True, name=f"task_prompts_{t}")
                       for t in range(n_tasks)]

    def loss(self, ex: EncodedExample, task_id: int):
        block = self.blocks[task_id]
        loss = self.backbone.lm_loss(
            PromptedInput(token_ids=ex.input_ids, prompt_vectors=block), ex.target_ids)
        return loss, [block], []

    def eval_prompts(self, input_ids, task_id):
        return self.blocks[task_id].data

    def trainable(self) -> list[Tensor]:
        return list(self.blocks)


class _PoolState(_MethodState):
    uses_pool = True

    def __init__(self, backbone: BackboneModel, pool: PromptPool,
                 query_encoder: QueryEncoder, cfg: PoolTrainConfig, teacher_forced: bool):
        super().__init__(backbone)
        self.pool = pool
        self.query_encoder = query_encoder
        self.cfg = cfg
        self.teacher_forced = teacher_forced

    def loss(self, ex: EncodedExample, task_id: int):
        if self.teacher_forced:
            loss, sel = pptf_loss(self.pool, self.backbone, self.query_encoder,
                                  ex.input_ids, ex.target_ids, task_id, self.cfg)
        else:
            loss, sel = pp_loss(self.pool, self.backbone, self.query_encoder,
                                ex.input_ids, ex.target_ids, self.cfg)
        return loss, self.pool.pair_params(sel.indices), sel.indices

    def eval_prompts(self, input_ids, task_id):
        query = compute_query(self.query_encoder, input_ids)
        sel = inference_select(self.pool, query, self.cfg.k)
        return np.concatenate([self.pool.prompts[i].data for i in sel.indices], axis=0)

    def trainable(self) -> list[Tensor]:
        return self.pool.all_params()


# ----------------------------------------------------------------------
# results


@dataclass
class RunResult:
    config: RunConfig
    val_matrix: MetricsMatrix | None
    test_matrix: MetricsMatrix | None
    per_task_val: dict[int, float]
    per_task_test: dict[int, float]
    events: list[dict]
    snapshots: list[DriftSnapshot]
    diag_queries: np.ndarray | None
    diag_query_tasks: np.ndarray | None
    backbone: BackboneModel
    pool: PromptPool | None
    warm_checksum: str
    final_checksum: str
    vocab: Vocabulary
    stream: TaskStream


# ----------------------------------------------------------------------
# the engine


class _Engine:
    def __init__(self, stream: TaskStream, config: RunConfig):
        self.stream = stream
        self.config = config
        seeds = np.random.SeedSequence(config.seed).spawn(8)
        (self._seed_model, self._seed_warmup, self._seed_pool, self._seed_assign,
         self._seed_batches, self._seed_buffer, self._seed_diag, self._seed_prompts) = (
            int(s.generate_state(1)[0]) for s in seeds)
        self.vocab = build_vocab(stream)
        self.tasks = [EncodedTask(t, self.vocab) for t in stream]
        self.order = config.task_order or list(range(len(stream)))
        if sorted(self.order) != list(range(len(stream))):
            raise ContractError("task_order must be a permutation of the stream")
        self.backbone = BackboneModel(self.vocab, config.backbone, seed=self._seed_model)
        self.max_gen_len = self._eval_max_len()
        self.events: list[dict] = []
        self.step = 0

    def _eval_max_len(self) -> int:
        longest = max(len(ex.target_ids) for t in self.tasks for ex in t.splits["train"])
        return min(int(math.ceil(self.config.max_len_factor * longest)),
                   self.config.backbone.max_len - 1)

    # --- batching ------------------------------------------------------

    def _mean_loss(self, state: _MethodState, batch: list[tuple[EncodedExample, int]]):
        total = None
        step_params: dict[int, Tensor] = {}
        selected: set[int] = set()
        for ex, tid in batch:
            loss, params, sel = state.loss(ex, tid)
            total = loss if total is None else ag.add(total, loss)
            for p in params:
                step_params[id(p)] = p
            selected.update(sel)
        mean = ag.mul(total, 1.0 / len(batch))
        return mean, list(step_params.values()), sorted(selected)

    def _train_batch(self, state, opt, batch, task_id, n_replay: int = 0) -> float:
        mean, step_params, selected = self._mean_loss(state, batch)
        value = mean.item()
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss {value} at step {self.step} (task {task_id})")
        for p in state.trainable():
            p.zero_grad()
        if isinstance(mean, Tensor) and mean.requires_grad:
            mean.backward()
        opt.step(step_params)
        self.events.append({"step": self.step, "task": task_id, "loss": value,
                            "replay": n_replay, "selected": selected})
        self.step += 1
        return value

    def _val_loss(self, state: _MethodState, task: EncodedTask) -> float:
        frozen = _FrozenView(self.backbone)
        total = 0.0
        for ex in task.splits["valid"]:
            ids = state.eval_input_ids(ex.input_ids, task.task_id)
            prompts = state.eval_prompts(ex.input_ids, task.task_id)
            loss = frozen.lm_loss(PromptedInput(token_ids=ids, prompt_vectors=prompts),
                                  ex.target_ids)
            total += loss.item()
        return total / len(task.splits["valid"])

    def _snapshot_params(self, params: list[Tensor]) -> list[np.ndarray]:
        return [p.data.copy() for p in params]

    def _restore_params(self, params: list[Tensor], saved: list[np.ndarray]) -> None:
        for p, arr in zip(params, saved):
            p.data = arr.copy()

    def _train_task(self, state: _MethodState, opt: Adam, task: EncodedTask,
                    buffer: ReplayBuffer | None, rng: np.random.Generator) -> None:
        cfg = self.config
        train = task.splits["train"]
        history: list[float] = []
        best_saved = None
        params = state.trainable()
        n_replay = math.ceil(cfg.replay_mix_ratio * cfg.batch_size) if cfg.use_er else 0
        for _ in range(cfg.epochs_per_task):
            order = rng.permutation(len(train))
            for lo in range(0, len(order), cfg.batch_size):
                chunk = [train[i] for i in order[lo: lo + cfg.batch_size]]
                if buffer is not None and buffer.total() > 0 and n_replay > 0:
                    # replay replaces the tail of a full batch and tops up a
                    # partial one, so every batch carries n_replay replays
                    if len(chunk) + n_replay > cfg.batch_size:
                        chunk = chunk[: cfg.batch_size - n_replay]
                    batch = [(ex, task.task_id) for ex in chunk]
                    batch += [(_encode_one(ex, self.vocab), ex.task_id)
                              for ex in buffer.sample(n_replay, rng)]
                    self._train_batch(state, opt, batch, task.task_id, n_replay=n_replay)
                else:
                    self._train_batch(state, opt, [(ex, task.task_id) for ex in chunk],
                                      task.task_id)
            score = -self._val_loss(state, task)
            history.append(score)
            if best_saved is None or score > best_saved[0]:
                best_saved = (score, self._snapshot_params(params))
            decision, _ = early_stop_check(history, cfg.patience)
            if decision == "stop":
                break
        if best_saved is not None:
            self._restore_params(params, best_saved[1])

    # --- evaluation ------------------------------------------------------

    def _bleu(self, state: _MethodState, task: EncodedTask, split: str) -> float:
        hyps, refs = [], []
        for ex in task.splits[split]:
            ids = state.eval_input_ids(ex.input_ids, task.task_id)
            prompts = state.eval_prompts(ex.input_ids, task.task_id)
            out = self.backbone.greedy_generate(
                PromptedInput(token_ids=ids, prompt_vectors=prompts), self.max_gen_len)
            hyps.append(self.vocab.decode(out))
            refs.append(ex.target_text)
        return corpus_bleu(hyps, refs)

    # --- setup ------------------------------------------------------------

    def warm_up(self) -> None:
        cfg = self.config
        set_trainable(self.backbone, "all")
        opt = Adam(lr=cfg.ft_learning_rate)
        state = _FinetuneState(self.backbone)
        rng = np.random.Generator(np.random.PCG64(self._seed_warmup))
        trains = [t.splits["train"] for t in self.tasks]
        for _ in range(cfg.warmup_steps):
            batch = []
            for _ in range(cfg.batch_size):
                t = int(rng.integers(0, len(trains)))
                ex = trains[t][int(rng.integers(0, len(trains[t])))]
                batch.append((ex, t))
            self._train_batch(state, opt, batch, task_id=-1)
        set_trainable(self.backbone, "none")

    def build_state(self) -> _MethodState:
        cfg = self.config
        n = len(self.tasks)
        if cfg.method in ("seq_ft", "individual"):
            set_trainable(self.backbone, "all")
            return _FinetuneState(self.backbone)
        if cfg.method == "multitask":
            set_trainable(self.backbone, "all")
            return _MultitaskState(self.backbone, self.vocab)
        if cfg.method == "shared_prompts":
            return _SharedPromptState(self.backbone, cfg.pool_size, cfg.prompt_len,
                                      self._seed_prompts)
        if cfg.method == "task_specific_prompts":
            return _TaskPromptState(self.backbone, n, cfg.pool_size // n, cfg.prompt_len,
                                    self._seed_prompts)
        # pool methods
        qenc = QueryEncoder(self.backbone)
        rng = np.random.Generator(np.random.PCG64(self._seed_pool))
        init_examples = self._balanced_examples(rng, cfg.pool_size)
        pool = init_pool(cfg.pool_size, cfg.prompt_len, cfg.backbone.d_model,
                         seed=self._seed_pool, init_examples=init_examples,
                         query_encoder=qenc)
        if cfg.method == "pp_tf":
            assign_tasks(pool, n, cfg.shared_fraction, seed=self._seed_assign)
        return _PoolState(self.backbone, pool, qenc, cfg.pool_train_cfg(),
                          teacher_forced=cfg.method == "pp_tf")

    def _balanced_examples(self, rng: np.random.Generator, count: int) -> list[np.ndarray]:
        """Input token sequences drawn evenly across tasks (key init mix)."""
        out = []
        t = 0
        while len(out) < count:
            train = self.tasks[t % len(self.tasks)].splits["train"]
            out.append(train[int(rng.integers(0, len(train)))].input_ids)
            t += 1
        return out

    def diag_query_set(self) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.Generator(np.random.PCG64(self._seed_diag))
        per = self.config.diag_queries_per_task
        queries, labels = [], []
        qenc = self._diag_qenc
        for t in self.tasks:
            train = t.splits["train"]
            picks = rng.choice(len(train), size=min(per, len(train)), replace=False)
            for i in sorted(picks):
                queries.append(compute_query(qenc, train[i].input_ids))
                labels.append(t.task_id)
        return np.stack(queries), np.array(labels)


def run_sequential(stream: TaskStream, config: RunConfig) -> RunResult:
    """Train the configured sequential method task by task, scoring every
    learned task after each one."""
    if config.method not in SEQUENTIAL_METHODS:
        raise ContractError(f"run_sequential does not handle {config.method!r}")
    eng = _Engine(stream, config)
    eng.warm_up()
    warm_checksum = eng.backbone.checksum()
    state = eng.build_state()
    opt = Adam(lr=config.ft_learning_rate if config.method == "seq_ft" else config.learning_rate)
    buffer = ReplayBuffer(config.buffer_capacity) if config.use_er else None
    rng = np.random.Generator(np.random.PCG64(eng._seed_batches))
    buf_rng = np.random.Generator(np.random.PCG64(eng._seed_buffer))

    snapshots: list[DriftSnapshot] = []
    queries = query_tasks = None
    if state.uses_pool:
        eng._diag_qenc = state.query_encoder
        queries, query_tasks = eng.diag_query_set()
        snapshots.append(snapshot_keys(state.pool, queries, query_tasks, "init"))

    n = len(eng.tasks)
    val_m, test_m = MetricsMatrix(n), MetricsMatrix(n)
    for pos, tidx in enumerate(eng.order):
        task = eng.tasks[tidx]
        eng._train_task(state, opt, task, buffer, rng)
        if buffer is not None:
            buffer.insert(task.task_id, eng.stream.tasks[tidx].train, buf_rng)
        if state.uses_pool:
            snapshots.append(snapshot_keys(state.pool, queries, query_tasks,
                                           f"after_task_{task.task_id}"))
        for done in eng.order[: pos + 1]:
            scored = eng.tasks[done]
            val_m.set(pos, eng.order.index(done), eng._bleu(state, scored, "valid"))
            test_m.set(pos, eng.order.index(done), eng._bleu(state, scored, "test"))
    per_val = {eng.tasks[t].task_id: val_m.get(n - 1, i) for i, t in enumerate(eng.order)}
    per_test = {eng.tasks[t].task_id: test_m.get(n - 1, i) for i, t in enumerate(eng.order)}
    return RunResult(config=config, val_matrix=val_m, test_matrix=test_m,
                     per_task_val=per_val, per_task_test=per_test,
                     events=eng.events, snapshots=snapshots,
                     diag_queries=queries, diag_query_tasks=query_tasks,
                     backbone=eng.backbone,
                     pool=state.pool if state.uses_pool else None,
                     warm_checksum=warm_checksum, final_checksum=eng.backbone.checksum(),
                     vocab=eng.vocab, stream=stream)


def run_multitask(stream: TaskStream, config: RunConfig) -> RunResult:
    """One model over the union of tasks: batches sample a task uniformly,
    then an example uniformly inside it; descriptors mark the task."""
    if config.method != "multitask":
        raise ContractError("run_multitask needs method='multitask'")
    eng = _Engine(stream, config)
    eng.warm_up()
    warm_checksum = eng.backbone.checksum()
    state = eng.build_state()
    opt = Adam(lr=config.ft_learning_rate)
    rng = np.random.Generator(np.random.PCG64(eng._seed_batches))
    trains = [t.splits["train"] for t in eng.tasks]
    steps_per_epoch = max(1, sum(len(t) for t in trains) // config.batch_size)
    history: list[float] = []
    params = state.trainable()
    best_saved = None
    for _ in range(config.epochs_per_task):
        for _ in range(steps_per_epoch):
            batch = []
            for _ in range(config.batch_size):
                t = int(rng.integers(0, len(trains)))
                ex = trains[t][int(rng.integers(0, len(trains[t])))]
                batch.append((ex, t))
            eng._train_batch(state, opt, batch, task_id=-1)
        score = -np.mean([eng._val_loss(state, t) for t in eng.tasks])
        history.append(float(score))
        if best_saved is None or score > best_saved[0]:
            best_saved = (score, eng._snapshot_params(params))
        decision, _ = early_stop_check(history, config.patience)
        if decision == "stop":
            break
    if best_saved is not None:
        eng._restore_params(params, best_saved[1])
    per_val = {t.task_id: eng._bleu(state, t, "valid") for t in eng.tasks}
    per_test = {t.task_id: eng._bleu(state, t, "test") for t in eng.tasks}
    return RunResult(config=config, val_matrix=None, test_matrix=None,
                     per_task_val=per_val, per_task_test=per_test,
                     events=eng.events, snapshots=[], diag_queries=None,
                     diag_query_tasks=None, backbone=eng.backbone, pool=None,
                     warm_checksum=warm_checksum, final_checksum=eng.backbone.checksum(),
                     vocab=eng.vocab, stream=stream)


def run_individual(stream: TaskStream, config: RunConfig) -> RunResult:
    """A separate model per task, each starting from the same warm start."""
    if config.method != "individual":
        raise ContractError("run_individual needs method='individual'")
    eng = _Engine(stream, config)
    eng.warm_up()
    warm_checksum = eng.backbone.checksum()
    warm = eng.backbone
    per_val, per_test = {}, {}
    for task in eng.tasks:
        # rng keyed to the task identity, so scores cannot depend on order
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([eng._seed_batches, task.task_id])))
        eng.backbone = warm.copy()
        set_trainable(eng.backbone, "all")
        state = _FinetuneState(eng.backbone)
        opt = Adam(lr=config.ft_learning_rate)
        eng._train_task(state, opt, task, None, rng)
        per_val[task.task_id] = eng._bleu(state, task, "valid")
        per_test[task.task_id] = eng._bleu(state, task, "test")
    eng.backbone = warm
    return RunResult(config=config, val_matrix=None, test_matrix=None,
                     per_task_val=per_val, per_task_test=per_test,
                     events=eng.events, snapshots=[], diag_queries=None,
                     diag_query_tasks=None, backbone=warm, pool=None,
                     warm_checksum=warm_checksum, final_checksum=warm.checksum(),
                     vocab=eng.vocab, stream=stream)


def run(stream: TaskStream, config: RunConfig) -> RunResult:
    if config.method == "multitask":
        return run_multitask(stream, config)
    if config.method == "individual":
        return run_individual(stream, config)
    return run_sequential(stream, config)


# ----------------------------------------------------------------------
# artifacts


def build_stream(config: RunConfig) -> TaskStream:
    if config.tasks == "synth4":
        return synth4_stream(config.train_size, config.valid_size, config.test_size,
                             seed=config.seed)
    if config.tasks.startswith("jsonl:"):
        return load_jsonl_dir(config.tasks[len("jsonl:"):])
    raise ContractError(f"unknown task source {config.tasks!r}; use 'synth4' or 'jsonl:<dir>'")


def summarize(result: RunResult) -> dict:
    summary: dict = {"method": result.config.method, "seed": result.config.seed,
                     "use_er": result.config.use_er,
                     "buffer_capacity": result.config.buffer_capacity}
    summary["per_task_val"] = {str(k): v for k, v in sorted(result.per_task_val.items())}
    summary["per_task_test"] = {str(k): v for k, v in sorted(result.per_task_test.items())}
    summary["avg_bleu_val"] = sum(result.per_task_val.values()) / len(result.per_task_val)
    summary["avg_bleu_test"] = sum(result.per_task_test.values()) / len(result.per_task_test)
    if result.val_matrix is not None and result.val_matrix.n_tasks >= 2:
        summary["forget_val"] = forgetting(result.val_matrix)
        summary["forget_test"] = forgetting(result.test_matrix)
    summary["backbone_unchanged"] = result.warm_checksum == result.final_checksum
    return summary


def write_artifacts(result: RunResult, out_dir: str | Path) -> dict:
    """Write the run directory: resolved config, score matrices, event log,
    checkpoints, and (for pool methods) snapshots plus drift CSVs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(result.config.to_json() + "\n", encoding="utf-8")
    if result.val_matrix is not None:
        result.val_matrix.to_csv(out / "metrics_val.csv")
        result.test_matrix.to_csv(out / "metrics_test.csv")
    _write_scores_csv(result, out / "scores.csv")
    with open(out / "events.jsonl", "w", encoding="utf-8") as fh:
        for ev in result.events:
            fh.write(json.dumps(ev, sort_keys=True) + "\n")
    result.backbone.save(out / "model.ppcl")
    if result.pool is not None:
        result.pool.save(out / "pool.ppcl")
        _write_snapshots(result, out)
    summary = summarize(result)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    return summary


def _write_scores_csv(result: RunResult, path: Path) -> None:
    lines = ["task,val_bleu,test_bleu"]
    for t in sorted(result.per_task_val):
        lines.append(f"{t},{result.per_task_val[t]:.6f},{result.per_task_test[t]:.6f}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_snapshots(result: RunResult, out: Path) -> None:
    records = [("queries", result.diag_queries),
               ("query_tasks", result.diag_query_tasks.astype(np.float64))]
    labels = {"stages": [s.stage for s in result.snapshots]}
    for i, snap in enumerate(result.snapshots):
        records.append((f"stage{i}.keys", snap.keys))
    key_tasks = result.snapshots[0].key_tasks
    labels["key_tasks"] = [list(t) if t is not None else None for t in key_tasks]
    write_records(out / "snapshots.ppcl", records)
    (out / "snapshot_labels.json").write_text(json.dumps(labels, indent=2, sort_keys=True) + "\n",
                                              encoding="utf-8")
    for snap in result.snapshots:
        write_stage_csv(snap, out / f"stage_{snap.stage}.csv")
    write_drift_csv(drift_stats(result.snapshots), out / "drift_stats.csv")


def execute_run(config: RunConfig, out_dir: str | Path) -> dict:
    stream = build_stream(config)
    result = run(stream, config)
    return write_artifacts(result, out_dir)
