"""The prompt pool: learnable (key, prompt) pairs with query-based top-k
selection, the pooled training loss, and the teacher-forced variant that
pins pairs to tasks during training.

Keys and prompts are stored per pair so the optimizer can step exactly
the pairs a batch selected. Pairs that a task never selects are then
bitwise untouched for that task, which is the whole point of the
teacher-forced assignment scheme.

The training losses combine the LM loss with a key-alignment term. As a
loss to minimize, `+lambda * sum(sim)` would push selected keys away from
the query, so the default applies the surrogate `lambda * sum(1 - sim)`
which pulls them closer; the literal sign is available behind a config
switch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError
from .model import BackboneModel, PromptedInput, _FrozenView
from .serialize import read_records, write_records


@dataclass
class PoolTrainConfig:
    k: int = 4
    lam: float = 0.1
    shared_fraction: float = 0.2
    literal_similarity_sign: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ContractError("k must be >= 1")
        if self.lam < 0:
            raise ContractError("lambda must be >= 0")
        if not 0.0 <= self.shared_fraction < 1.0:
            raise ContractError("shared_fraction must be in [0, 1)")


@dataclass
class SelectionResult:
    indices: list[int]        # sorted by descending similarity, ties by index
    similarities: list[float]
    query: np.ndarray


class QueryEncoder:
    """A frozen deep copy of the backbone encoder plus mean pooling.

    Copying the arrays (not referencing them) guarantees queries stay
    constant even while the source model keeps training.
    """

    def __init__(self, model: BackboneModel):
        self._view = _FrozenView(model)
        self._view._arrays = {k: v.copy() for k, v in self._view._arrays.items()}

    @property
    def d_model(self) -> int:
        return self._view.config.d_model

    def query(self, token_ids: np.ndarray) -> np.ndarray:
        return compute_query(self, token_ids)


def compute_query(enc: QueryEncoder, token_ids: np.ndarray) -> np.ndarray:
    """Mean of the final encoder states for a plain (prompt-free) input."""
    token_ids = np.asarray(token_ids, dtype=np.int64)
    if token_ids.size == 0:
        raise ContractError("cannot query an empty token sequence")
    hidden = enc._view.encode(PromptedInput(token_ids=token_ids))
    return hidden.mean(axis=0)


class PromptPool:
    """M index-aligned (key, prompt) pairs, each its own parameter tensor."""

    def __init__(self, keys: list[Tensor], prompts: list[Tensor],
                 assignment: dict[int, tuple[int, ...]] | None = None):
        if len(keys) != len(prompts):
            raise ContractError("keys and prompts must pair up one to one")
        self.keys = keys
        self.prompts = prompts
        self.assignment = assignment

    @property
    def size(self) -> int:
        return len(self.keys)

    @property
    def prompt_len(self) -> int:
        return self.prompts[0].data.shape[0]

    @property
    def dim(self) -> int:
        return self.keys[0].data.shape[0]

    def key_matrix(self) -> np.ndarray:
        return np.stack([k.data for k in self.keys])

    def prompt_array(self) -> np.ndarray:
        return np.stack([p.data for p in self.prompts])

    def all_params(self) -> list[Tensor]:
        return self.keys + self.prompts

    def pair_params(self, indices) -> list[Tensor]:
        out = []
        for i in sorted(indices):
            out.append(self.keys[i])
            out.append(self.prompts[i])
        return out

    def assigned_to(self, task_id: int) -> list[int]:
        if self.assignment is None:
            raise ContractError("pool has no task assignment")
        return sorted(i for i, tasks in self.assignment.items() if task_id in tasks)

    def save(self, path) -> None:
        records = [("pool.keys", self.key_matrix()), ("pool.prompts", self.prompt_array())]
        if self.assignment is not None:
            rows = [(i, t) for i in sorted(self.assignment) for t in self.assignment[i]]
            records.append(("pool.assignment", np.array(rows, dtype=np.float64).reshape(-1, 2)))
        write_records(path, records)

    @classmethod
    def load(cls, path) -> "PromptPool":
        records = read_records(path)
        keys = [Tensor(row.copy(), requires_grad=True) for row in records["pool.keys"]]
        prompts = [Tensor(block.copy(), requires_grad=True) for block in records["pool.prompts"]]
        assignment = None
        if "pool.assignment" in records:
            assignment = {}
            for idx, task in records["pool.assignment"]:
                assignment.setdefault(int(idx), [])
                assignment[int(idx)].append(int(task))
            assignment = {i: tuple(sorted(ts)) for i, ts in assignment.items()}
        return cls(keys, prompts, assignment)


def init_pool(size: int, prompt_len: int, dim: int, seed: int,
              init_examples: list[np.ndarray] | None = None,
              query_encoder: QueryEncoder | None = None) -> PromptPool:
    """Fresh pool; prompts ~ uniform(+-0.5/sqrt(d)).

    With `init_examples` (token-id sequences) the keys are set to the
    queries of `size` examples sampled from the list, without replacement
    when it is large enough; otherwise keys draw from the same uniform
    range as the prompts.
    """
    if size < 1:
        raise ContractError("pool size must be >= 1")
    if prompt_len < 1:
        raise ContractError("prompt length must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    bound = 0.5 / np.sqrt(dim)
    prompts = [Tensor(rng.uniform(-bound, bound, size=(prompt_len, dim)), requires_grad=True)
               for _ in range(size)]
    if init_examples is not None:
        if query_encoder is None:
            raise ContractError("key initialization from examples needs a query encoder")
        if not init_examples:
            raise ContractError("init_examples is empty")
        picks = rng.choice(len(init_examples), size=size, replace=len(init_examples) < size)
        keys = [Tensor(compute_query(query_encoder, init_examples[int(i)]), requires_grad=True)
                for i in picks]
    else:
        keys = [Tensor(rng.uniform(-bound, bound, size=dim), requires_grad=True)
                for _ in range(size)]
    return PromptPool(keys, prompts)


def select_topk(pool: PromptPool, query: np.ndarray, k: int,
                candidate_mask=None) -> SelectionResult:
    """Top-k pool indices by cosine similarity to the query.

    Candidates default to the whole pool. Results are ordered by
    descending similarity with exact ties broken by the lower index.
    """
    if k < 1:
        raise ContractError("k must be >= 1")
    if candidate_mask is not None:
        candidates = sorted(set(int(i) for i in candidate_mask))
        if not candidates:
            raise ContractError("candidate mask is empty")
        if candidates[0] < 0 or candidates[-1] >= pool.size:
            raise ContractError("candidate mask index out of range")
    else:
        candidates = list(range(pool.size))
    sims = np.array([ag.cosine_similarity(query, pool.keys[i].data) for i in candidates])
    order = np.lexsort((np.array(candidates), -sims))
    chosen = order[: min(k, len(candidates))]
    return SelectionResult(indices=[candidates[i] for i in chosen],
                           similarities=[float(sims[i]) for i in chosen],
                           query=query)


def inference_select(pool: PromptPool, query: np.ndarray, k: int) -> SelectionResult:
    """Selection with assignments discarded: the whole pool competes."""
    return select_topk(pool, query, k, candidate_mask=None)


def prompt_block(pool: PromptPool, selection: SelectionResult):
    """Selected prompts concatenated in selection order, ready to prepend."""
    return ag.concat_rows([pool.prompts[i] for i in selection.indices])


def _pool_loss(pool, backbone, selection, token_ids, target_ids, cfg):
    lm = backbone.lm_loss(PromptedInput(token_ids=token_ids,
                                        prompt_vectors=prompt_block(pool, selection)),
                          target_ids)
    if cfg.lam == 0.0:
        return lm
    align = None
    for i in selection.indices:
        s = ag.cosine_similarity(selection.query, pool.keys[i])
        term = s if cfg.literal_similarity_sign else ag.add(1.0, ag.neg(s))
        align = term if align is None else ag.add(align, term)
    return ag.add(lm, ag.mul(align, cfg.lam))


def pp_loss(pool: PromptPool, backbone: BackboneModel, query_encoder: QueryEncoder,
            token_ids: np.ndarray, target_ids: np.ndarray,
            cfg: PoolTrainConfig) -> tuple[Tensor, SelectionResult]:
    """Pooled training loss with unconstrained top-k selection.

    Gradients reach exactly the selected pairs: the selected prompts via
    the LM loss and the selected keys via the alignment term.
    """
    if pool.assignment is not None:
        raise ContractError("pool has task assignments; use pptf_loss")
    query = compute_query(query_encoder, token_ids)
    selection = select_topk(pool, query, cfg.k)
    return _pool_loss(pool, backbone, selection, token_ids, target_ids, cfg), selection


def pptf_loss(pool: PromptPool, backbone: BackboneModel, query_encoder: QueryEncoder,
              token_ids: np.ndarray, target_ids: np.ndarray, task_id: int,
              cfg: PoolTrainConfig) -> tuple[Tensor, SelectionResult]:
    """Teacher-forced loss: selection restricted to the task's assigned pairs.

    Pairs not assigned to `task_id` are outside the graph and get exactly
    zero gradient. k is clamped to the assigned count.
    """
    if pool.assignment is None:
        raise ContractError("teacher forcing needs a task assignment; call assign_tasks first")
    allowed = pool.assigned_to(task_id)
    if not allowed:
        raise ContractError(f"no pairs assigned to task {task_id}")
    query = compute_query(query_encoder, token_ids)
    selection = select_topk(pool, query, min(cfg.k, len(allowed)), candidate_mask=allowed)
    return _pool_loss(pool, backbone, selection, token_ids, target_ids, cfg), selection


def assign_tasks(pool: PromptPool, n_tasks: int, shared_fraction: float,
                 seed: int) -> dict[int, tuple[int, ...]]:
    """Partition the pool: near-equal exclusive groups per task plus a
    shared_fraction of pairs each owned by two adjacent tasks.

    Every pool index lands in at least one task's set. The map is stored
    on the pool and returned.
    """
    if n_tasks < 1:
        raise ContractError("need at least one task")
    if pool.size < n_tasks:
        raise ContractError(f"pool of {pool.size} cannot cover {n_tasks} tasks")
    if not 0.0 <= shared_fraction < 1.0:
        raise ContractError("shared_fraction must be in [0, 1)")
    rng = np.random.Generator(np.random.PCG64(seed))
    perm = rng.permutation(pool.size)
    n_shared = int(shared_fraction * pool.size) if n_tasks > 1 else 0
    n_shared = min(n_shared, pool.size - n_tasks)  # keep one exclusive pair per task
    assignment: dict[int, tuple[int, ...]] = {}
    for j in range(n_shared):
        t = j % (n_tasks - 1)
        assignment[int(perm[j])] = (t, t + 1)
    exclusive = perm[n_shared:]
    base, extra = divmod(len(exclusive), n_tasks)
    pos = 0
    for t in range(n_tasks):
        take = base + (1 if t < extra else 0)
        for idx in exclusive[pos: pos + take]:
            assignment[int(idx)] = (t,)
        pos += take
    pool.assignment = assignment
    return assignment
