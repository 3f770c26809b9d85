"""Character-level vocabulary with fixed reserved ids.

Reserved layout: 0=PAD, 1=BOS, 2=EOS, 3=UNK, then one descriptor token
per task (`<task0>`, `<task1>`, ...). Data characters follow, sorted by
codepoint, so the same corpus always yields the same table.
"""

from __future__ import annotations

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED_BASE = 4


class Vocabulary:
    def __init__(self, chars: list[str], n_tasks: int = 0):
        self.n_tasks = n_tasks
        self.id_to_token: list[str] = ["<pad>", "<bos>", "<eos>", "<unk>"]
        self.id_to_token += [f"<task{t}>" for t in range(n_tasks)]
        self.n_reserved = len(self.id_to_token)
        self.id_to_token += sorted(set(chars))
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def descriptor_id(self, task_id: int) -> int:
        if not 0 <= task_id < self.n_tasks:
            raise IndexError(f"no descriptor for task {task_id} (have {self.n_tasks})")
        return RESERVED_BASE + task_id

    def encode(self, text: str) -> np.ndarray:
        return np.array([self.token_to_id.get(ch, UNK) for ch in text], dtype=np.int64)

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i in (PAD, BOS):
                continue
            if i == EOS:
                break
            out.append(self.id_to_token[i])
        return "".join(out)
