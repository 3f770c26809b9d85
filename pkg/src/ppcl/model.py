"""A small frozen-able encoder-decoder transformer.

Pre-LN blocks, sinusoidal (non-learned) positions, character-level vocab.
Soft prompts are prepended in embedding space on the encoder side; prompt
positions attend and are attended to like ordinary positions.

Every forward helper routes through the autograd ops, which fall back to
plain NumPy whenever no operand is a Tensor. Frozen parameters are handed
to the ops as raw arrays, so a frozen backbone contributes no graph nodes
and generation runs gradient-free at full speed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError, ShapeError
from .serialize import read_records, write_records
from .vocab import BOS, EOS, Vocabulary

PARAM_GROUPS = ("embeddings", "encoder", "decoder", "output")

_NEG_INF = -1e9
_mask_cache: dict[int, np.ndarray] = {}


def _causal_mask(n: int) -> np.ndarray:
    m = _mask_cache.get(n)
    if m is None:
        m = np.triu(np.full((n, n), _NEG_INF), k=1)
        _mask_cache[n] = m
    return m


def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    idx = np.arange(d_model, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / d_model)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table


@dataclass
class BackboneConfig:
    d_model: int = 64
    n_heads: int = 4
    n_encoder: int = 2
    n_decoder: int = 2
    d_ff: int = 128
    max_len: int = 256


@dataclass
class PromptedInput:
    """Token ids, optionally preceded by a block of soft prompt vectors."""

    token_ids: np.ndarray
    prompt_vectors: object = None  # Tensor or ndarray of shape (n_prompt, d), or None

    def prompt_count(self) -> int:
        if self.prompt_vectors is None:
            return 0
        return ag._data(self.prompt_vectors).shape[0]


class BackboneModel:
    """Encoder-decoder transformer over a character vocabulary."""

    def __init__(self, vocab: Vocabulary, config: BackboneConfig, seed: int):
        if config.d_model % config.n_heads != 0:
            raise ShapeError("d_model must divide evenly into heads")
        self.vocab = vocab
        self.config = config
        self.positions = sinusoidal_positions(config.max_len, config.d_model)
        self._params: dict[str, Tensor] = {}
        self._group_of: dict[str, str] = {}
        rng = np.random.Generator(np.random.PCG64(seed))
        self._init_params(rng)

    # ----- parameters -------------------------------------------------

    def _add(self, name: str, group: str, arr: np.ndarray) -> None:
        self._params[name] = Tensor(arr, requires_grad=True, name=name)
        self._group_of[name] = group

    def _init_params(self, rng: np.random.Generator) -> None:
        cfg = self.config
        d, v = cfg.d_model, len(self.vocab)

        def w(*shape):
            # fan-balanced init; embeddings are scaled up by sqrt(d) at
            # lookup so token content competes with the position signal
            return rng.normal(0.0, np.sqrt(2.0 / (shape[0] + shape[1])), size=shape)

        self._add("tok_emb", "embeddings", rng.normal(0.0, 1.0 / np.sqrt(d), size=(v, d)))
        for i in range(cfg.n_encoder):
            self._init_block(f"enc{i}", "encoder", cross=False, rng=rng)
        self._add("enc_ln.g", "encoder", np.ones(d))
        self._add("enc_ln.b", "encoder", np.zeros(d))
        for i in range(cfg.n_decoder):
            self._init_block(f"dec{i}", "decoder", cross=True, rng=rng)
        self._add("dec_ln.g", "decoder", np.ones(d))
        self._add("dec_ln.b", "decoder", np.zeros(d))
        self._add("out_proj", "output", w(d, v))
        self._add("out_bias", "output", np.zeros(v))

    def _init_block(self, prefix: str, group: str, cross: bool, rng: np.random.Generator) -> None:
        cfg = self.config
        d, f = cfg.d_model, cfg.d_ff

        def w(*shape):
            return rng.normal(0.0, np.sqrt(2.0 / (shape[0] + shape[1])), size=shape)

        def attn(tag):
            for nm in ("wq", "wk", "wv", "wo"):
                self._add(f"{prefix}.{tag}.{nm}", group, w(d, d))
            for nm in ("bq", "bk", "bv", "bo"):
                self._add(f"{prefix}.{tag}.{nm}", group, np.zeros(d))

        self._add(f"{prefix}.ln1.g", group, np.ones(d))
        self._add(f"{prefix}.ln1.b", group, np.zeros(d))
        attn("self")
        if cross:
            self._add(f"{prefix}.ln2.g", group, np.ones(d))
            self._add(f"{prefix}.ln2.b", group, np.zeros(d))
            attn("cross")
        self._add(f"{prefix}.ln3.g", group, np.ones(d))
        self._add(f"{prefix}.ln3.b", group, np.zeros(d))
        self._add(f"{prefix}.w1", group, w(d, f))
        self._add(f"{prefix}.b1", group, np.zeros(f))
        self._add(f"{prefix}.w2", group, w(f, d))
        self._add(f"{prefix}.b2", group, np.zeros(d))

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self._params.items())

    def parameters(self) -> list[Tensor]:
        return list(self._params.values())

    def trainable_parameters(self) -> list[Tensor]:
        return [p for p in self._params.values() if p.requires_grad]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self._params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def _p(self, name: str):
        """Parameter as Tensor when trainable, else as a raw constant array."""
        t = self._params[name]
        return t if t.requires_grad else t.data

    # ----- forward pieces ----------------------------------------------

    def _attention(self, x, kv, prefix: str, mask: np.ndarray | None):
        cfg = self.config
        dh = cfg.d_model // cfg.n_heads
        q = ag.add(ag.matmul(x, self._p(f"{prefix}.wq")), self._p(f"{prefix}.bq"))
        k = ag.add(ag.matmul(kv, self._p(f"{prefix}.wk")), self._p(f"{prefix}.bk"))
        v = ag.add(ag.matmul(kv, self._p(f"{prefix}.wv")), self._p(f"{prefix}.bv"))
        scale = 1.0 / np.sqrt(dh)
        heads = []
        for h in range(cfg.n_heads):
            lo, hi = h * dh, (h + 1) * dh
            qh = ag.slice_cols(q, lo, hi)
            kh = ag.slice_cols(k, lo, hi)
            vh = ag.slice_cols(v, lo, hi)
            scores = ag.mul(ag.matmul(qh, ag.transpose(kh)), scale)
            if mask is not None:
                scores = ag.add(scores, mask)
            heads.append(ag.matmul(ag.softmax_rows(scores), vh))
        merged = ag.concat_cols(heads)
        return ag.add(ag.matmul(merged, self._p(f"{prefix}.wo")), self._p(f"{prefix}.bo"))

    def _ffn(self, x, prefix: str):
        h = ag.relu(ag.add(ag.matmul(x, self._p(f"{prefix}.w1")), self._p(f"{prefix}.b1")))
        return ag.add(ag.matmul(h, self._p(f"{prefix}.w2")), self._p(f"{prefix}.b2"))

    def _ln(self, x, prefix: str):
        return ag.layer_norm(x, self._p(f"{prefix}.g"), self._p(f"{prefix}.b"))

    def encode(self, inp: PromptedInput):
        """Hidden states for prompt positions followed by token positions."""
        ids = np.asarray(inp.token_ids, dtype=np.int64)
        if ids.size and ids.max() >= len(self.vocab):
            raise IndexError(f"token id {int(ids.max())} out of range for vocab {len(self.vocab)}")
        if ids.size and ids.min() < 0:
            raise IndexError("negative token id")
        x = ag.mul(ag.gather_rows(self._p("tok_emb"), ids), np.sqrt(self.config.d_model))
        x = ag.add(x, self.positions[: ids.shape[0]])
        if inp.prompt_vectors is not None:
            pv = inp.prompt_vectors
            if ag._data(pv).shape[1] != self.config.d_model:
                raise ShapeError("prompt vectors must match the embedding dimension")
            # prompts carry no positional signal of their own, and tokens
            # keep the positions they would have without prompts
            x = ag.concat_rows([pv, x])
        n = ag._data(x).shape[0]
        if n > self.config.max_len:
            raise ShapeError(f"sequence of {n} exceeds max_len {self.config.max_len}")
        for i in range(self.config.n_encoder):
            pre = f"enc{i}"
            normed = self._ln(x, f"{pre}.ln1")
            x = ag.add(x, self._attention(normed, normed, f"{pre}.self", None))
            x = ag.add(x, self._ffn(self._ln(x, f"{pre}.ln3"), pre))
        return self._ln(x, "enc_ln")

    def _decode_logits(self, enc_hidden, dec_ids: np.ndarray):
        dec_ids = np.asarray(dec_ids, dtype=np.int64)
        x = ag.mul(ag.gather_rows(self._p("tok_emb"), dec_ids), np.sqrt(self.config.d_model))
        n = dec_ids.shape[0]
        if n > self.config.max_len:
            raise ShapeError(f"target of {n} exceeds max_len {self.config.max_len}")
        x = ag.add(x, self.positions[:n])
        mask = _causal_mask(n)
        for i in range(self.config.n_decoder):
            pre = f"dec{i}"
            normed = self._ln(x, f"{pre}.ln1")
            x = ag.add(x, self._attention(normed, normed, f"{pre}.self", mask))
            x = ag.add(x, self._attention(self._ln(x, f"{pre}.ln2"), enc_hidden, f"{pre}.cross", None))
            x = ag.add(x, self._ffn(self._ln(x, f"{pre}.ln3"), pre))
        x = self._ln(x, "dec_ln")
        return ag.add(ag.matmul(x, self._p("out_proj")), self._p("out_bias"))

    # ----- public operations -------------------------------------------

    def lm_loss(self, inp: PromptedInput, target_ids: np.ndarray) -> Tensor:
        """Teacher-forced mean cross-entropy over the target positions."""
        target_ids = np.asarray(target_ids, dtype=np.int64)
        if target_ids.size == 0:
            raise ContractError("empty target")
        if target_ids[-1] != EOS:
            raise ContractError("target must end with EOS")
        enc_hidden = self.encode(inp)
        dec_in = np.concatenate(([BOS], target_ids[:-1]))
        logits = self._decode_logits(enc_hidden, dec_in)
        return ag.as_tensor(ag.softmax_cross_entropy(logits, target_ids))

    def greedy_generate(self, inp: PromptedInput, max_len: int) -> np.ndarray:
        """Argmax decode from BOS until EOS or max_len generated tokens.

        Runs gradient-free regardless of trainable flags; ties resolve to
        the lowest token id. The returned ids exclude BOS and EOS.
        """
        if max_len < 1:
            raise ContractError("max_len must be >= 1")
        frozen = _FrozenView(self)
        if inp.prompt_vectors is not None:
            inp = PromptedInput(token_ids=inp.token_ids, prompt_vectors=ag._data(inp.prompt_vectors))
        enc_hidden = frozen.encode(inp)
        decoder = _IncrementalDecoder(frozen, enc_hidden, max_len + 1)
        token = BOS
        out: list[int] = []
        for _ in range(max_len):
            logits = decoder.step(token)
            nxt = int(np.argmax(logits))
            if nxt == EOS:
                break
            out.append(nxt)
            token = nxt
        return np.array(out, dtype=np.int64)

    def _greedy_generate_recompute(self, inp: PromptedInput, max_len: int) -> np.ndarray:
        """Cache-free reference decode; must agree with greedy_generate."""
        if max_len < 1:
            raise ContractError("max_len must be >= 1")
        frozen = _FrozenView(self)
        if inp.prompt_vectors is not None:
            inp = PromptedInput(token_ids=inp.token_ids, prompt_vectors=ag._data(inp.prompt_vectors))
        enc_hidden = frozen.encode(inp)
        dec = [BOS]
        out: list[int] = []
        for _ in range(max_len):
            logits = frozen._decode_logits(enc_hidden, np.array(dec, dtype=np.int64))
            nxt = int(np.argmax(logits[-1]))
            if nxt == EOS:
                break
            out.append(nxt)
            dec.append(nxt)
        return np.array(out, dtype=np.int64)

    # ----- persistence --------------------------------------------------

    def save(self, path) -> None:
        write_records(path, [(name, p.data) for name, p in self._params.items()])

    def load(self, path) -> None:
        records = read_records(path)
        for name, p in self._params.items():
            if name not in records:
                raise ValueError(f"checkpoint missing parameter {name!r}")
            if records[name].shape != p.data.shape:
                raise ShapeError(f"checkpoint param {name!r} has shape {records[name].shape}, expected {p.data.shape}")
            p.data = records[name]
            p.zero_grad()

    def copy(self) -> "BackboneModel":
        clone = BackboneModel(self.vocab, self.config, seed=0)
        for name, p in self._params.items():
            clone._params[name].data = p.data.copy()
            clone._params[name].requires_grad = p.requires_grad
            clone._params[name].zero_grad()
        return clone


class _IncrementalDecoder:
    """Stepwise gradient-free decoding with self-attention K/V caches.

    Processes one position per step instead of re-running the decoder on
    the whole prefix; cross-attention keys and values over the encoder
    states are computed once up front.
    """

    def __init__(self, frozen: "_FrozenView", enc_hidden: np.ndarray, max_steps: int):
        self.m = frozen
        cfg = frozen.config
        self.n_heads = cfg.n_heads
        self.d_head = cfg.d_model // cfg.n_heads
        self.t = 0
        self.k_cache = [np.empty((max_steps, cfg.d_model)) for _ in range(cfg.n_decoder)]
        self.v_cache = [np.empty((max_steps, cfg.d_model)) for _ in range(cfg.n_decoder)]
        self.cross_k = []
        self.cross_v = []
        for i in range(cfg.n_decoder):
            p = frozen._p
            self.cross_k.append(enc_hidden @ p(f"dec{i}.cross.wk") + p(f"dec{i}.cross.bk"))
            self.cross_v.append(enc_hidden @ p(f"dec{i}.cross.wv") + p(f"dec{i}.cross.bv"))

    def _ln_vec(self, x: np.ndarray, prefix: str) -> np.ndarray:
        mu = x.mean()
        var = ((x - mu) ** 2).mean()
        return (x - mu) / np.sqrt(var + 1e-5) * self.m._p(f"{prefix}.g") + self.m._p(f"{prefix}.b")

    def _heads(self, q: np.ndarray, keys: np.ndarray, values: np.ndarray) -> np.ndarray:
        out = np.empty_like(q)
        scale = 1.0 / np.sqrt(self.d_head)
        for h in range(self.n_heads):
            lo, hi = h * self.d_head, (h + 1) * self.d_head
            scores = keys[:, lo:hi] @ q[lo:hi] * scale
            scores -= scores.max()
            w = np.exp(scores)
            w /= w.sum()
            out[lo:hi] = w @ values[:, lo:hi]
        return out

    def step(self, token_id: int) -> np.ndarray:
        p = self.m._p
        cfg = self.m.config
        x = p("tok_emb")[token_id] * np.sqrt(cfg.d_model) + self.m.positions[self.t]
        for i in range(cfg.n_decoder):
            pre = f"dec{i}"
            h = self._ln_vec(x, f"{pre}.ln1")
            self.k_cache[i][self.t] = h @ p(f"{pre}.self.wk") + p(f"{pre}.self.bk")
            self.v_cache[i][self.t] = h @ p(f"{pre}.self.wv") + p(f"{pre}.self.bv")
            q = h @ p(f"{pre}.self.wq") + p(f"{pre}.self.bq")
            attn = self._heads(q, self.k_cache[i][: self.t + 1], self.v_cache[i][: self.t + 1])
            x = x + attn @ p(f"{pre}.self.wo") + p(f"{pre}.self.bo")
            h = self._ln_vec(x, f"{pre}.ln2")
            q = h @ p(f"{pre}.cross.wq") + p(f"{pre}.cross.bq")
            attn = self._heads(q, self.cross_k[i], self.cross_v[i])
            x = x + attn @ p(f"{pre}.cross.wo") + p(f"{pre}.cross.bo")
            h = self._ln_vec(x, f"{pre}.ln3")
            x = x + np.maximum(h @ p(f"{pre}.w1") + p(f"{pre}.b1"), 0.0) @ p(f"{pre}.w2") + p(f"{pre}.b2")
        x = self._ln_vec(x, "dec_ln")
        self.t += 1
        return x @ p("out_proj") + p("out_bias")


class _FrozenView:
    """Read-only forward over a model's raw arrays (never builds a graph)."""

    def __init__(self, model: BackboneModel):
        self.vocab = model.vocab
        self.config = model.config
        self.positions = model.positions
        self._arrays = {name: p.data for name, p in model._params.items()}

    def _p(self, name: str):
        return self._arrays[name]

    _attention = BackboneModel._attention
    _ffn = BackboneModel._ffn
    _ln = BackboneModel._ln
    encode = BackboneModel.encode
    _decode_logits = BackboneModel._decode_logits
    lm_loss = BackboneModel.lm_loss


def set_trainable(model: BackboneModel, scope) -> None:
    """Set requires_grad per parameter group.

    scope is "all", "none", or an iterable of group names drawn from
    PARAM_GROUPS.
    """
    if scope == "all":
        groups = set(PARAM_GROUPS)
    elif scope == "none":
        groups = set()
    else:
        groups = set(scope)
        unknown = groups - set(PARAM_GROUPS)
        if unknown:
            raise ContractError(f"unknown parameter groups: {sorted(unknown)}")
    for name, p in model._params.items():
        p.requires_grad = model._group_of[name] in groups
        p.grad = np.zeros_like(p.data) if p.requires_grad else None
