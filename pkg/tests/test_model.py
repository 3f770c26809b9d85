import numpy as np
import pytest

import ppcl.autograd as ag
from ppcl.autograd import Tensor
from ppcl.errors import ContractError, ShapeError
from ppcl.model import (BackboneConfig, BackboneModel, PromptedInput, _FrozenView,
                        set_trainable, sinusoidal_positions)
from ppcl.optim import Adam
from ppcl.vocab import EOS, UNK, Vocabulary


@pytest.fixture(scope="module")
def small_model():
    vocab = Vocabulary(list("abcdef =+;"), n_tasks=2)
    model = BackboneModel(vocab, BackboneConfig(d_model=32, n_heads=4, d_ff=48), seed=7)
    return vocab, model


def _target(vocab, text):
    return np.concatenate([vocab.encode(text), [EOS]])


class TestEncode:
    def test_shape_without_prompts(self, small_model):
        vocab, model = small_model
        h = model.encode(PromptedInput(token_ids=vocab.encode("ab")))
        assert h.shape == (2, 32)

    def test_shape_with_prompts(self, small_model):
        vocab, model = small_model
        pv = np.zeros((2 * 4, 32))
        h = model.encode(PromptedInput(token_ids=vocab.encode("abcdef adb "[:10]), prompt_vectors=pv))
        assert h.shape == (18, 32)

    def test_deterministic(self, small_model):
        vocab, model = small_model
        inp = PromptedInput(token_ids=vocab.encode("fed ba"))
        a = model.encode(inp)
        b = model.encode(inp)
        assert np.array_equal(ag._data(a), ag._data(b))

    def test_out_of_range_token(self, small_model):
        _, model = small_model
        with pytest.raises(IndexError):
            model.encode(PromptedInput(token_ids=np.array([10_000])))

    def test_prompt_dim_mismatch(self, small_model):
        vocab, model = small_model
        with pytest.raises(ShapeError):
            model.encode(PromptedInput(token_ids=vocab.encode("ab"),
                                       prompt_vectors=np.zeros((3, 16))))

    def test_frozen_path_bitwise_matches_tracked_path(self, small_model):
        vocab, model = small_model
        inp = PromptedInput(token_ids=vocab.encode("cafe bead"))
        set_trainable(model, "all")
        tracked = model.encode(inp)
        set_trainable(model, "none")
        plain = model.encode(inp)
        assert isinstance(tracked, Tensor) and isinstance(plain, np.ndarray)
        assert np.array_equal(tracked.data, plain)


class TestLmLoss:
    def test_single_position_uniform_is_log_v(self, small_model):
        vocab, _ = small_model
        # a model with zeroed output projection emits uniform logits
        model = BackboneModel(vocab, BackboneConfig(d_model=32, n_heads=4, d_ff=48), seed=1)
        model._params["out_proj"].data[:] = 0.0
        model._params["out_bias"].data[:] = 0.0
        loss = model.lm_loss(PromptedInput(token_ids=vocab.encode("a")), np.array([EOS]))
        assert loss.item() == pytest.approx(np.log(len(vocab)), abs=1e-12)

    def test_empty_target_rejected(self, small_model):
        vocab, model = small_model
        with pytest.raises(ContractError):
            model.lm_loss(PromptedInput(token_ids=vocab.encode("a")), np.array([], dtype=np.int64))

    def test_target_must_end_with_eos(self, small_model):
        vocab, model = small_model
        with pytest.raises(ContractError):
            model.lm_loss(PromptedInput(token_ids=vocab.encode("a")), vocab.encode("ab"))

    def test_loss_decreases_when_memorizing_one_pair(self, small_model):
        vocab, _ = small_model
        model = BackboneModel(vocab, BackboneConfig(d_model=32, n_heads=4, d_ff=48), seed=3)
        set_trainable(model, "all")
        inp = PromptedInput(token_ids=vocab.encode("abc"))
        tgt = _target(vocab, "fed")
        opt = Adam(lr=3e-3)
        first = model.lm_loss(inp, tgt).item()
        for _ in range(50):
            for p in model.parameters():
                p.zero_grad()
            loss = model.lm_loss(inp, tgt)
            loss.backward()
            opt.step(model.parameters())
        last = model.lm_loss(inp, tgt).item()
        assert last < first * 0.5

    def test_frozen_backbone_keeps_zero_grads(self, small_model):
        vocab, model = small_model
        set_trainable(model, "none")
        pv = Tensor(np.zeros((4, 32)), requires_grad=True)
        loss = model.lm_loss(PromptedInput(token_ids=vocab.encode("ab"), prompt_vectors=pv),
                             _target(vocab, "ba"))
        loss.backward()
        assert all(p.grad is None for p in model.parameters())
        assert np.abs(pv.grad).sum() > 0

    def test_equals_mean_of_per_position_cross_entropy(self, small_model):
        vocab, model = small_model
        inp = PromptedInput(token_ids=vocab.encode("abc"))
        tgt = _target(vocab, "de")
        frozen = _FrozenView(model)
        enc = frozen.encode(inp)
        from ppcl.vocab import BOS

        logits = frozen._decode_logits(enc, np.concatenate([[BOS], tgt[:-1]]))
        per_pos = []
        for t in range(len(tgt)):
            row = logits[t]
            per_pos.append(-np.log(np.exp(row - row.max())[tgt[t]] / np.exp(row - row.max()).sum()))
        assert model.lm_loss(inp, tgt).item() == pytest.approx(np.mean(per_pos), rel=1e-10)


class TestGreedyGenerate:
    def test_memorized_pair_is_reproduced(self, small_model):
        vocab, _ = small_model
        model = BackboneModel(vocab, BackboneConfig(d_model=32, n_heads=4, d_ff=48), seed=3)
        set_trainable(model, "all")
        inp = PromptedInput(token_ids=vocab.encode("abc"))
        tgt = _target(vocab, "fed")
        opt = Adam(lr=3e-3)
        for _ in range(80):
            for p in model.parameters():
                p.zero_grad()
            model.lm_loss(inp, tgt).backward()
            opt.step(model.parameters())
        out = model.greedy_generate(inp, max_len=10)
        assert vocab.decode(out) == "fed"

    def test_max_len_one(self, small_model):
        vocab, model = small_model
        out = model.greedy_generate(PromptedInput(token_ids=vocab.encode("ab")), max_len=1)
        assert len(out) <= 1

    def test_deterministic(self, small_model):
        vocab, model = small_model
        inp = PromptedInput(token_ids=vocab.encode("fade"))
        a = model.greedy_generate(inp, max_len=8)
        b = model.greedy_generate(inp, max_len=8)
        assert np.array_equal(a, b)

    def test_incremental_matches_recompute(self, small_model):
        vocab, _ = small_model
        rng = np.random.Generator(np.random.PCG64(4))
        for seed in range(4):
            model = BackboneModel(vocab, BackboneConfig(d_model=32, n_heads=4, d_ff=48), seed=seed)
            pv = rng.normal(size=(5, 32)) * 0.2
            for prompts in (None, pv):
                inp = PromptedInput(token_ids=vocab.encode("bead fc"), prompt_vectors=prompts)
                fast = model.greedy_generate(inp, max_len=12)
                slow = model._greedy_generate_recompute(inp, max_len=12)
                assert np.array_equal(fast, slow)

    def test_max_len_zero_rejected(self, small_model):
        vocab, model = small_model
        with pytest.raises(ContractError):
            model.greedy_generate(PromptedInput(token_ids=vocab.encode("a")), max_len=0)


class TestSetTrainable:
    def test_none_then_training_changes_nothing(self, small_model):
        vocab, _ = small_model
        model = BackboneModel(vocab, BackboneConfig(d_model=32, n_heads=4, d_ff=48), seed=5)
        set_trainable(model, "none")
        before = model.checksum()
        inp = PromptedInput(token_ids=vocab.encode("ab"))
        tgt = _target(vocab, "ba")
        opt = Adam(lr=0.1)
        pv = Tensor(np.zeros((2, 32)), requires_grad=True)
        for _ in range(20):
            pv.zero_grad()
            loss = model.lm_loss(PromptedInput(token_ids=vocab.encode("ab"), prompt_vectors=pv), tgt)
            loss.backward()
            opt.step([pv])
        loss = model.lm_loss(inp, tgt)  # also exercise the promptless path
        assert model.checksum() == before

    def test_all_marks_everything(self, small_model):
        vocab, model = small_model
        set_trainable(model, "all")
        assert all(p.requires_grad for p in model.parameters())
        set_trainable(model, "none")

    def test_group_subset(self, small_model):
        vocab, model = small_model
        set_trainable(model, ["encoder"])
        flags = {name: p.requires_grad for name, p in model.named_parameters()}
        assert flags["enc0.self.wq"] and not flags["tok_emb"] and not flags["out_proj"]
        set_trainable(model, "none")

    def test_unknown_group_rejected(self, small_model):
        _, model = small_model
        with pytest.raises(ContractError):
            set_trainable(model, ["attention_heads"])


class TestCheckpoint:
    def test_bit_exact_round_trip(self, small_model, tmp_path):
        vocab, model = small_model
        path = tmp_path / "model.ppcl"
        model.save(path)
        clone = BackboneModel(vocab, model.config, seed=99)
        assert clone.checksum() != model.checksum()
        clone.load(path)
        assert clone.checksum() == model.checksum()

    def test_magic_guard(self, small_model, tmp_path):
        _, model = small_model
        path = tmp_path / "bad.ppcl"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError):
            model.load(path)


def test_sinusoidal_positions_alternate_sin_cos():
    table = sinusoidal_positions(8, 6)
    assert table.shape == (8, 6)
    assert table[0, 0] == pytest.approx(0.0)      # sin(0)
    assert table[0, 1] == pytest.approx(1.0)      # cos(0)
    assert np.all(np.abs(table) <= 1.0)


def test_unknown_eval_char_maps_to_unk(small_model):
    vocab, _ = small_model
    ids = vocab.encode("a!z")
    assert ids[1] == UNK and ids[2] == UNK
