import math

import numpy as np
import pytest

import ppcl.autograd as ag
from ppcl.autograd import Tensor
from ppcl.errors import ContractError
from ppcl.model import BackboneConfig, BackboneModel, set_trainable
from ppcl.optim import Adam
from ppcl.pool import (PoolTrainConfig, PromptPool, QueryEncoder, assign_tasks, compute_query,
                       inference_select, init_pool, pp_loss, pptf_loss, select_topk)
from ppcl.vocab import EOS, Vocabulary


@pytest.fixture(scope="module")
def setup():
    vocab = Vocabulary(list("abcdef =+;"), n_tasks=4)
    model = BackboneModel(vocab, BackboneConfig(d_model=32, n_heads=4, d_ff=48), seed=7)
    set_trainable(model, "none")
    return vocab, model, QueryEncoder(model)


def pool_from_keys(key_rows, prompt_len=1):
    keys = [Tensor(np.array(r, dtype=np.float64), requires_grad=True) for r in key_rows]
    d = keys[0].data.shape[0]
    prompts = [Tensor(np.zeros((prompt_len, d)), requires_grad=True) for _ in key_rows]
    return PromptPool(keys, prompts)


def brute_force_topk(key_rows, query, k, mask=None):
    """Independent ranking: python floats, exhaustive sort."""
    candidates = sorted(mask) if mask is not None else range(len(key_rows))
    sims = []
    for i in candidates:
        u, v = np.asarray(query), np.asarray(key_rows[i])
        denom = (math.sqrt(float(u @ u)) + 1e-12) * (math.sqrt(float(v @ v)) + 1e-12)
        sims.append((i, float(u @ v) / denom))
    sims.sort(key=lambda pair: (-pair[1], pair[0]))
    return [i for i, _ in sims[:k]]


class TestInitPool:
    def test_shapes_and_ranges(self):
        pool = init_pool(5, 1, 4, seed=0)
        assert pool.key_matrix().shape == (5, 4)
        assert pool.prompt_array().shape == (5, 1, 4)
        bound = 0.5 / np.sqrt(4)
        assert np.all(np.abs(pool.key_matrix()) <= bound)
        assert np.all(np.abs(pool.prompt_array()) <= bound)

    def test_same_seed_is_bitwise_identical(self):
        a, b = init_pool(6, 2, 8, seed=42), init_pool(6, 2, 8, seed=42)
        assert np.array_equal(a.key_matrix(), b.key_matrix())
        assert np.array_equal(a.prompt_array(), b.prompt_array())
        assert a.assignment is None

    def test_keys_from_examples_are_queries(self, setup):
        vocab, _, qenc = setup
        examples = [vocab.encode(s) for s in ("abc", "fed", "ab fe", "deaf", "cab")]
        pool = init_pool(4, 1, 32, seed=1, init_examples=examples, query_encoder=qenc)
        queries = {compute_query(qenc, e).tobytes() for e in examples}
        for row in pool.key_matrix():
            assert row.tobytes() in queries

    def test_examples_without_encoder_rejected(self):
        with pytest.raises(ContractError):
            init_pool(3, 1, 4, seed=0, init_examples=[np.array([1])])

    def test_bad_sizes_rejected(self):
        with pytest.raises(ContractError):
            init_pool(0, 1, 4, seed=0)
        with pytest.raises(ContractError):
            init_pool(3, 0, 4, seed=0)


class TestComputeQuery:
    def test_single_token_equals_hidden_state(self, setup):
        vocab, model, qenc = setup
        from ppcl.model import PromptedInput, _FrozenView

        ids = vocab.encode("a")
        hidden = _FrozenView(model).encode(PromptedInput(token_ids=ids))
        assert np.array_equal(compute_query(qenc, ids), hidden[0])

    def test_mean_of_positions(self, setup):
        vocab, model, qenc = setup
        from ppcl.model import PromptedInput, _FrozenView

        ids = vocab.encode("abc")
        hidden = _FrozenView(model).encode(PromptedInput(token_ids=ids))
        assert np.allclose(compute_query(qenc, ids), hidden.mean(axis=0), rtol=0, atol=0)

    def test_constant_under_backbone_training(self, setup):
        vocab, model, qenc = setup
        ids = vocab.encode("bead")
        before = compute_query(qenc, ids)
        set_trainable(model, "all")
        opt = Adam(lr=0.05)
        tgt = np.concatenate([vocab.encode("fc"), [EOS]])
        from ppcl.model import PromptedInput

        for _ in range(5):
            for p in model.parameters():
                p.zero_grad()
            model.lm_loss(PromptedInput(token_ids=ids), tgt).backward()
            opt.step(model.parameters())
        set_trainable(model, "none")
        assert np.array_equal(before, compute_query(qenc, ids))

    def test_empty_input_rejected(self, setup):
        _, _, qenc = setup
        with pytest.raises(ContractError):
            compute_query(qenc, np.array([], dtype=np.int64))


class TestSelectTopk:
    def test_hand_case(self):
        pool = pool_from_keys([(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0)])
        sel = select_topk(pool, np.array([1.0, 0.1]), k=2)
        assert sel.indices == [0, 1]
        assert sel.similarities[0] > sel.similarities[1]

    def test_k_larger_than_candidates(self):
        pool = pool_from_keys([(1.0, 0.0), (0.0, 1.0)])
        sel = select_topk(pool, np.array([1.0, 0.5]), k=10)
        assert sel.indices == [0, 1]

    def test_mask_restricts(self):
        pool = pool_from_keys([(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0)])
        sel = select_topk(pool, np.array([1.0, 0.0]), k=1, candidate_mask={2})
        assert sel.indices == [2]

    def test_empty_mask_rejected(self):
        pool = pool_from_keys([(1.0, 0.0)])
        with pytest.raises(ContractError):
            select_topk(pool, np.array([1.0, 0.0]), k=1, candidate_mask=set())

    def test_ties_break_to_lowest_index(self):
        # keys 0 and 2 are exact duplicates, so their sims tie bitwise and
        # index order decides; key 1 wins outright (the norm guard shaves
        # less off larger norms)
        pool = pool_from_keys([(1.0, 0.0), (2.0, 0.0), (1.0, 0.0)])
        sel = select_topk(pool, np.array([1.0, 0.0]), k=3)
        assert sel.indices == [1, 0, 2]
        assert sel.similarities[1] == sel.similarities[2]

    def test_matches_brute_force_on_random_instances(self):
        rng = np.random.Generator(np.random.PCG64(2024))
        for _ in range(300):
            m = int(rng.integers(2, 12))
            d = int(rng.integers(2, 6))
            rows = rng.normal(size=(m, d))
            if rng.random() < 0.3:  # force exact duplicates for tie coverage
                rows[rng.integers(0, m)] = rows[rng.integers(0, m)]
            pool = pool_from_keys(rows)
            query = rng.normal(size=d)
            k = int(rng.integers(1, m + 1))
            mask = None
            if rng.random() < 0.4:
                size = int(rng.integers(1, m + 1))
                mask = set(int(i) for i in rng.choice(m, size=size, replace=False))
            sel = select_topk(pool, query, k, candidate_mask=mask)
            assert sel.indices == brute_force_topk(rows, query, k, mask)

    def test_inference_select_equals_unmasked(self):
        rng = np.random.Generator(np.random.PCG64(5))
        rows = rng.normal(size=(8, 4))
        pool = pool_from_keys(rows)
        query = rng.normal(size=4)
        a = inference_select(pool, query, 3)
        b = select_topk(pool, query, 3)
        assert a.indices == b.indices and a.similarities == b.similarities

    def test_k_equals_pool_returns_everything(self):
        rng = np.random.Generator(np.random.PCG64(6))
        pool = pool_from_keys(rng.normal(size=(5, 3)))
        sel = inference_select(pool, rng.normal(size=3), k=5)
        assert sorted(sel.indices) == [0, 1, 2, 3, 4]


class TestAssignTasks:
    def test_even_split_no_sharing(self):
        pool = pool_from_keys(np.eye(8))
        assignment = assign_tasks(pool, 4, 0.0, seed=0)
        sizes = [len([i for i, t in assignment.items() if t == (tid,)]) for tid in range(4)]
        assert sizes == [2, 2, 2, 2]
        assert set(assignment) == set(range(8))

    def test_shared_pairs_cover_and_adjacent(self):
        pool = pool_from_keys(np.eye(10))
        assignment = assign_tasks(pool, 4, 0.2, seed=3)
        shared = {i: t for i, t in assignment.items() if len(t) == 2}
        assert len(shared) == 2
        for owners in shared.values():
            assert owners[1] == owners[0] + 1
        assert set(assignment) == set(range(10))
        exclusive_sizes = {}
        for i, t in assignment.items():
            if len(t) == 1:
                exclusive_sizes[t[0]] = exclusive_sizes.get(t[0], 0) + 1
        assert max(exclusive_sizes.values()) - min(exclusive_sizes.values()) <= 1

    def test_single_task_owns_everything(self):
        pool = pool_from_keys(np.eye(5))
        assignment = assign_tasks(pool, 1, 0.5, seed=0)
        assert all(t == (0,) for t in assignment.values())

    def test_too_small_pool_rejected(self):
        pool = pool_from_keys(np.eye(3))
        with pytest.raises(ContractError):
            assign_tasks(pool, 4, 0.0, seed=0)


def _toy_pool(setup, seed=11, size=6, assigned_tasks=None):
    vocab, model, qenc = setup
    pool = init_pool(size, 2, 32, seed=seed)
    if assigned_tasks is not None:
        assign_tasks(pool, assigned_tasks, 0.0, seed=1)
    return vocab, model, qenc, pool


class TestPoolLosses:
    def test_lambda_zero_equals_lm_loss(self, setup):
        vocab, model, qenc, pool = _toy_pool(setup)
        ids = vocab.encode("abc")
        tgt = np.concatenate([vocab.encode("de"), [EOS]])
        cfg = PoolTrainConfig(k=2, lam=0.0)
        loss, sel = pp_loss(pool, model, qenc, ids, tgt, cfg)
        from ppcl.model import PromptedInput
        from ppcl.pool import prompt_block

        direct = model.lm_loss(PromptedInput(token_ids=ids,
                                             prompt_vectors=prompt_block(pool, sel)), tgt)
        assert loss.item() == direct.item()

    def test_identical_query_and_keys_alignment_term(self, setup):
        vocab, model, qenc, pool = _toy_pool(setup)
        ids = vocab.encode("fa ce")
        tgt = np.concatenate([vocab.encode("b"), [EOS]])
        query = compute_query(qenc, ids)
        for key in pool.keys:
            key.data = query.copy()
        k = 3
        base, sel = pp_loss(pool, model, qenc, ids, tgt, PoolTrainConfig(k=k, lam=0.0))
        # literal sign: + lam * sum(sim); sim(q, q) = 1 up to the norm guard
        lifted, _ = pp_loss(pool, model, qenc, ids, tgt,
                            PoolTrainConfig(k=k, lam=1.0, literal_similarity_sign=True))
        assert lifted.item() - base.item() == pytest.approx(k * 1.0, abs=1e-6)
        # pull mode adds lam * sum(1 - sim) which vanishes here
        pulled, _ = pp_loss(pool, model, qenc, ids, tgt, PoolTrainConfig(k=k, lam=1.0))
        assert pulled.item() - base.item() == pytest.approx(0.0, abs=1e-6)

    def test_unselected_pairs_get_zero_gradient(self, setup):
        vocab, model, qenc, pool = _toy_pool(setup)
        ids = vocab.encode("abfe")
        tgt = np.concatenate([vocab.encode("cd"), [EOS]])
        loss, sel = pp_loss(pool, model, qenc, ids, tgt, PoolTrainConfig(k=2, lam=0.1))
        loss.backward()
        chosen = set(sel.indices)
        for i in range(pool.size):
            key_norm = np.abs(pool.keys[i].grad).sum()
            prompt_norm = np.abs(pool.prompts[i].grad).sum()
            if i in chosen:
                assert key_norm > 0 and prompt_norm > 0
            else:
                assert key_norm == 0 and prompt_norm == 0

    def test_pp_rejects_assigned_pool(self, setup):
        vocab, model, qenc, pool = _toy_pool(setup, assigned_tasks=2)
        ids = vocab.encode("ab")
        tgt = np.array([EOS - 0 + 4])  # any valid char id, replaced below
        tgt = np.concatenate([vocab.encode("a"), [EOS]])
        with pytest.raises(ContractError):
            pp_loss(pool, model, qenc, ids, tgt, PoolTrainConfig(k=1))

    def test_pptf_requires_assignment(self, setup):
        vocab, model, qenc, pool = _toy_pool(setup)
        ids = vocab.encode("ab")
        tgt = np.concatenate([vocab.encode("a"), [EOS]])
        with pytest.raises(ContractError):
            pptf_loss(pool, model, qenc, ids, tgt, 0, PoolTrainConfig(k=1))

    def test_pptf_selection_restricted_and_isolated(self, setup):
        vocab, model, qenc, pool = _toy_pool(setup, size=6, assigned_tasks=3)
        ids = vocab.encode("bead")
        tgt = np.concatenate([vocab.encode("fc"), [EOS]])
        cfg = PoolTrainConfig(k=4, lam=0.1)  # k above the per-task count of 2 clamps
        loss, sel = pptf_loss(pool, model, qenc, ids, tgt, 1, cfg)
        allowed = pool.assigned_to(1)
        assert set(sel.indices) <= set(allowed)
        assert len(sel.indices) == len(allowed)
        loss.backward()
        for i in range(pool.size):
            outside = i not in allowed
            if outside:
                assert np.abs(pool.keys[i].grad).sum() == 0
                assert np.abs(pool.prompts[i].grad).sum() == 0

    def test_exact_k_assignment_selects_all_of_it(self, setup):
        vocab, model, qenc, pool = _toy_pool(setup, size=6, assigned_tasks=3)
        ids = vocab.encode("fec")
        tgt = np.concatenate([vocab.encode("a"), [EOS]])
        cfg = PoolTrainConfig(k=2, lam=0.1)
        _, sel = pptf_loss(pool, model, qenc, ids, tgt, 2, cfg)
        assert sorted(sel.indices) == pool.assigned_to(2)

    def test_exclusive_pairs_bitwise_stable_across_other_task(self, setup):
        vocab, model, qenc, pool = _toy_pool(setup, size=6, assigned_tasks=2)
        opt = Adam(lr=0.05)
        cfg = PoolTrainConfig(k=2, lam=0.1)
        other = pool.assigned_to(0)
        frozen_bits = {i: (pool.keys[i].data.tobytes(), pool.prompts[i].data.tobytes())
                       for i in other}
        examples = [("abc", "de"), ("fed", "ba"), ("cafe", "fc")]
        for _ in range(3):
            for src, dst in examples:
                ids = vocab.encode(src)
                tgt = np.concatenate([vocab.encode(dst), [EOS]])
                for p in pool.all_params():
                    p.zero_grad()
                loss, sel = pptf_loss(pool, model, qenc, ids, tgt, 1, cfg)
                loss.backward()
                opt.step(pool.pair_params(sel.indices))
        for i in other:
            assert pool.keys[i].data.tobytes() == frozen_bits[i][0]
            assert pool.prompts[i].data.tobytes() == frozen_bits[i][1]

    def test_shared_pair_trains_under_both_owners(self, setup):
        vocab, model, qenc = setup
        pool = init_pool(6, 2, 32, seed=13)
        assign_tasks(pool, 2, 0.34, seed=2)  # 2 shared pairs over 2 tasks
        shared = [i for i, t in pool.assignment.items() if len(t) == 2]
        assert shared
        target_pair = shared[0]
        cfg = PoolTrainConfig(k=len(pool.assigned_to(0)), lam=0.1)
        grads = {}
        for task in (0, 1):
            for p in pool.all_params():
                p.zero_grad()
            ids = vocab.encode("dead" if task == 0 else "beef")
            tgt = np.concatenate([vocab.encode("fc"), [EOS]])
            cfg_t = PoolTrainConfig(k=len(pool.assigned_to(task)), lam=0.1)
            loss, sel = pptf_loss(pool, model, qenc, ids, tgt, task, cfg_t)
            assert target_pair in sel.indices  # k covers the whole assigned set
            loss.backward()
            grads[task] = np.abs(pool.prompts[target_pair].grad).sum()
        assert grads[0] > 0 and grads[1] > 0

    def test_alignment_rises_during_pull_training(self, setup):
        vocab, model, qenc, pool = _toy_pool(setup, seed=21)
        ids = vocab.encode("cafe bad")
        tgt = np.concatenate([vocab.encode("fed"), [EOS]])
        cfg = PoolTrainConfig(k=3, lam=0.5)
        opt = Adam(lr=0.05)
        query = compute_query(qenc, ids)

        def mean_selected_sim():
            sel = select_topk(pool, query, cfg.k)
            return float(np.mean(sel.similarities))

        before = mean_selected_sim()
        for _ in range(30):
            for p in pool.all_params():
                p.zero_grad()
            loss, sel = pp_loss(pool, model, qenc, ids, tgt, cfg)
            loss.backward()
            opt.step(pool.pair_params(sel.indices))
        assert mean_selected_sim() > before

    def test_selection_is_deterministic(self, setup):
        vocab, model, qenc, pool = _toy_pool(setup, seed=31)
        query = compute_query(qenc, vocab.encode("abcd"))
        a = select_topk(pool, query, 3)
        b = select_topk(pool, query, 3)
        assert a.indices == b.indices and a.similarities == b.similarities


class TestPoolCheckpoint:
    def test_round_trip_with_assignment(self, tmp_path):
        pool = init_pool(7, 3, 8, seed=5)
        assign_tasks(pool, 3, 0.3, seed=7)
        path = tmp_path / "pool.ppcl"
        pool.save(path)
        loaded = PromptPool.load(path)
        assert np.array_equal(loaded.key_matrix(), pool.key_matrix())
        assert np.array_equal(loaded.prompt_array(), pool.prompt_array())
        assert loaded.assignment == pool.assignment

    def test_round_trip_without_assignment(self, tmp_path):
        pool = init_pool(4, 2, 6, seed=9)
        pool.save(tmp_path / "p.ppcl")
        loaded = PromptPool.load(tmp_path / "p.ppcl")
        assert loaded.assignment is None
        assert np.array_equal(loaded.key_matrix(), pool.key_matrix())
