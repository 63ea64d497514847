import math

import numpy as np
import pytest

from todkit.corpus import Dialogue, Turn
from todkit.encoder import EncoderConfig, init_params
from todkit.mathutil import softmax_cross_entropy
from todkit.objectives import (LABEL_SENTINEL, apply_dynamic_masking,
                               combined_loss, init_mlm_head,
                               make_contrastive_batch, make_mlm_batch, mlm_loss,
                               rcl_from_embeddings, rcl_loss, valid_split_points)
from todkit.tokenizer import TokenSequence, flatten_dialogue, train_subword

CFG = EncoderConfig(num_layers=1, num_heads=2, hidden=8, ffn_dim=12,
                    vocab_size=24, max_positions=32, dropout=0.0)


@pytest.fixture(scope="module")
def small_vocab():
    return train_subword(["a b c d e f g a b c"], vocab_size=17)


def _params(seed=0):
    p = init_params(CFG, seed)
    p.update(init_mlm_head(CFG, seed + 1))
    return p


class TestDynamicMasking:
    def test_rate_zero(self, small_vocab):
        seq = TokenSequence.from_ids([2, 8, 9, 10, 11])
        item = apply_dynamic_masking(small_vocab, seq, rate=0.0, seed=0)
        assert item.mask_count == 0
        assert (item.labels == LABEL_SENTINEL).all()
        assert np.array_equal(item.seq.ids, seq.ids)

    def test_rate_one_forced_mask_branch(self, small_vocab):
        seq = TokenSequence.from_ids([2, 8, 9, 10, 11])
        item = apply_dynamic_masking(small_vocab, seq, rate=1.0, seed=0,
                                     mask_prob=1.0, random_prob=0.0)
        non_special = seq.ids >= small_vocab.num_specials
        assert (item.seq.ids[non_special] == small_vocab.mask_id).all()
        assert item.mask_count == int(non_special.sum())
        assert (item.labels[non_special] == seq.ids[non_special]).all()

    def test_special_only_sequence(self, small_vocab):
        seq = TokenSequence.from_ids([2, 5, 6, 0])
        item = apply_dynamic_masking(small_vocab, seq, rate=1.0, seed=0)
        assert item.mask_count == 0

    def test_deterministic_and_dynamic(self, small_vocab):
        seq = TokenSequence.from_ids([2] + list(range(7, 17)) * 6)
        a = apply_dynamic_masking(small_vocab, seq, rate=0.5, seed=3)
        b = apply_dynamic_masking(small_vocab, seq, rate=0.5, seed=3)
        c = apply_dynamic_masking(small_vocab, seq, rate=0.5, seed=4)
        assert np.array_equal(a.seq.ids, b.seq.ids)
        assert not np.array_equal(a.seq.ids, c.seq.ids)

    def test_masking_statistics(self, small_vocab):
        # rate and 0.8/0.1/0.1 split over >= 10,000 maskable positions
        n_maskable = 0
        n_selected = 0
        n_masked = 0
        n_random = 0
        n_kept = 0
        specials_touched = 0
        rng = np.random.default_rng(123)
        base = np.array([2, 5] + list(range(7, 17)) * 10 + [6, 0])
        for trial in range(120):
            seq = TokenSequence.from_ids(base)
            item = apply_dynamic_masking(small_vocab, seq, 0.15, int(rng.integers(2**31)))
            maskable = base >= small_vocab.num_specials
            n_maskable += int(maskable.sum())
            sel = item.labels != LABEL_SENTINEL
            n_selected += int(sel.sum())
            new = item.seq.ids
            n_masked += int((new[sel] == small_vocab.mask_id).sum())
            changed = (new != base) & sel & (new != small_vocab.mask_id)
            n_random += int(changed.sum())
            n_kept += int(((new == base) & sel).sum())
            specials_touched += int((new[~maskable] != base[~maskable]).sum())
        assert n_maskable >= 10000
        assert abs(n_selected / n_maskable - 0.15) < 0.01
        assert abs(n_masked / n_selected - 0.8) < 0.02
        # random replacement can coincide with the original id, so measure
        # the not-[MASK] remainder and its changed subset separately
        assert abs((n_random + n_kept) / n_selected - 0.2) < 0.02
        assert n_random / n_selected < 0.12
        assert specials_touched == 0

    def test_rate_validation(self, small_vocab):
        seq = TokenSequence.from_ids([2, 8])
        with pytest.raises(ValueError):
            apply_dynamic_masking(small_vocab, seq, rate=1.5, seed=0)


class TestMlmLoss:
    def test_uniform_head_gives_log_vocab(self, small_vocab):
        params = _params()
        params["mlm.w"][:] = 0.0
        params["mlm.b"][:] = 0.0
        seq = TokenSequence.from_ids([2, 8, 9, 10, 11, 12])
        batch = make_mlm_batch(small_vocab, [seq], rate=1.0, seed=0,
                               mask_prob=1.0, random_prob=0.0)
        res = mlm_loss(params, CFG, batch)
        assert res.mask_count == 5
        assert res.loss_mean == pytest.approx(math.log(CFG.vocab_size), abs=1e-12)
        assert res.loss_sum == pytest.approx(5 * math.log(CFG.vocab_size), abs=1e-12)

    def test_empty_batch_flagged(self, small_vocab):
        params = _params()
        seq = TokenSequence.from_ids([2, 5, 6])
        batch = make_mlm_batch(small_vocab, [seq], rate=1.0, seed=0)
        res = mlm_loss(params, CFG, batch)
        assert res.empty
        assert res.loss_sum == 0.0
        assert all((g == 0).all() for g in res.grads.values())

    def test_summed_nll_of_known_probs(self):
        # two rows with target probabilities 0.5 and 0.25
        logits = np.array([[0.0, 0.0], [math.log(1.0), math.log(3.0)]])
        loss, dlogits, probs = softmax_cross_entropy(logits, np.array([0, 0]))
        assert probs[0, 0] == pytest.approx(0.5, abs=1e-12)
        assert probs[1, 0] == pytest.approx(0.25, abs=1e-12)
        assert loss == pytest.approx(-math.log(0.5) - math.log(0.25), abs=1e-12)
        assert loss == pytest.approx(2.0794, abs=1e-4)

    def test_gradcheck(self, small_vocab, gradcheck):
        params = _params(seed=5)
        seqs = [TokenSequence.from_ids([2, 8, 9, 10, 11]),
                TokenSequence.from_ids([2, 12, 13, 14])]
        batch = make_mlm_batch(small_vocab, seqs, rate=0.5, seed=7)
        assert batch.mask_count > 0
        res = mlm_loss(params, CFG, batch)

        def loss_fn(p):
            return mlm_loss(p, CFG, batch).loss_sum

        rng = np.random.default_rng(1)
        worst, where = gradcheck(loss_fn, params, res.grads, rng=rng,
                                 samples_per_tensor=8)
        assert worst < 1e-4, f"max rel err {worst} at {where}"

    def test_tied_embeddings_gradcheck(self, small_vocab, gradcheck):
        params = _params(seed=6)
        seqs = [TokenSequence.from_ids([2, 8, 9, 10, 11, 12])]
        batch = make_mlm_batch(small_vocab, seqs, rate=0.6, seed=8)
        assert batch.mask_count > 0
        res = mlm_loss(params, CFG, batch, tie_embeddings=True)
        assert (res.grads["mlm.w"] == 0).all()  # projection reuses emb.tok

        def loss_fn(p):
            return mlm_loss(p, CFG, batch, tie_embeddings=True).loss_sum

        rng = np.random.default_rng(2)
        worst, where = gradcheck(loss_fn, params, res.grads, rng=rng,
                                 samples_per_tensor=8)
        assert worst < 1e-4, f"max rel err {worst} at {where}"

    def test_tied_and_untied_differ(self, small_vocab):
        params = _params(seed=5)
        seqs = [TokenSequence.from_ids([2, 8, 9, 10])]
        batch = make_mlm_batch(small_vocab, seqs, rate=1.0, seed=3,
                               mask_prob=1.0, random_prob=0.0)
        untied = mlm_loss(params, CFG, batch)
        tied = mlm_loss(params, CFG, batch, tie_embeddings=True)
        assert untied.loss_sum != tied.loss_sum


class TestContrastiveBatch:
    def _dialogue(self, speakers, idx=0):
        return Dialogue(id=f"d{idx}", domains=set(),
                        turns=[Turn(s, f"w{i}") for i, s in enumerate(speakers)])

    def test_valid_split_points(self):
        d = self._dialogue(["system", "user", "system", "user"])
        assert valid_split_points(d) == [2]

    def test_deterministic(self, small_vocab):
        ds = [self._dialogue(["system", "user", "system", "user"], i) for i in range(3)]
        a = make_contrastive_batch(ds, 3, seed=2, vocab=small_vocab)
        b = make_contrastive_batch(ds, 3, seed=2, vocab=small_vocab)
        assert [(p.split_turn, p.context.ids.tolist()) for p in a] == \
            [(p.split_turn, p.context.ids.tolist()) for p in b]

    def test_unsplittable_corpus_rejected(self, small_vocab):
        ds = [self._dialogue(["user"]), self._dialogue(["system"], 1)]
        with pytest.raises(ValueError, match="splittable"):
            make_contrastive_batch(ds, 2, seed=0, vocab=small_vocab)

    def test_response_is_single_system_utterance(self, small_vocab):
        ds = [self._dialogue(["user", "system", "user", "system"])]
        pairs = make_contrastive_batch(ds, 4, seed=0, vocab=small_vocab)
        for p in pairs:
            assert p.response.ids[0] == small_vocab.cls_id
            assert p.response.ids[1] == small_vocab.sys_id
            assert small_vocab.usr_id not in p.response.ids


class TestRclLoss:
    def test_single_pair_zero_loss(self, small_vocab):
        params = _params()
        d = Dialogue(id="d", domains=set(),
                     turns=[Turn("user", "a b"), Turn("system", "c d")])
        pairs = make_contrastive_batch([d], 1, seed=0, vocab=small_vocab)
        res = rcl_loss(params, CFG, pairs)
        assert res.loss_sum == 0.0
        assert all((g == 0).all() for g in res.grads.values())

    def test_two_identical_pairs_give_2ln2(self, small_vocab):
        params = _params()
        d = Dialogue(id="d", domains=set(),
                     turns=[Turn("user", "a b"), Turn("system", "c d")])
        pairs = make_contrastive_batch([d, d], 2, seed=0, vocab=small_vocab)
        # identical contexts and responses -> all four logits equal
        res = rcl_loss(params, CFG, pairs)
        assert res.loss_sum == pytest.approx(2 * math.log(2), abs=1e-9)

    def test_strong_diagonal_logits(self):
        c = np.array([[math.sqrt(10.0), 0.0], [0.0, math.sqrt(10.0)]])
        loss, probs, _, _ = rcl_from_embeddings(c, c)
        assert loss == pytest.approx(2 * math.log(1 + math.exp(-10)), rel=1e-9)
        assert loss == pytest.approx(9.08e-5, abs=5e-7)
        assert np.abs(probs.sum(axis=1) - 1).max() < 1e-9

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        c, r = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
        _, probs, _, _ = rcl_from_embeddings(c, r)
        assert np.abs(probs.sum(axis=1) - 1).max() < 1e-9

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        c, r = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
        loss, _, _, _ = rcl_from_embeddings(c, r)
        perm = rng.permutation(6)
        loss_p, _, _, _ = rcl_from_embeddings(c[perm], r[perm])
        assert loss_p == pytest.approx(loss, rel=1e-12)

    def test_nonnegative(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            b = int(rng.integers(1, 6))
            c, r = rng.normal(size=(b, 4)), rng.normal(size=(b, 4))
            loss, _, _, _ = rcl_from_embeddings(c, r)
            assert loss >= 0.0

    def test_gradcheck(self, small_vocab, gradcheck):
        params = _params(seed=6)
        ds = [Dialogue(id=f"d{i}", domains=set(),
                       turns=[Turn("user", "a b"), Turn("system", "c d e"),
                              Turn("user", "f g"), Turn("system", "a c")])
              for i in range(3)]
        pairs = make_contrastive_batch(ds, 3, seed=1, vocab=small_vocab)
        res = rcl_loss(params, CFG, pairs)

        def loss_fn(p):
            return rcl_loss(p, CFG, pairs).loss_sum

        rng = np.random.default_rng(3)
        worst, where = gradcheck(loss_fn, params, res.grads, rng=rng,
                                 samples_per_tensor=6)
        assert worst < 1e-4, f"max rel err {worst} at {where}"


class TestCombined:
    def test_simple_sum(self):
        assert combined_loss(2.0, 1.0) == 3.0

    def test_zero(self):
        assert combined_loss(0.0, 0.0) == 0.0

    def test_mlm_only_weighting(self):
        assert combined_loss(1.7, 9.9, w_mlm=1.0, w_rcl=0.0) == 1.7

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            combined_loss(float("nan"), 0.0)
        with pytest.raises(ValueError):
            combined_loss(0.0, float("inf"))
