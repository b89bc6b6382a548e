"""Tests for the encoder-decoder: scoring, training, sampled softmax, beam search."""

import itertools
import math

import numpy as np
import pytest

from seqmargin import corpus as cp
from seqmargin import ed_model as ed
from seqmargin import numkernel as nk


def tiny_model(seed=0, e=3, d=4, m=5, depth=1, unroll=20, scale=None):
    model = ed.EdModel(e, d, m, depth=depth, unroll_limit=unroll,
                       rng=np.random.default_rng(seed))
    if scale is not None:
        for p in model.parameters():
            p.value *= scale / nk.INIT_SCALE
    return model


def zero_model(**kw):
    model = tiny_model(**kw)
    for p in model.parameters():
        p.value[...] = 0.0
    return model


def label(*content):
    return (cp.BOS, *content, cp.EOS)


def all_labels(m, max_content_len, eos=cp.EOS):
    """Every EOS-terminated label with up to max_content_len non-EOS tokens."""
    tokens = [t for t in range(m) if t != eos]
    for n in range(max_content_len + 1):
        for body in itertools.product(tokens, repeat=n):
            yield (cp.BOS, *body, eos)


def ed_batch_loss(seed, e=3, d=5, m=6, depth=1, scale=0.6, n_examples=3):
    """Summed teacher-forced NLL over a few varied examples plus its backward.

    A small batch keeps every weight's gradient well away from the
    finite-difference noise floor.
    """
    rng = np.random.default_rng(seed)
    model = tiny_model(seed, e=e, d=d, m=m, depth=depth, scale=scale)
    batch = []
    for _ in range(n_examples):
        ctx = (cp.BOS,) + tuple(int(t) for t in rng.integers(0, m, size=3))
        body = tuple(int(t) for t in rng.integers(0, m, size=4)
                     if t != cp.EOS) or (3,)
        batch.append(cp.Example(ctx, (cp.BOS, *body, cp.EOS)))

    def loss():
        total = 0.0
        for ex in batch:
            v_x, ctx_run, ctx_ids = ed._encode_context_cached(model, ex.context)
            lp, run, logits, inputs, targets = ed._decode_cached(
                model, v_x, ex.label)
            d_vx = ed._decode_backward(model, run, logits, inputs, targets, 1.0)
            ed._encode_context_backward(model, ctx_run, ctx_ids, d_vx)
            total -= lp
        return total

    return model, loss


class TestEncodeContext:
    def test_zero_parameters_give_zero_vector(self):
        model = zero_model()
        v = ed.encode_context(model, (cp.BOS, 3, 4))
        np.testing.assert_array_equal(v, np.zeros(model.d))

    def test_deterministic(self):
        model = tiny_model(1)
        a = ed.encode_context(model, (cp.BOS,))
        b = ed.encode_context(model, (cp.BOS,))
        np.testing.assert_array_equal(a, b)

    def test_truncation_keeps_most_recent(self):
        model = tiny_model(2, unroll=7)
        rng = np.random.default_rng(3)
        long_ctx = tuple(rng.integers(0, model.m, size=15))
        short_ctx = long_ctx[-7:]
        np.testing.assert_array_equal(ed.encode_context(model, long_ctx),
                                      ed.encode_context(model, short_ctx))

    def test_bad_inputs(self):
        model = tiny_model(0)
        with pytest.raises(ValueError):
            ed.encode_context(model, ())
        with pytest.raises(ValueError):
            ed.encode_context(model, (cp.BOS, model.m))


class TestSequenceLogprob:
    def test_single_token_vocab_is_certain(self):
        model = tiny_model(4, m=1, e=2, d=3)
        # The only token plays both BOS and EOS roles; softmax over one row.
        model.bos_id = model.eos_id = 0
        v = ed.encode_context(model, (0,))
        assert ed.sequence_logprob(model, v, (0, 0)) == 0.0

    def test_matches_stepwise_recomputation(self):
        model = tiny_model(5)
        v = ed.encode_context(model, (cp.BOS, 3))
        lab = label(3, 4, 3)
        vectors = ed.position_logprob_vectors(model, v, lab)
        stepwise = sum(float(vec[t]) for vec, t in zip(vectors, lab[1:]))
        assert ed.sequence_logprob(model, v, lab) == pytest.approx(stepwise, abs=1e-12)

    def test_exhaustive_mass_at_most_one_and_increasing(self):
        """Total probability over EOS-terminated labels is <=1, rising to 1."""
        model = tiny_model(6, m=3, e=2, d=3, scale=0.4)
        v = ed.encode_context(model, (cp.BOS % 3, 0))
        prev = 0.0
        for max_len in (1, 2, 3, 6, 12):
            total = sum(math.exp(ed.sequence_logprob(model, v, lab))
                        for lab in all_labels(3, max_len))
            assert total <= 1.0 + 1e-12
            assert total >= prev - 1e-12
            prev = total
        assert prev > 0.99

    def test_overlength_rejected(self):
        model = tiny_model(7, unroll=4)
        v = ed.encode_context(model, (cp.BOS,))
        with pytest.raises(ValueError):
            ed.sequence_logprob(model, v, label(3, 3, 3, 3, 3))

    def test_result_nonpositive(self):
        rng = np.random.default_rng(8)
        for seed in range(5):
            model = tiny_model(seed, scale=0.5)
            v = ed.encode_context(model, (cp.BOS, int(rng.integers(0, 5))))
            lab = label(*rng.integers(0, 5, size=3).tolist())
            assert ed.sequence_logprob(model, v, lab) <= 0.0


class TestTrainStepEd:
    def test_initial_loss_near_uniform(self):
        """With near-zero parameters every softmax is uniform."""
        model = zero_model(m=6, e=3, d=4)
        ex = cp.Example((cp.BOS, 3), label(4, 5))
        loss = ed.train_step_ed(model, [ex], lr=1e-9)
        assert loss == pytest.approx(3 * math.log(6), rel=1e-6)

    def test_converges_on_single_example(self):
        model = tiny_model(9, e=4, d=8, m=6)
        ex = cp.Example((cp.BOS, 3, 4), label(5, 3))
        losses = [ed.train_step_ed(model, [ex], lr=0.1) for _ in range(500)]
        assert losses[-1] < 0.01
        assert losses[-1] < losses[0]

    def test_gradient_check_full_step(self):
        """Backprop through decoder, encoder and embeddings vs finite differences."""
        model, loss = ed_batch_loss(seed=10)
        assert nk.finite_diff_check(loss, model.parameters(), eps=1e-4) < 1e-4

    def test_gradient_check_depth_two(self):
        model, loss = ed_batch_loss(seed=13, depth=2)
        assert nk.finite_diff_check(loss, model.parameters(), eps=1e-4) < 1e-4

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            ed.train_step_ed(tiny_model(0), [], lr=0.1)


class TestSampledSoftmax:
    def test_two_way_single_negative_is_exact(self):
        """m=2 with the true token excluded leaves one certain negative."""
        logits = np.array([0.4, -1.1])
        ids, probs = ed.sample_proposal_tokens(
            np.array([0.5, 0.5]), true_token=0, n_neg=1,
            rng=np.random.default_rng(0))
        assert list(ids) == [1] and probs[0] == 1.0
        est = ed.sampled_softmax_log_denominator(logits, 0, ids, probs)
        exact = math.log(math.exp(0.4) + math.exp(-1.1))
        assert est == pytest.approx(exact, abs=1e-12)

    def test_exhaustive_expectation_identity(self):
        """E[Z_hat] over the proposal equals the full denominator exactly."""
        rng = np.random.default_rng(12)
        m = 5
        logits = rng.normal(size=m)
        unigram = rng.uniform(0.5, 2.0, size=m)
        unigram /= unigram.sum()
        true_token = 2
        prop = unigram.copy()
        prop[true_token] = 0.0
        prop /= prop.sum()
        candidates = [t for t in range(m) if t != true_token]
        expectation = 0.0
        for a, b in itertools.product(candidates, repeat=2):  # n_neg = 2 draws
            weight = prop[a] * prop[b]
            z = math.exp(ed.sampled_softmax_log_denominator(
                logits, true_token, np.array([a, b]), prop[[a, b]]))
            expectation += weight * z
        exact = np.exp(logits).sum()
        assert expectation == pytest.approx(exact, rel=1e-12)

    def test_monte_carlo_mean_near_exact(self):
        """Estimator mean over many seeds within 3 standard errors (m=50)."""
        rng = np.random.default_rng(13)
        m, n_neg = 50, 8
        logits = rng.normal(scale=0.7, size=m)
        unigram = rng.uniform(0.5, 1.5, size=m)
        unigram /= unigram.sum()
        true_token = 7
        exact = np.exp(logits).sum()
        draws = []
        for seed in range(10_000):
            r = np.random.default_rng((991, seed))
            ids, probs = ed.sample_proposal_tokens(unigram, true_token, n_neg, r)
            draws.append(math.exp(ed.sampled_softmax_log_denominator(
                logits, true_token, ids, probs)))
        draws = np.array(draws)
        se = draws.std(ddof=1) / math.sqrt(draws.size)
        assert abs(draws.mean() - exact) < 3 * se

    def test_without_replacement_limit(self):
        model = tiny_model(0, m=4)
        uni = np.full(4, 0.25)
        with pytest.raises(ValueError):
            ed.sample_proposal_tokens(uni, 0, 4, np.random.default_rng(0),
                                      replace=False)
        state = nk.LstmState.zeros(model.d)
        loss = ed.sampled_token_softmax_loss(
            model, state, 0, 3, uni, np.random.default_rng(1), replace=False)
        assert np.isfinite(loss) and loss > 0


def random_whitelist(rng, m, n, max_content=4):
    wl = set()
    while len(wl) < n:
        length = int(rng.integers(1, max_content + 1))
        body = tuple(int(t) for t in rng.integers(0, m, size=length)
                     if t != cp.EOS)
        if body:
            wl.add(body + (cp.EOS,))
    return sorted(wl)


class TestBeamSearch:
    def test_full_width_matches_brute_force(self):
        """Beam with width >= |W| equals exhaustive argmax over the whitelist."""
        for seed in range(8):
            rng = np.random.default_rng(seed)
            model = tiny_model(seed, m=6, e=3, d=4, scale=0.5)
            wl = random_whitelist(rng, 6, int(rng.integers(4, 20)))
            trie = cp.build_prefix_trie(wl)
            v = ed.encode_context(model, (cp.BOS, int(rng.integers(0, 6))))
            results = ed.beam_search(model, v, trie, width=len(wl))
            brute = max(wl, key=lambda s: (ed.sequence_logprob(
                model, v, cp.with_bos(s)), [-t for t in s]))
            assert results[0][0] == brute
            assert results[0][1] == pytest.approx(
                ed.sequence_logprob(model, v, cp.with_bos(brute)), abs=1e-9)

    def test_width_one_is_greedy(self):
        model = tiny_model(3, m=6, e=3, d=4, scale=0.5)
        wl = random_whitelist(np.random.default_rng(5), 6, 12)
        trie = cp.build_prefix_trie(wl)
        v = ed.encode_context(model, (cp.BOS, 2))
        result = ed.beam_search(model, v, trie, width=1)
        assert len(result) == 1
        # Replay greedily: at each trie node take the best legal token.
        states, lps = ed._decoder_advance(model, ed._decoder_init(model, v),
                                          model.bos_id)
        node, seq = trie.root, ()
        while True:
            choices = trie.children[node]
            token = max(choices, key=lambda t: (lps[t], -t))
            seq += (token,)
            node = choices[token]
            if token == model.eos_id and trie.terminal[node]:
                break
            states, lps = ed._decoder_advance(model, states, token)
        assert result[0][0] == seq

    def test_every_result_in_whitelist(self):
        model = tiny_model(6, m=5, e=2, d=3)
        wl = random_whitelist(np.random.default_rng(9), 5, 10)
        trie = cp.build_prefix_trie(wl)
        v = ed.encode_context(model, (cp.BOS,))
        for width in (1, 3, 10, 25):
            for seq, _ in ed.beam_search(model, v, trie, width):
                assert seq in set(wl)

    def test_f_zero_is_raw_ranking(self):
        model = tiny_model(7, m=5, e=2, d=3, scale=0.5)
        wl = random_whitelist(np.random.default_rng(11), 5, 8)
        trie = cp.build_prefix_trie(wl)
        v = ed.encode_context(model, (cp.BOS, 1))
        pool = ed.beam_search_pool(model, v, trie, width=len(wl))
        ranked = ed.rank_completions(pool, len(wl), length_norm_f=0.0)
        raw = sorted(pool, key=lambda x: (-x[1], x[0]))
        assert [s for s, _ in ranked] == [s for s, _ in raw]

    def test_top_score_nondecreasing_in_width(self):
        for seed in range(10):
            model = tiny_model(seed + 20, m=6, e=2, d=3, scale=0.5)
            wl = random_whitelist(np.random.default_rng(seed), 6, 15)
            trie = cp.build_prefix_trie(wl)
            v = ed.encode_context(model, (cp.BOS,))
            best = -np.inf
            for width in (1, 2, 4, 8, 15):
                res = ed.beam_search(model, v, trie, width)
                assert res[0][1] >= best - 1e-12
                best = max(best, res[0][1])

    def test_length_normalization_changes_key(self):
        pool = [((3, cp.EOS), -1.0), ((3, 3, 3, cp.EOS), -1.6)]
        raw = ed.rank_completions(pool, 2, 0.0)
        norm = ed.rank_completions(pool, 2, 1.0)
        assert raw[0][0] == (3, cp.EOS)
        assert norm[0][0] == (3, 3, 3, cp.EOS)
        assert norm[0][1] == pytest.approx(-0.4)


class TestCheckpointRoundtrip:
    def test_save_load_identical(self, tmp_path):
        from seqmargin.checkpoint import load_checkpoint

        model = tiny_model(15, e=3, d=4, m=6)
        model.parameters()[0].adagrad_accum[...] = 0.25
        path = tmp_path / "model.ckpt"
        model.save(path, vocab_hash="abc123", step=42)
        back, step = ed.EdModel.from_checkpoint(load_checkpoint(path, "abc123"))
        assert step == 42
        assert back.fingerprint() == model.fingerprint()
        np.testing.assert_array_equal(back.parameters()[0].adagrad_accum,
                                      model.parameters()[0].adagrad_accum)

    def test_vocab_hash_mismatch_refused(self, tmp_path):
        from seqmargin.checkpoint import CheckpointError, load_checkpoint

        model = tiny_model(16)
        path = tmp_path / "model.ckpt"
        model.save(path, vocab_hash="right")
        with pytest.raises(CheckpointError):
            load_checkpoint(path, "wrong")
