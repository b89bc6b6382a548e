"""Tests for the synthetic corpus generator."""

import math
from collections import Counter

import numpy as np
import pytest

from seqmargin import synthetic as sy
from seqmargin.corpus import tokenize


class TestGrammar:
    def test_profiles_exist(self):
        assert set(sy.PROFILES) == {"planted-short-distractor", "multi-response"}

    def test_variants_share_prefix_and_differ_in_tail(self):
        profile = sy.PROFILES["planted-short-distractor"]
        for topic in (0, 7, 31):
            variants = sy.topic_variants(profile, topic)
            assert len(set(variants)) == profile.n_variants
            length = sy.topic_length(profile, topic)
            word = sy._topic_word(topic)
            for v in variants:
                assert len(v) == length
                assert v[0] == "the"
                assert v[-2] == word  # topic word sits next to the end
            prefixes = {v[:-1] for v in variants}
            assert len(prefixes) == 1
            tails = {v[-1] for v in variants}
            assert len(tails) == profile.n_variants

    def test_labels_tokenizer_stable(self):
        """Every grammar token survives the corpus tokenizer unchanged."""
        profile = sy.PROFILES["multi-response"]
        for label in sy.legal_labels(profile):
            assert tokenize(" ".join(label)) == list(label)

    def test_length_distribution_normalized(self):
        for profile in sy.PROFILES.values():
            dist = sy.declared_length_distribution(profile)
            assert sum(dist.values()) == pytest.approx(1.0, abs=1e-12)

    def test_entropy_declaration(self):
        profile = sy.PROFILES["planted-short-distractor"]
        ent = sy.declared_entropy_per_length(profile)
        for length in profile.long_lengths:
            assert ent[length + 1] == pytest.approx(math.log(profile.n_variants))


class TestGeneratePairs:
    def test_deterministic(self):
        profile = sy.PROFILES["planted-short-distractor"]
        a = sy.generate_pairs(profile, 200, seed=5)
        b = sy.generate_pairs(profile, 200, seed=5)
        assert a == b
        c = sy.generate_pairs(profile, 200, seed=6)
        assert a != c

    def test_every_label_is_grammatical(self):
        profile = sy.PROFILES["planted-short-distractor"]
        legal = sy.legal_labels(profile)
        for _, label in sy.generate_pairs(profile, 500, seed=7):
            assert tuple(label.split(" ")) in legal

    def test_length_distribution_matches_declared(self):
        """Monte Carlo check of surface-length frequencies within 3 sigma."""
        profile = sy.PROFILES["planted-short-distractor"]
        n = 40_000
        pairs = sy.generate_pairs(profile, n, seed=8)
        freq = Counter(len(label.split(" ")) + 1 for _, label in pairs)
        for length, p in sy.declared_length_distribution(profile).items():
            se = math.sqrt(p * (1 - p) / n)
            assert abs(freq[length] / n - p) < 3 * se, f"length {length}"

    def test_contexts_mention_their_topic(self):
        profile = sy.PROFILES["planted-short-distractor"]
        pairs = sy.generate_pairs(profile, 300, seed=9)
        legal = sy.legal_labels(profile)
        for context, label in pairs:
            tokens = context.split(" ")
            assert tokens[-4:-1] == ["tell", "me", "about"]
            label_tokens = tuple(label.split(" "))
            if len(label_tokens) > 3:  # long replies embed the topic word
                assert label_tokens[-2] == tokens[-1]
            assert label_tokens in legal

    def test_corpus_file_format(self, tmp_path):
        path = tmp_path / "corpus.tsv"
        sy.generate_corpus_file("multi-response", 50, 11, path)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert len(lines) == 50
        assert all(line.count("\t") == 1 for line in lines)

    def test_unknown_profile(self, tmp_path):
        with pytest.raises(ValueError):
            sy.generate_corpus_file("nonexistent", 5, 0, tmp_path / "x.tsv")
