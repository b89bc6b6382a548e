"""Synthetic conversational corpora with a planted length-bias regime.

Each example pairs a context ("so tell me about <topic>", with optional
filler) with a label drawn from a two-part mixture:

* with probability ``p_short`` one of a handful of generic short replies
  ("ok", "yes", ...), shared across every topic, so each generic reply is a
  high-frequency sequence corpus-wide; and
* otherwise one of ``n_variants`` long replies specific to the topic, uniform
  among themselves. Variants share a deterministic prefix ("the <mid
  words...> <topic>") and diverge only in their final token, so a topic's
  long replies form a high-entropy family whose continuation frequency drops
  to 1/n_variants at the divergence point while the topic word sits near the
  end, where a recurrent label encoder retains it best.

The mixture is tuned so that even a perfectly calibrated chain-rule model
scores every long reply (p_long / n_variants per variant) below the five
least-frequent generic replies, while the conditional given the context still
identifies the topic: a locally normalized model must fill its top ranks
with generic replies, whereas a whole-sequence scorer is free to rank the
topic's replies first.

Content lengths cycle over ``long_lengths`` by topic, populating the longer
length buckets evenly. The full label set is closed and enumerable, which
makes whitelist construction and exactness checks trivial.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_SYLLABLES = ("ba", "do", "fi", "go", "ku", "la", "me", "ni",
              "po", "ra", "su", "ta", "ve", "wo", "yu", "ze")
_MID_WORDS = ("bright", "calm", "deep", "eager", "fancy", "gentle", "happy",
              "jolly", "keen", "lively", "merry", "neat", "proud", "quiet",
              "royal", "shiny", "tidy", "vivid", "warm", "young")
_TAIL_WORDS = ("today", "often", "here", "now", "again", "later", "soon",
               "maybe", "always", "indeed", "truly", "really", "anyway",
               "somehow", "mostly", "rarely")
_FILLERS = ("well", "um", "so", "hey", "oh")

# (reply tokens, relative mass within the generic share); "ok" leads so the
# shortest bucket has a stable modal reply, the rest stay near-uniform so all
# five trailing generics outscore any single long variant
_GENERIC_POOL = (
    (("ok",), 0.08 / 0.40),
    (("yes",), 0.064 / 0.40),
    (("thanks",), 0.064 / 0.40),
    (("sure",), 0.064 / 0.40),
    (("no", "problem"), 0.064 / 0.40),
    (("see", "you"), 0.064 / 0.40),
)


@dataclass(frozen=True)
class SyntheticProfile:
    name: str
    n_topics: int
    n_variants: int
    p_short: float
    long_lengths: tuple[int, ...]  # content-token counts of long replies

    def generic_replies(self) -> list[tuple[tuple[str, ...], float]]:
        return [(tokens, mass * self.p_short) for tokens, mass in _GENERIC_POOL]


PROFILES = {
    # one long family per topic; p_long/n_variants below every generic mass
    "planted-short-distractor": SyntheticProfile(
        "planted-short-distractor", n_topics=40, n_variants=10,
        p_short=0.40, long_lengths=(5, 6, 7, 8, 9)),
    # wider response families: many valid long outputs per context
    "multi-response": SyntheticProfile(
        "multi-response", n_topics=32, n_variants=12,
        p_short=0.25, long_lengths=(5, 6, 7, 8, 9)),
}


def _topic_word(i: int) -> str:
    return _SYLLABLES[(i // len(_SYLLABLES)) % len(_SYLLABLES)] + _SYLLABLES[i % len(_SYLLABLES)]


def topic_length(profile: SyntheticProfile, topic: int) -> int:
    return profile.long_lengths[topic % len(profile.long_lengths)]


def topic_variants(profile: SyntheticProfile, topic: int) -> list[tuple[str, ...]]:
    """The long replies of one topic: shared prefix, distinct final tokens.

    Shape: "the" <mid words> <topic word> <tail>; only the tail varies.
    """
    if profile.n_variants > len(_TAIL_WORDS):
        raise ValueError("not enough tail words for the requested variants")
    length = topic_length(profile, topic)
    word = _topic_word(topic)
    mid_rng = np.random.default_rng((811, topic))
    mids = tuple(mid_rng.choice(_MID_WORDS, size=max(0, length - 3),
                                replace=True))
    tail_rng = np.random.default_rng((822, topic))
    picks = tail_rng.choice(len(_TAIL_WORDS), size=profile.n_variants,
                            replace=False)
    return [("the",) + mids + (word, _TAIL_WORDS[p]) for p in picks]


def legal_labels(profile: SyntheticProfile) -> set[tuple[str, ...]]:
    """The closed set of label token sequences the grammar can emit."""
    labels = {tokens for tokens, _ in profile.generic_replies()}
    for topic in range(profile.n_topics):
        labels.update(topic_variants(profile, topic))
    return labels


def declared_length_distribution(profile: SyntheticProfile) -> dict[int, float]:
    """Probability of each surface label length (content tokens + EOS)."""
    dist: dict[int, float] = {}
    for tokens, mass in profile.generic_replies():
        key = len(tokens) + 1
        dist[key] = dist.get(key, 0.0) + mass
    p_long = 1.0 - profile.p_short
    per_length: dict[int, int] = {}
    for topic in range(profile.n_topics):
        ln = topic_length(profile, topic) + 1
        per_length[ln] = per_length.get(ln, 0) + 1
    for ln, count in per_length.items():
        dist[ln] = dist.get(ln, 0.0) + p_long * count / profile.n_topics
    return dist


def declared_entropy_per_length(profile: SyntheticProfile) -> dict[int, float]:
    """Entropy (nats) of the reply given its surface length and the context.

    Long replies are uniform over a topic's variants, so their conditional
    entropy is log(n_variants); generic replies of one length follow their
    renormalized masses.
    """
    out: dict[int, float] = {}
    by_len: dict[int, list[float]] = {}
    for tokens, mass in profile.generic_replies():
        by_len.setdefault(len(tokens) + 1, []).append(mass)
    for ln, masses in by_len.items():
        total = sum(masses)
        out[ln] = -sum((m / total) * math.log(m / total) for m in masses)
    for length in profile.long_lengths:
        out[length + 1] = math.log(profile.n_variants)
    return out


def generate_pairs(profile: SyntheticProfile, size: int,
                   seed: int) -> list[tuple[str, str]]:
    """Deterministic (context text, label text) pairs for one profile."""
    if size < 1:
        raise ValueError("size must be >= 1")
    rng = np.random.default_rng(seed)
    generics = profile.generic_replies()
    generic_cum = np.cumsum([m for _, m in generics])
    generic_cum /= generic_cum[-1]
    pairs: list[tuple[str, str]] = []
    for _ in range(size):
        topic = int(rng.integers(profile.n_topics))
        n_fill = int(rng.integers(0, 3))
        fillers = [str(_FILLERS[int(rng.integers(len(_FILLERS)))])
                   for _ in range(n_fill)]
        context = " ".join(fillers + ["tell", "me", "about", _topic_word(topic)])
        if rng.random() < profile.p_short:
            idx = int(np.searchsorted(generic_cum, rng.random(), side="right"))
            label_tokens = generics[min(idx, len(generics) - 1)][0]
        else:
            variants = topic_variants(profile, topic)
            label_tokens = variants[int(rng.integers(len(variants)))]
        pairs.append((context, " ".join(label_tokens)))
    return pairs


def write_corpus(pairs: list[tuple[str, str]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for context, label in pairs:
            fh.write(f"{context}\t{label}\n")


def generate_corpus_file(profile_name: str, size: int, seed: int, path) -> None:
    profile = PROFILES.get(profile_name)
    if profile is None:
        raise ValueError(f"unknown profile {profile_name!r}; "
                         f"choose from {sorted(PROFILES)}")
    write_corpus(generate_pairs(profile, size, seed), path)
