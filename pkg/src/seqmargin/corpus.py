"""Text ingestion: tokenization, capped vocabulary, negative pool, prefix trie.

Conventions used throughout the package:

* Encoded contexts are BOS-prefixed id sequences.
* Encoded labels are BOS-prefixed and EOS-terminated.
* Aggregate structures (negative pool, whitelist, trie) store labels in
  *surface* form: content ids followed by EOS, no BOS. Model code prepends
  BOS when it feeds an encoder.

All built structures are immutable after construction; frequency ties are
broken lexicographically everywhere so rebuilds are byte-reproducible.
"""

from __future__ import annotations

import re
import string
from collections import Counter
from dataclasses import dataclass
from hashlib import sha256
from typing import Iterable, Sequence

import numpy as np

UNK, BOS, EOS = 0, 1, 2
RESERVED = ("<unk>", "<bos>", "<eos>")

TokenSeq = tuple[int, ...]

_PUNCT = re.escape(string.punctuation)
_CHUNK_RE = re.compile(f"[{_PUNCT}]+|[^{_PUNCT}]+")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, split off maximal punctuation runs.

    "How are you?" -> ["how", "are", "you", "?"]; each run of consecutive
    punctuation characters becomes a single token.
    """
    tokens: list[str] = []
    for chunk in text.lower().split():
        tokens.extend(_CHUNK_RE.findall(chunk))
    return tokens


class Vocab:
    """Token <-> id map with reserved UNK/BOS/EOS ids and a size cap."""

    def __init__(self, tokens: Sequence[str], cap: int,
                 counts: Sequence[int] | None = None):
        if cap < 1:
            raise ValueError("vocab cap must be >= 1")
        if len(tokens) > cap:
            raise ValueError("more tokens than the declared cap")
        self.cap = cap
        self.id_to_token: list[str] = list(RESERVED) + list(tokens)
        self.token_to_id: dict[str, int] = {
            t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        self.counts = np.zeros(len(self.id_to_token), dtype=np.int64)
        if counts is not None:
            self.counts[3:] = np.asarray(counts, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def token_of(self, idx: int) -> str:
        return self.id_to_token[idx]

    def content_hash(self) -> str:
        """sha256 over the id-ordered token list; pins checkpoints to a vocab."""
        return sha256("\n".join(self.id_to_token).encode("utf-8")).hexdigest()


def build_vocab(corpus: Iterable[Sequence[str]], cap: int) -> Vocab:
    """Vocabulary of the ``cap`` most frequent tokens plus the reserved three.

    Ties are broken lexicographically. An empty corpus yields only the
    reserved tokens.
    """
    counter: Counter[str] = Counter()
    for tokens in corpus:
        counter.update(tokens)
    ranked = sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))[:cap]
    return Vocab([t for t, _ in ranked], cap, [c for _, c in ranked])


def encode(tokens: Sequence[str], vocab: Vocab, role: str) -> TokenSeq:
    """Map tokens to ids; contexts get a BOS prefix, labels also an EOS suffix."""
    ids = [vocab.id_of(t) for t in tokens]
    if role == "context":
        return (BOS, *ids)
    if role == "label":
        return (BOS, *ids, EOS)
    raise ValueError(f"role must be 'context' or 'label', got {role!r}")


def decode(ids: Sequence[int], vocab: Vocab) -> list[str]:
    """Inverse of encode modulo OOV: unknown ids come back as the UNK surface."""
    return [vocab.token_of(i) for i in ids]


def surface(label: Sequence[int]) -> TokenSeq:
    """Strip the BOS prefix from an encoded label: content ids plus EOS."""
    if len(label) < 2 or label[0] != BOS:
        raise ValueError("encoded labels start with BOS and end with EOS")
    return tuple(label[1:])


def with_bos(seq: Sequence[int]) -> TokenSeq:
    """Prepend BOS to a surface-form sequence before feeding an encoder."""
    return (BOS, *seq)


@dataclass(frozen=True)
class Example:
    """One supervised pair: BOS-prefixed context, BOS...EOS label."""

    context: TokenSeq
    label: TokenSeq

    def __post_init__(self):
        if len(self.context) < 1 or self.context[0] != BOS:
            raise ValueError("context must be BOS-prefixed and nonempty")
        if (len(self.label) < 2 or self.label[0] != BOS
                or self.label[-1] != EOS or EOS in self.label[1:-1]):
            raise ValueError("label must be BOS-prefixed with exactly one final EOS")


def make_example(vocab: Vocab, context_tokens: Sequence[str],
                 label_tokens: Sequence[str]) -> Example:
    return Example(encode(context_tokens, vocab, "context"),
                   encode(label_tokens, vocab, "label"))


# ---------------------------------------------------------------------------
# Negative pool
# ---------------------------------------------------------------------------


class NegativePool:
    """The most common label sequences with their empirical prior Q.

    Sampling is i.i.d. with replacement; excluding a sequence renormalizes Q
    over the survivors so each draw carries an exact proposal probability.
    """

    def __init__(self, sequences: Sequence[TokenSeq], counts: Sequence[int]):
        if len(sequences) < 2:
            raise ValueError("negative pool needs at least 2 distinct sequences")
        if len(set(sequences)) != len(sequences):
            raise ValueError("pool sequences must be unique")
        self.sequences: list[TokenSeq] = [tuple(s) for s in sequences]
        self.counts = np.asarray(counts, dtype=np.int64)
        if (self.counts <= 0).any():
            raise ValueError("pool counts must be positive")
        self.prior = self.counts / self.counts.sum()
        self.cumulative = np.cumsum(self.prior)
        self._index = {s: i for i, s in enumerate(self.sequences)}

    def __len__(self) -> int:
        return len(self.sequences)

    def index_of(self, seq: TokenSeq) -> int | None:
        return self._index.get(tuple(seq))


def build_negative_pool(labels: Iterable[TokenSeq], t_most_common: int,
                        max_len: int = 100) -> NegativePool:
    """Pool of the T most frequent label sequences no longer than max_len."""
    if t_most_common < 2:
        raise ValueError("pool size must be >= 2")
    counter: Counter[TokenSeq] = Counter()
    for seq in labels:
        seq = tuple(seq)
        if len(seq) <= max_len:
            counter[seq] += 1
    ranked = sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))[:t_most_common]
    if len(ranked) < 2:
        raise ValueError(
            f"need >= 2 distinct sequences to build a pool, got {len(ranked)}")
    return NegativePool([s for s, _ in ranked], [c for _, c in ranked])


def sample_negatives(pool: NegativePool, k: int, exclude: TokenSeq | None,
                     rng: np.random.Generator) -> list[tuple[TokenSeq, float]]:
    """Draw k sequences i.i.d. from Q renormalized over the pool minus exclude.

    Returns (sequence, proposal probability) pairs; the probabilities are the
    renormalized ones actually used, as required by an unbiased importance
    sampling estimate.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    skip = pool.index_of(exclude) if exclude is not None else None
    if skip is None:
        probs = pool.prior
        survivors = pool.sequences
    else:
        keep = np.ones(len(pool), dtype=bool)
        keep[skip] = False
        if not keep.any():
            raise ValueError("pool minus excluded sequence is empty")
        probs = pool.prior[keep]
        probs = probs / probs.sum()
        survivors = [s for i, s in enumerate(pool.sequences) if keep[i]]
    cum = np.cumsum(probs)
    draws = np.searchsorted(cum, rng.random(k), side="right")
    draws = np.minimum(draws, len(survivors) - 1)
    return [(survivors[i], float(probs[i])) for i in draws]


# ---------------------------------------------------------------------------
# Whitelist and prefix trie
# ---------------------------------------------------------------------------


def build_whitelist(labels: Iterable[TokenSeq], size: int) -> list[TokenSeq]:
    """The most frequent label sequences containing no UNK, truncated to size."""
    if size < 1:
        raise ValueError("whitelist size must be >= 1")
    counter: Counter[TokenSeq] = Counter()
    for seq in labels:
        seq = tuple(seq)
        if UNK not in seq:
            counter[seq] += 1
    ranked = sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))[:size]
    return [s for s, _ in ranked]


class PrefixTrie:
    """Token-labeled trie accepting exactly a set of EOS-terminated sequences."""

    def __init__(self):
        self.children: list[dict[int, int]] = [{}]
        self.terminal: list[bool] = [False]

    @property
    def root(self) -> int:
        return 0

    def __len__(self) -> int:
        return len(self.children)

    def _add(self, seq: TokenSeq) -> None:
        node = 0
        for tok in seq:
            nxt = self.children[node].get(tok)
            if nxt is None:
                nxt = len(self.children)
                self.children[node][tok] = nxt
                self.children.append({})
                self.terminal.append(False)
            node = nxt
        self.terminal[node] = True

    def child(self, node: int, token: int) -> int | None:
        return self.children[node].get(token)

    def accepts(self, seq: Sequence[int]) -> bool:
        node = 0
        for tok in seq:
            nxt = self.children[node].get(tok)
            if nxt is None:
                return False
            node = nxt
        return self.terminal[node]

    def language(self) -> set[TokenSeq]:
        """All accepted sequences; intended for small whitelists in tests."""
        out: set[TokenSeq] = set()
        stack: list[tuple[int, TokenSeq]] = [(0, ())]
        while stack:
            node, prefix = stack.pop()
            if self.terminal[node]:
                out.add(prefix)
            for tok, nxt in self.children[node].items():
                stack.append((nxt, prefix + (tok,)))
        return out


def build_prefix_trie(whitelist: Sequence[TokenSeq]) -> PrefixTrie:
    """Trie over surface-form whitelist sequences; duplicates are deduplicated."""
    trie = PrefixTrie()
    for seq in whitelist:
        seq = tuple(seq)
        if not seq:
            raise ValueError("whitelist sequences must be nonempty")
        if seq[-1] != EOS or EOS in seq[:-1]:
            raise ValueError("whitelist sequences must end with exactly one EOS")
        trie._add(seq)
    return trie


def unigram_distribution(vocab: Vocab, smoothing: float = 1.0) -> np.ndarray:
    """Smoothed unigram token distribution; strictly positive on every id."""
    if smoothing <= 0:
        raise ValueError("smoothing must be positive to keep the proposal positive")
    weights = vocab.counts.astype(np.float64) + smoothing
    return weights / weights.sum()


# ---------------------------------------------------------------------------
# On-disk formats
# ---------------------------------------------------------------------------


def read_corpus_file(path) -> tuple[list[tuple[str, str]], int]:
    """Read a TAB-separated context/label file.

    Returns (pairs, malformed_count); lines without exactly one TAB are
    skipped and counted.
    """
    pairs: list[tuple[str, str]] = []
    malformed = 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                malformed += 1
                continue
            pairs.append((parts[0], parts[1]))
    return pairs, malformed


def write_sequence_file(path, sequences: Sequence[TokenSeq],
                        counts: Sequence[int], vocab: Vocab) -> None:
    """One sequence per line: count, TAB, space-joined tokens (EOS implicit)."""
    with open(path, "w", encoding="utf-8") as fh:
        for seq, count in zip(sequences, counts):
            body = seq[:-1] if seq and seq[-1] == EOS else seq
            fh.write(f"{count}\t{' '.join(vocab.token_of(i) for i in body)}\n")


def read_sequence_file(path, vocab: Vocab) -> tuple[list[TokenSeq], list[int]]:
    sequences: list[TokenSeq] = []
    counts: list[int] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            count_str, _, body = line.partition("\t")
            tokens = body.split(" ") if body else []
            sequences.append(tuple(vocab.id_of(t) for t in tokens) + (EOS,))
            counts.append(int(count_str))
    return sequences, counts


def write_vocab_file(path, vocab: Vocab) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for idx, token in enumerate(vocab.id_to_token):
            fh.write(f"{token}\t{int(vocab.counts[idx])}\n")


def read_vocab_file(path) -> Vocab:
    tokens: list[str] = []
    counts: list[int] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            token, _, count = line.partition("\t")
            tokens.append(token)
            counts.append(int(count))
    if tokens[:3] != list(RESERVED):
        raise ValueError("vocab file must start with the reserved tokens")
    vocab = Vocab(tokens[3:], cap=max(1, len(tokens) - 3), counts=counts[3:])
    return vocab
