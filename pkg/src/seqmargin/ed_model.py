"""Locally normalized encoder-decoder over token sequences.

A context LSTM stack encodes the (BOS-prefixed) context into a vector v_x,
which seeds the bottom decoder layer's hidden state. The decoder is teacher
forced on the true label prefix and emits a full-vocabulary softmax per
position, so a label's log-probability is an exact chain-rule sum. Inference
is beam search constrained to a prefix trie over the whitelist, with optional
length normalization of the final ranking.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from hashlib import sha256

import numpy as np

from . import numkernel as nk
from .checkpoint import Checkpoint, save_checkpoint
from .corpus import BOS, EOS, Example, PrefixTrie, TokenSeq

MODEL_TAG = "ed"


class EdModel:
    """Parameter bundle: context encoder, decoder, and output softmax.

    ``m`` counts the full vocabulary (reserved ids included); the softmax has
    one row per vocabulary id and width equal to the hidden size d.
    """

    def __init__(self, e: int, d: int, m: int, depth: int = 1,
                 unroll_limit: int = 100, bos_id: int = BOS, eos_id: int = EOS,
                 rng: np.random.Generator | None = None):
        if min(e, d, m, depth, unroll_limit) < 1:
            raise ValueError("all dimensions must be positive")
        rng = np.random.default_rng(0) if rng is None else rng
        self.e, self.d, self.m, self.depth = e, d, m, depth
        self.unroll_limit = unroll_limit
        self.bos_id, self.eos_id = bos_id, eos_id
        self.ctx_embed = nk.Parameter.uniform((m, e), rng)
        self.ctx_cells = [nk.LstmCellParams.uniform(d, e if k == 0 else d, rng)
                          for k in range(depth)]
        self.dec_embed = nk.Parameter.uniform((m, e), rng)
        self.dec_cells = [nk.LstmCellParams.uniform(d, e if k == 0 else d, rng)
                          for k in range(depth)]
        self.out_softmax = nk.Parameter.uniform((m, d), rng)
        self.frozen = False

    # -- parameter bookkeeping ------------------------------------------------

    def named_parameters(self) -> list[tuple[str, nk.Parameter]]:
        named: list[tuple[str, nk.Parameter]] = [("ctx_embed", self.ctx_embed)]
        for k, cell in enumerate(self.ctx_cells):
            named.extend(cell.named_parameters(f"ctx_cell{k}."))
        named.append(("dec_embed", self.dec_embed))
        for k, cell in enumerate(self.dec_cells):
            named.extend(cell.named_parameters(f"dec_cell{k}."))
        named.append(("out_softmax", self.out_softmax))
        return named

    def parameters(self) -> list[nk.Parameter]:
        return [p for _, p in self.named_parameters()]

    def fingerprint(self) -> str:
        h = sha256()
        for _, p in self.named_parameters():
            h.update(p.value.tobytes())
        return h.hexdigest()

    def freeze(self) -> "EdModel":
        self.frozen = True
        return self

    # -- checkpointing --------------------------------------------------------

    def save(self, path, vocab_hash: str, step: int = 0) -> None:
        meta = {"e": self.e, "d": self.d, "m": self.m, "depth": self.depth,
                "unroll_limit": self.unroll_limit, "bos_id": self.bos_id,
                "eos_id": self.eos_id, "step": step}
        tensors: list[tuple[str, np.ndarray]] = []
        for name, p in self.named_parameters():
            tensors.append((name, p.value))
            tensors.append((name + ".accum", p.adagrad_accum))
        save_checkpoint(path, MODEL_TAG, vocab_hash, meta, tensors)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> tuple["EdModel", int]:
        if ckpt.tag != MODEL_TAG:
            raise ValueError(f"checkpoint holds a {ckpt.tag!r} model, expected 'ed'")
        meta = ckpt.meta
        model = cls(meta["e"], meta["d"], meta["m"], meta["depth"],
                    meta["unroll_limit"], meta["bos_id"], meta["eos_id"])
        for name, p in model.named_parameters():
            p.value[...] = ckpt.tensors[name]
            p.adagrad_accum[...] = ckpt.tensors[name + ".accum"]
        model.frozen = True
        return model, int(meta["step"])


def _check_ids(ids, m: int) -> None:
    for t in ids:
        if not 0 <= t < m:
            raise ValueError(f"token id {t} out of range for vocab of size {m}")


# ---------------------------------------------------------------------------
# Context encoding
# ---------------------------------------------------------------------------


def _encode_context_cached(model, context: TokenSeq):
    """Shared by EdModel and EeModel (identical context-encoder layout)."""
    if len(context) == 0:
        raise ValueError("context must be nonempty (at least BOS)")
    _check_ids(context, model.m)
    ids = list(context)[-model.unroll_limit:]
    xs = [model.ctx_embed.value[t] for t in ids]
    init = [nk.LstmState.zeros(model.d) for _ in model.ctx_cells]
    run = nk.run_lstm_stack(model.ctx_cells, xs, init)
    return run.top_h[-1], run, ids


def _encode_context_backward(model, run, ids, d_vx: np.ndarray) -> None:
    d_top = [None] * len(ids)
    d_top[-1] = d_vx
    d_xs, _ = nk.run_lstm_stack_backward(model.ctx_cells, run, d_top)
    for tok, dx in zip(ids, d_xs):
        model.ctx_embed.grad[tok] += dx


def encode_context(model, context: TokenSeq) -> np.ndarray:
    """Final top-layer hidden state of the context LSTM; v_x in d dimensions.

    Contexts longer than the unroll limit are truncated to their most recent
    tokens.
    """
    v_x, _, _ = _encode_context_cached(model, context)
    return v_x


# ---------------------------------------------------------------------------
# Teacher-forced decoding
# ---------------------------------------------------------------------------


def _validate_label(model: EdModel, label: TokenSeq) -> None:
    if len(label) < 2:
        raise ValueError("label must contain at least BOS and EOS")
    if len(label) - 1 > model.unroll_limit:
        raise ValueError(
            f"label of {len(label) - 1} tokens exceeds unroll limit "
            f"{model.unroll_limit}")
    _check_ids(label, model.m)


def _decoder_init(model: EdModel, v_x: np.ndarray) -> list[nk.LstmState]:
    # v_x seeds the bottom layer's hidden state; cells start at zero.
    init = [nk.LstmState.zeros(model.d) for _ in range(model.depth)]
    init[0] = nk.LstmState(np.asarray(v_x, dtype=nk.DTYPE), np.zeros(model.d))
    return init


def _decode_cached(model: EdModel, v_x: np.ndarray, label: TokenSeq):
    _validate_label(model, label)
    inputs = label[:-1]
    targets = label[1:]
    xs = [model.dec_embed.value[t] for t in inputs]
    run = nk.run_lstm_stack(model.dec_cells, xs, _decoder_init(model, v_x))
    logits = [model.out_softmax.value @ h for h in run.top_h]
    logprob = sum(nk.softmax_logprob(lg, t) for lg, t in zip(logits, targets))
    return float(logprob), run, logits, list(inputs), list(targets)


def _decode_backward(model: EdModel, run, logits, inputs, targets,
                     weight: float) -> np.ndarray:
    """Backprop -weight * logprob; returns the gradient w.r.t. v_x."""
    d_top: list[np.ndarray] = []
    for lg, tgt, h in zip(logits, targets, run.top_h):
        dlogits = nk.softmax(lg)
        dlogits[tgt] -= 1.0
        dlogits *= weight
        model.out_softmax.grad += np.outer(dlogits, h)
        d_top.append(model.out_softmax.value.T @ dlogits)
    d_xs, d_init = nk.run_lstm_stack_backward(model.dec_cells, run, d_top)
    for tok, dx in zip(inputs, d_xs):
        model.dec_embed.grad[tok] += dx
    return d_init[0].h


def sequence_logprob(model: EdModel, v_x: np.ndarray, label: TokenSeq) -> float:
    """Chain-rule log-probability of a BOS...EOS label, teacher forced; <= 0."""
    logprob, _, _, _, _ = _decode_cached(model, v_x, label)
    return logprob


def position_logprob_vectors(model: EdModel, v_x: np.ndarray,
                             label: TokenSeq) -> list[np.ndarray]:
    """Per-position log-probability vectors along the true prefix.

    Entry j (0-based) is the full-vocabulary log-softmax conditioned on
    label[:j+1], i.e. the distribution that scores label[j+1].
    """
    _, _, logits, _, _ = _decode_cached(model, v_x, label)
    return [nk.log_softmax(lg) for lg in logits]


def train_step_ed(model: EdModel, batch: list[Example], lr: float,
                  clip_norm: float = 1.0) -> float:
    """One teacher-forced step: mean NLL backprop, clip, Adagrad.

    Returns the pre-update mean negative log-likelihood of the batch.
    """
    if not batch:
        raise ValueError("batch must be nonempty")
    if model.frozen:
        raise ValueError("model is frozen")
    params = model.parameters()
    nk.zero_grads(params)
    weight = 1.0 / len(batch)
    total_nll = 0.0
    for ex in batch:
        v_x, ctx_run, ctx_ids = _encode_context_cached(model, ex.context)
        logprob, run, logits, inputs, targets = _decode_cached(model, v_x, ex.label)
        total_nll -= logprob
        d_vx = _decode_backward(model, run, logits, inputs, targets, weight)
        _encode_context_backward(model, ctx_run, ctx_ids, d_vx)
    loss = total_nll * weight
    if not np.isfinite(loss):
        raise RuntimeError(f"non-finite training loss {loss!r}; aborting step")
    nk.clip_global_norm([p.grad for p in params], clip_norm)
    for p in params:
        nk.adagrad_update(p, lr)
    return loss


# ---------------------------------------------------------------------------
# Importance-sampled token softmax (corpus-scale training path)
# ---------------------------------------------------------------------------


def sample_proposal_tokens(unigram: np.ndarray, true_token: int, n_neg: int,
                           rng: np.random.Generator, replace: bool = True
                           ) -> tuple[np.ndarray, np.ndarray]:
    """Draw negative token ids from a unigram proposal, true token excluded.

    The proposal is renormalized after exclusion; returns (ids, proposal
    probabilities of the drawn ids).
    """
    unigram = np.asarray(unigram, dtype=np.float64)
    if n_neg < 1:
        raise ValueError("n_neg must be >= 1")
    if (unigram <= 0).any():
        raise ValueError("unigram proposal must be positive on every token")
    m = unigram.size
    if not replace and n_neg > m - 1:
        raise ValueError(
            f"cannot draw {n_neg} distinct negatives from {m - 1} candidates")
    probs = unigram.copy()
    probs[true_token] = 0.0
    probs /= probs.sum()
    ids = rng.choice(m, size=n_neg, replace=replace, p=probs)
    return ids, probs[ids]


def sampled_softmax_log_denominator(logits: np.ndarray, true_token: int,
                                    neg_ids: np.ndarray,
                                    neg_probs: np.ndarray) -> float:
    """log of exp(logit_true) + (1/n) * sum_j exp(logit_j) / q_j.

    Unbiased for the full softmax denominator when q is the renormalized
    proposal over the complement of the true token.
    """
    neg_ids = np.asarray(neg_ids)
    neg_probs = np.asarray(neg_probs, dtype=np.float64)
    if neg_ids.size < 1:
        raise ValueError("need at least one negative sample")
    if (neg_probs <= 0).any():
        raise ValueError("proposal probabilities must be positive")
    n = neg_ids.size
    terms = np.concatenate((
        [logits[true_token]],
        logits[neg_ids] - np.log(neg_probs) - np.log(n)))
    peak = terms.max()
    return float(peak + np.log(np.exp(terms - peak).sum()))


def sampled_token_softmax_loss(model: EdModel, state: nk.LstmState,
                               true_token: int, n_neg: int,
                               unigram: np.ndarray, rng: np.random.Generator,
                               replace: bool = True) -> float:
    """Estimated per-token NLL: -(logit_true - log Z_hat) at a decoder state."""
    if not 0 <= true_token < model.m:
        raise ValueError(f"true token {true_token} out of range")
    logits = model.out_softmax.value @ state.h
    ids, probs = sample_proposal_tokens(unigram, true_token, n_neg, rng, replace)
    log_denom = sampled_softmax_log_denominator(logits, true_token, ids, probs)
    return float(log_denom - logits[true_token])


# ---------------------------------------------------------------------------
# Trie-constrained beam search
# ---------------------------------------------------------------------------


@dataclass
class BeamHypothesis:
    prefix: TokenSeq                 # surface tokens emitted so far (no BOS)
    cum_logprob: float
    states: list[nk.LstmState]       # decoder stack state after the prefix
    trie_node: int


def _decoder_advance(model: EdModel, states: list[nk.LstmState],
                     token: int) -> tuple[list[nk.LstmState], np.ndarray]:
    """Feed one token; return (new states, log-probability vector)."""
    inp = model.dec_embed.value[token]
    new_states: list[nk.LstmState] = []
    for cell, st in zip(model.dec_cells, states):
        st, _ = nk.lstm_step_cached(cell, inp, st)
        new_states.append(st)
        inp = st.h
    logprobs = nk.log_softmax(model.out_softmax.value @ new_states[-1].h)
    return new_states, logprobs


def beam_search_pool(model: EdModel, v_x: np.ndarray, trie: PrefixTrie,
                     width: int) -> list[tuple[TokenSeq, float]]:
    """All completed (sequence, cum_logprob) pairs found at a given width.

    Completed hypotheses leave the active beam; the beam keeps ``width``
    active hypotheses per step, pruned by cumulative log-probability with
    lexicographic tie-breaking. The pool is independent of any length
    normalization, which applies at ranking time only.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    if len(trie) <= 1:
        raise ValueError("prefix trie is empty")
    states, logprobs = _decoder_advance(model, _decoder_init(model, v_x),
                                        model.bos_id)
    beam = [BeamHypothesis((), 0.0, states, trie.root)]
    beam_logprobs = [logprobs]
    completed: list[tuple[TokenSeq, float]] = []
    for _ in range(model.unroll_limit):
        if not beam:
            break
        expansions: list[tuple[float, TokenSeq, BeamHypothesis, int, int]] = []
        for hyp, lps in zip(beam, beam_logprobs):
            for token, node in trie.children[hyp.trie_node].items():
                lp = hyp.cum_logprob + float(lps[token])
                seq = hyp.prefix + (token,)
                if token == model.eos_id and trie.terminal[node]:
                    completed.append((seq, lp))
                else:
                    expansions.append((lp, seq, hyp, token, node))
        expansions.sort(key=lambda x: (-x[0], x[1]))
        beam, beam_logprobs = [], []
        for lp, seq, parent, token, node in expansions[:width]:
            states, lps = _decoder_advance(model, parent.states, token)
            beam.append(BeamHypothesis(seq, lp, states, node))
            beam_logprobs.append(lps)
    if not completed:
        warnings.warn("beam search found no completed hypothesis within "
                      "the unroll limit", RuntimeWarning, stacklevel=2)
    return completed


def rank_completions(completed: list[tuple[TokenSeq, float]], width: int,
                     length_norm_f: float = 0.0) -> list[tuple[TokenSeq, float]]:
    """Rank by cum_logprob / len^f (len excludes BOS, includes EOS)."""
    if not 0.0 <= length_norm_f <= 1.0:
        raise ValueError("length_norm_f must lie in [0, 1]")
    scored = [(seq, lp / (len(seq) ** length_norm_f)) for seq, lp in completed]
    scored.sort(key=lambda x: (-x[1], x[0]))
    return scored[:width]


def beam_search(model: EdModel, v_x: np.ndarray, trie: PrefixTrie, width: int,
                length_norm_f: float = 0.0) -> list[tuple[TokenSeq, float]]:
    """Up to ``width`` whitelist sequences, best normalized score first."""
    completed = beam_search_pool(model, v_x, trie, width)
    return rank_completions(completed, width, length_norm_f)
