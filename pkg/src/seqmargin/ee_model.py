"""Globally conditioned encoder-encoder over a closed response set.

Two disjoint LSTM stacks encode the context into v_x and a candidate label
into v_y; the score of a (context, label) pair is their dot product. Training
maximizes the likelihood of a globally normalized distribution whose
partition function is estimated by importance sampling over a pool of common
label sequences with empirical prior Q. Inference is an exact exhaustive
dot-product scan over precomputed whitelist vectors, so the top-1 is globally
optimal by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from hashlib import sha256
import struct

import numpy as np

from . import numkernel as nk
from .checkpoint import Checkpoint, save_checkpoint
from .corpus import (BOS, EOS, Example, NegativePool, TokenSeq, sample_negatives,
                     surface, with_bos)
from .ed_model import _check_ids, _encode_context_cached, _encode_context_backward

MODEL_TAG = "ee"


class EeModel:
    """Context encoder and label encoder with disjoint parameter storage."""

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
        self.lab_embed = nk.Parameter.uniform((m, e), rng)
        self.lab_cells = [nk.LstmCellParams.uniform(d, e if k == 0 else d, rng)
                          for k in range(depth)]
        self.frozen = False

    def named_parameters(self) -> list[tuple[str, nk.Parameter]]:
        named: list[tuple[str, nk.Parameter]] = [("ctx_embed", self.ctx_embed)]
        for k, cell in enumerate(self.ctx_cells):
            named.extend(cell.named_parameters(f"ctx_cell{k}."))
        named.append(("lab_embed", self.lab_embed))
        for k, cell in enumerate(self.lab_cells):
            named.extend(cell.named_parameters(f"lab_cell{k}."))
        return named

    def parameters(self) -> list[nk.Parameter]:
        return [p for _, p in self.named_parameters()]

    def context_parameters(self) -> list[nk.Parameter]:
        return [self.ctx_embed] + [p for c in self.ctx_cells for p in c.parameters()]

    def label_parameters(self) -> list[nk.Parameter]:
        return [self.lab_embed] + [p for c in self.lab_cells for p in c.parameters()]

    def fingerprint(self) -> str:
        h = sha256()
        for _, p in self.named_parameters():
            h.update(p.value.tobytes())
        return h.hexdigest()

    def freeze(self) -> "EeModel":
        self.frozen = True
        return self

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
    def from_checkpoint(cls, ckpt: Checkpoint) -> tuple["EeModel", int]:
        if ckpt.tag != MODEL_TAG:
            raise ValueError(f"checkpoint holds a {ckpt.tag!r} model, expected 'ee'")
        meta = ckpt.meta
        model = cls(meta["e"], meta["d"], meta["m"], meta["depth"],
                    meta["unroll_limit"], meta["bos_id"], meta["eos_id"])
        for name, p in model.named_parameters():
            p.value[...] = ckpt.tensors[name]
            p.adagrad_accum[...] = ckpt.tensors[name + ".accum"]
        model.frozen = True
        return model, int(meta["step"])


# ---------------------------------------------------------------------------
# Encoding and scoring
# ---------------------------------------------------------------------------


def encode_context(model: EeModel, context: TokenSeq) -> np.ndarray:
    v_x, _, _ = _encode_context_cached(model, context)
    return v_x


def _encode_label_cached(model: EeModel, label: TokenSeq):
    if len(label) < 2 or label[0] != model.bos_id or label[-1] != model.eos_id:
        raise ValueError("label must be BOS-prefixed and EOS-terminated")
    if len(label) - 1 > model.unroll_limit:
        raise ValueError(
            f"label of {len(label) - 1} tokens exceeds unroll limit "
            f"{model.unroll_limit}")
    _check_ids(label, model.m)
    xs = [model.lab_embed.value[t] for t in label]
    init = [nk.LstmState.zeros(model.d) for _ in model.lab_cells]
    run = nk.run_lstm_stack(model.lab_cells, xs, init)
    return run.top_h[-1], run, list(label)


def _encode_label_backward(model: EeModel, run, ids, d_vy: np.ndarray) -> None:
    d_top = [None] * len(ids)
    d_top[-1] = d_vy
    d_xs, _ = nk.run_lstm_stack_backward(model.lab_cells, run, d_top)
    for tok, dx in zip(ids, d_xs):
        model.lab_embed.grad[tok] += dx


def encode_label(model: EeModel, label: TokenSeq) -> np.ndarray:
    """Final top-layer hidden state of the label encoder; v_y in d dimensions."""
    v_y, _, _ = _encode_label_cached(model, label)
    return v_y


def score(v_x: np.ndarray, v_y: np.ndarray) -> float:
    """Dot-product score; symmetric in its arguments."""
    v_x = np.asarray(v_x, dtype=nk.DTYPE)
    v_y = np.asarray(v_y, dtype=nk.DTYPE)
    if v_x.shape != v_y.shape or v_x.ndim != 1:
        raise nk.ShapeError(f"score expects equal-width vectors, "
                            f"got {v_x.shape} and {v_y.shape}")
    return float(v_x @ v_y)


# ---------------------------------------------------------------------------
# Importance-sampled partition function
# ---------------------------------------------------------------------------


def estimate_log_partition(s_pos: float, negatives: list[tuple[float, float]],
                           k: int) -> float:
    """log of Z_hat = exp(s_pos) + (1/k) * sum_i exp(s_i) / q_i.

    ``negatives`` holds (score, proposal probability) pairs for k i.i.d.
    draws; computed as a single log-sum-exp so large scores cannot overflow.
    Z_hat strictly exceeds exp(s_pos).
    """
    if k != len(negatives) or k < 1:
        raise ValueError("k must equal the number of negative draws and be >= 1")
    scores = np.empty(k + 1, dtype=np.float64)
    scores[0] = s_pos
    for i, (s_i, q_i) in enumerate(negatives):
        if q_i <= 0:
            raise ValueError("proposal probabilities must be positive")
        scores[i + 1] = s_i - np.log(q_i) - np.log(k)
    peak = scores.max()
    return float(peak + np.log(np.exp(scores - peak).sum()))


def _partition_weights(s_pos: float, neg_scores: np.ndarray,
                       neg_probs: np.ndarray) -> tuple[float, np.ndarray, float]:
    """Softmax weights of (s_pos, each negative) inside log Z_hat.

    Returns (w_pos, w_neg, log_z): d log_z / d s_pos = w_pos and
    d log_z / d s_i = w_neg[i].
    """
    k = neg_scores.size
    terms = np.concatenate(([s_pos], neg_scores - np.log(neg_probs) - np.log(k)))
    peak = terms.max()
    expd = np.exp(terms - peak)
    z = expd.sum()
    log_z = float(peak + np.log(z))
    w = expd / z
    return float(w[0]), w[1:], log_z


def train_step_ee(model: EeModel, batch: list[Example], pool: NegativePool,
                  k: int, lr: float, rng: np.random.Generator,
                  clip_norm: float = 1.0, stats: dict | None = None) -> float:
    """One step of sampled-softmax training over whole sequences.

    Per example the true label is excluded from the pool, k negatives are
    drawn from the renormalized prior, and the loss is -(s_pos - log Z_hat).
    Gradients flow through the context encoding and through every label
    encoding, negatives included. Returns the pre-update mean loss.
    """
    if not batch:
        raise ValueError("batch must be nonempty")
    if k < 1:
        raise ValueError("k must be >= 1")
    if model.frozen:
        raise ValueError("model is frozen")
    params = model.parameters()
    nk.zero_grads(params)

    # Plan: sample everything first, encode each distinct label sequence once.
    plans = []
    encode_set: dict[TokenSeq, None] = {}
    skipped = 0
    for ex in batch:
        truth = surface(ex.label)
        try:
            draws = sample_negatives(pool, k, exclude=truth, rng=rng)
        except ValueError:
            skipped += 1
            continue
        plans.append((ex, truth, draws))
        encode_set[ex.label] = None
        for seq, _ in draws:
            encode_set[with_bos(seq)] = None
    if stats is not None:
        stats["skipped"] = stats.get("skipped", 0) + skipped
    if not plans:
        raise ValueError("every example in the batch failed pool exclusion")

    encoded = {lab: _encode_label_cached(model, lab) for lab in encode_set}
    d_vy: dict[TokenSeq, np.ndarray] = {
        lab: np.zeros(model.d) for lab in encode_set}

    weight = 1.0 / len(plans)
    total_loss = 0.0
    for ex, truth, draws in plans:
        v_x, ctx_run, ctx_ids = _encode_context_cached(model, ex.context)
        v_pos = encoded[ex.label][0]
        neg_labels = [with_bos(seq) for seq, _ in draws]
        neg_vecs = np.stack([encoded[lab][0] for lab in neg_labels])
        neg_probs = np.array([q for _, q in draws])
        s_pos = float(v_x @ v_pos)
        neg_scores = neg_vecs @ v_x
        w_pos, w_neg, log_z = _partition_weights(s_pos, neg_scores, neg_probs)
        total_loss += log_z - s_pos

        # d loss / d s_pos = w_pos - 1; d loss / d s_i = w_neg[i]
        d_s_pos = weight * (w_pos - 1.0)
        d_s_neg = weight * w_neg
        d_vx = d_s_pos * v_pos + d_s_neg @ neg_vecs
        d_vy[ex.label] += d_s_pos * v_x
        for lab, ds in zip(neg_labels, d_s_neg):
            d_vy[lab] += ds * v_x
        _encode_context_backward(model, ctx_run, ctx_ids, d_vx)

    for lab, (v_y, run, ids) in encoded.items():
        _encode_label_backward(model, run, ids, d_vy[lab])

    loss = total_loss * weight
    if not np.isfinite(loss):
        raise RuntimeError(f"non-finite training loss {loss!r}; aborting step")
    nk.clip_global_norm([p.grad for p in params], clip_norm)
    for p in params:
        nk.adagrad_update(p, lr)
    return loss


# ---------------------------------------------------------------------------
# Whitelist index and exact retrieval
# ---------------------------------------------------------------------------


@dataclass
class WhitelistIndex:
    """Precomputed label vectors for a frozen model over a whitelist."""

    sequences: list[TokenSeq]     # surface form (content ids + EOS)
    vectors: np.ndarray           # |W| x d, row i = encode_label(BOS + seq i)
    fingerprint: str              # of the model that built the index
    d: int


def precompute_whitelist_index(model: EeModel,
                               whitelist: list[TokenSeq]) -> WhitelistIndex:
    """Encode every whitelist member once; overlength members are dropped."""
    import warnings

    if not model.frozen:
        raise ValueError("index construction requires a frozen model")
    kept: list[TokenSeq] = []
    rows: list[np.ndarray] = []
    dropped = 0
    for seq in whitelist:
        if len(seq) > model.unroll_limit:
            dropped += 1
            continue
        kept.append(tuple(seq))
        rows.append(encode_label(model, with_bos(seq)))
    if dropped:
        warnings.warn(f"{dropped} whitelist sequences exceeded the unroll "
                      "limit and were excluded", RuntimeWarning, stacklevel=2)
    vectors = (np.stack(rows) if rows
               else np.zeros((0, model.d), dtype=nk.DTYPE))
    return WhitelistIndex(kept, vectors, model.fingerprint(), model.d)


def retrieve_topk(index: WhitelistIndex, v_x: np.ndarray,
                  K: int) -> list[tuple[TokenSeq, float]]:
    """Exact exhaustive scan: top-K sequences by dot product, descending.

    Ties break lexicographically; with K >= |W| this is a full ranking.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if len(index.sequences) == 0:
        return []
    v_x = np.asarray(v_x, dtype=nk.DTYPE)
    if v_x.shape != (index.d,):
        raise nk.ShapeError(f"query width {v_x.shape}, index width {index.d}")
    scores = index.vectors @ v_x
    order = sorted(range(len(scores)),
                   key=lambda i: (-scores[i], index.sequences[i]))
    return [(index.sequences[i], float(scores[i])) for i in order[:K]]


# -- index persistence -------------------------------------------------------

_INDEX_MAGIC = b"SQMX"


def save_index(index: WhitelistIndex, path) -> None:
    """Header (fingerprint, |W|, d) + row-major float64 matrix + sequences."""
    with open(path, "wb") as fh:
        fh.write(_INDEX_MAGIC)
        raw = index.fingerprint.encode("ascii")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<II", len(index.sequences), index.d))
        fh.write(index.vectors.astype("<f8").tobytes(order="C"))
        for seq in index.sequences:
            fh.write(struct.pack("<I", len(seq)))
            fh.write(struct.pack(f"<{len(seq)}I", *seq))


def load_index(path, expected_fingerprint: str | None = None) -> WhitelistIndex:
    with open(path, "rb") as fh:
        if fh.read(4) != _INDEX_MAGIC:
            raise ValueError(f"{path}: not a whitelist index")
        (n,) = struct.unpack("<H", fh.read(2))
        fingerprint = fh.read(n).decode("ascii")
        if expected_fingerprint is not None and fingerprint != expected_fingerprint:
            raise ValueError("index was built by a different model")
        count, d = struct.unpack("<II", fh.read(8))
        vectors = np.frombuffer(fh.read(count * d * 8), dtype="<f8")
        vectors = vectors.astype(np.float64).reshape(count, d)
        sequences = []
        for _ in range(count):
            (length,) = struct.unpack("<I", fh.read(4))
            sequences.append(struct.unpack(f"<{length}I", fh.read(4 * length)))
        return WhitelistIndex(sequences, vectors, fingerprint, d)
