"""Tabular margin experiment on synthetic binary sequences.

The data generator emits "0" with probability 0.4 (a one-token negative) and
otherwise a positive sequence: a '1' followed by ell-1 further tokens that
are '1' independently with probability 0.9**(1/(ell-1)), so the most likely
positive sequence always carries mass 0.6 * 0.9 = 0.54 regardless of length.

Two tabular models are trained on the same samples with a Gaussian prior of
precision c on their parameters:

* a globally normalized model with one parameter per whole sequence, and
* a locally normalized model with one parameter per prefix, scored as a sum
  of per-position softmax terms.

The measured quantity is the margin: full-sequence log-probability of the
model's best positive sequence minus that of "0". Sweeps over c and over the
sequence length reproduce the regimes where the locally normalized model's
margin turns negative while its first-position (local) margin stays positive.

Both models reduce to softmax blocks over disjoint parameter groups, so one
Adagrad kernel (numba-compiled) trains either model: per example, per block,
a dense softmax gradient plus the prior, then an immediate per-coordinate
update. One example = one update, in fixed data order, matching stochastic
Adagrad at learning rate ``lr`` for ``epochs`` passes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np
from numba import njit

ADAGRAD_DELTA = 1e-8

DEFAULT_C_GRID = tuple(round(0.05 * i, 2) for i in range(11))     # 0 .. 0.5
DEFAULT_LENGTH_GRID = tuple(range(2, 9))                          # 2 .. 8

SWEEP_COLUMNS = ("mode", "grid_value", "global_model_margin",
                 "local_model_global_margin", "local_model_local_margin",
                 "seed")


@dataclass(frozen=True)
class ToyConfig:
    """Experiment knobs; the defaults are the canonical desk settings."""

    ell: int = 2
    c: float = 0.0
    n_samples: int = 10000
    epochs: int = 1000
    lr: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.ell < 2:
            raise ValueError("sequence length ell must be >= 2")
        if self.c < 0:
            raise ValueError("prior precision c must be >= 0")
        if min(self.n_samples, self.epochs) < 0 or self.lr <= 0:
            raise ValueError("n_samples/epochs must be >= 0 and lr positive")


class SequenceSpace:
    """Enumeration of model sequences: "0" plus the length-ell positives.

    With ``include_unreachable`` the space grows to all 2**ell binary strings
    (plus "0"), for sensitivity checks; by default only sequences that the
    generator can emit exist, matching the size 2**(ell-1) + 1.
    """

    def __init__(self, ell: int, include_unreachable: bool = False):
        if ell < 2:
            raise ValueError("ell must be >= 2")
        self.ell = ell
        self.include_unreachable = include_unreachable
        if include_unreachable:
            full = ["".join(bits) for bits in _binary_strings(ell)]
        else:
            full = ["1" + "".join(bits) for bits in _binary_strings(ell - 1)]
        self.sequences: list[str] = ["0"] + sorted(full)
        self.index: dict[str, int] = {s: i for i, s in enumerate(self.sequences)}
        self.positives: list[str] = [s for s in self.sequences
                                     if len(s) == ell and s[0] == "1"]

    def __len__(self) -> int:
        return len(self.sequences)

    def prefixes_at(self, level: int) -> list[str]:
        """All valid prefixes of the given length, sorted lexicographically."""
        if level == 1:
            return ["0", "1"]
        seen = sorted({s[:level] for s in self.sequences if len(s) >= level})
        return seen


def _binary_strings(n: int) -> Iterable[tuple[str, ...]]:
    import itertools
    return itertools.product("01", repeat=n)


def generate_toy_data(cfg: ToyConfig) -> list[str]:
    """n_samples i.i.d. draws from the generator, deterministic per seed.

    Continuation bits are drawn for every row in one block so the stream of
    random numbers (and therefore the sample) is a pure function of the seed.
    """
    rng = np.random.default_rng(cfg.seed)
    first_is_one = rng.random(cfg.n_samples) < 0.6
    p_bit = 0.9 ** (1.0 / (cfg.ell - 1))
    bits = rng.random((cfg.n_samples, cfg.ell - 1)) < p_bit
    out: list[str] = []
    for pos, row in zip(first_is_one, bits):
        if pos:
            out.append("1" + "".join("1" if b else "0" for b in row))
        else:
            out.append("0")
    return out


# ---------------------------------------------------------------------------
# Models as softmax blocks over disjoint parameter groups
# ---------------------------------------------------------------------------


class _BlockModel:
    """Shared machinery: flat parameters plus (offset, size) softmax blocks."""

    def __init__(self, space: SequenceSpace, n_params: int):
        self.space = space
        self.theta = np.zeros(n_params, dtype=np.float64)
        self.adagrad_accum = np.zeros(n_params, dtype=np.float64)
        self.block_offset: np.ndarray
        self.block_size: np.ndarray

    def example_terms(self, seq: str) -> list[tuple[int, int]]:
        """(block id, flat parameter index) pairs for one observed sequence."""
        raise NotImplementedError

    def _block_logprob(self, block: int, flat_idx: int) -> float:
        off = int(self.block_offset[block])
        size = int(self.block_size[block])
        neg = -self.theta[off:off + size]
        shifted = neg - neg.max()
        return float(shifted[flat_idx - off] - np.log(np.exp(shifted).sum()))

    def sequence_logprob(self, seq: str) -> float:
        """Model log-probability of a full sequence (product over its terms)."""
        return sum(self._block_logprob(b, i) for b, i in self.example_terms(seq))

    def best_positive(self) -> str:
        best, best_lp = None, -np.inf
        for s in self.space.positives:  # lexicographic order breaks ties
            lp = self.sequence_logprob(s)
            if lp > best_lp:
                best, best_lp = s, lp
        return best

    def per_example_loss(self, seq: str, c: float) -> tuple[float, np.ndarray]:
        """Loss and dense gradient for one observed sequence.

        Per softmax block touched by the sequence: cross-entropy of the
        observed entry under softmax(-theta) plus the Gaussian prior
        (c/2) * sum(theta^2) over that block's parameters.
        """
        loss = 0.0
        grad = np.zeros_like(self.theta)
        for block, flat_idx in self.example_terms(seq):
            off = int(self.block_offset[block])
            size = int(self.block_size[block])
            block_theta = self.theta[off:off + size]
            neg = -block_theta
            shifted = neg - neg.max()
            logz = np.log(np.exp(shifted).sum())
            probs = np.exp(shifted - logz)
            loss += -float(shifted[flat_idx - off] - logz)
            loss += (c / 2.0) * float(block_theta @ block_theta)
            grad[off:off + size] += -probs + c * block_theta
            grad[flat_idx] += 1.0
        return loss, grad


class TabularGlobalModel(_BlockModel):
    """One parameter per sequence; a single softmax block over the space."""

    def __init__(self, space: SequenceSpace):
        super().__init__(space, len(space))
        self.block_offset = np.array([0], dtype=np.int64)
        self.block_size = np.array([len(space)], dtype=np.int64)

    def example_terms(self, seq: str) -> list[tuple[int, int]]:
        idx = self.space.index.get(seq)
        if idx is None:
            raise ValueError(f"sequence {seq!r} not in the model space")
        return [(0, idx)]

    def log_probs(self) -> np.ndarray:
        neg = -self.theta
        shifted = neg - neg.max()
        return shifted - np.log(np.exp(shifted).sum())


class TabularLocalModel(_BlockModel):
    """One parameter per prefix, scored position by position.

    ``softmax_scope`` selects the per-position normalizer:

    * "prefix_marginal" (default): softmax over every valid prefix of that
      length, so position j contributes a marginal prefix probability;
    * "continuation": softmax over the two single-token extensions of the
      observed previous prefix, a conditional chain-rule factor.

    Parameters are laid out level-major and lexicographic, which makes both
    scopes contiguous blocks over disjoint groups.
    """

    def __init__(self, space: SequenceSpace, softmax_scope: str = "prefix_marginal"):
        if softmax_scope not in ("prefix_marginal", "continuation"):
            raise ValueError(f"unknown softmax scope {softmax_scope!r}")
        self.softmax_scope = softmax_scope
        self.levels = [space.prefixes_at(j) for j in range(1, space.ell + 1)]
        flat: dict[str, int] = {}
        for level in self.levels:
            for prefix in level:
                flat[prefix] = len(flat)
        super().__init__(space, len(flat))
        self.prefix_index = flat

        offsets, sizes = [], []
        self._block_of_prefix: dict[str, int] = {}
        cursor = 0
        for level_no, level in enumerate(self.levels, start=1):
            if softmax_scope == "prefix_marginal" or level_no == 1:
                offsets.append(cursor)
                sizes.append(len(level))
                for prefix in level:
                    self._block_of_prefix[prefix] = len(offsets) - 1
            else:
                # lexicographic order keeps sibling prefixes adjacent
                for start in range(0, len(level), 2):
                    pair = level[start:start + 2]
                    assert len(pair) == 2 and pair[0][:-1] == pair[1][:-1]
                    offsets.append(cursor + start)
                    sizes.append(2)
                    for prefix in pair:
                        self._block_of_prefix[prefix] = len(offsets) - 1
            cursor += len(level)
        self.block_offset = np.array(offsets, dtype=np.int64)
        self.block_size = np.array(sizes, dtype=np.int64)

    def example_terms(self, seq: str) -> list[tuple[int, int]]:
        terms = []
        for j in range(1, len(seq) + 1):
            prefix = seq[:j]
            if prefix not in self.prefix_index:
                raise ValueError(f"prefix {prefix!r} not in the model space")
            terms.append((self._block_of_prefix[prefix], self.prefix_index[prefix]))
        return terms

    def first_position_logprobs(self) -> tuple[float, float]:
        """(log p('0'), log p('1')) of the level-1 softmax."""
        b = self._block_of_prefix["1"]
        return (self._block_logprob(b, self.prefix_index["0"]),
                self._block_logprob(b, self.prefix_index["1"]))


# ---------------------------------------------------------------------------
# Losses (reference implementations, finite-difference checkable)
# ---------------------------------------------------------------------------


def loss_global(model: TabularGlobalModel, y_plus: str,
                c: float) -> tuple[float, np.ndarray]:
    """Global-model per-example loss and its dense gradient."""
    return model.per_example_loss(y_plus, c)


def loss_local(model: TabularLocalModel, y_plus: str,
               c: float) -> tuple[float, np.ndarray]:
    """Local-model per-example loss; a one-token negative has only one term."""
    return model.per_example_loss(y_plus, c)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@njit(cache=True)
def _train_kernel(theta, accum, ex_ptr, ex_block, ex_idx,
                  block_off, block_size, c, lr, epochs):  # pragma: no cover
    for _ in range(epochs):
        for n in range(ex_ptr.size - 1):
            for s in range(ex_ptr[n], ex_ptr[n + 1]):
                b = ex_block[s]
                off = block_off[b]
                size = block_size[b]
                target = ex_idx[s]
                mx = -theta[off]
                for j in range(1, size):
                    v = -theta[off + j]
                    if v > mx:
                        mx = v
                z = 0.0
                for j in range(size):
                    z += np.exp(-theta[off + j] - mx)
                for j in range(size):
                    p = np.exp(-theta[off + j] - mx) / z
                    g = -p + c * theta[off + j]
                    if off + j == target:
                        g += 1.0
                    accum[off + j] += g * g
                    theta[off + j] -= lr * g / (np.sqrt(accum[off + j])
                                                + ADAGRAD_DELTA)


def _example_arrays(model: _BlockModel, data: list[str]):
    ptr = np.zeros(len(data) + 1, dtype=np.int64)
    blocks: list[int] = []
    idxs: list[int] = []
    for n, seq in enumerate(data):
        for b, i in model.example_terms(seq):
            blocks.append(b)
            idxs.append(i)
        ptr[n + 1] = len(blocks)
    return ptr, np.array(blocks, dtype=np.int64), np.array(idxs, dtype=np.int64)


def train_toy(model: _BlockModel, data: list[str], cfg: ToyConfig) -> _BlockModel:
    """Stochastic Adagrad in fixed data order; one update per example per epoch.

    Blocks of one example are disjoint, so per-block immediate updates equal a
    single whole-gradient Adagrad step for that example. No gradient clipping.
    """
    if cfg.epochs == 0 or not data:
        return model
    ptr, blocks, idxs = _example_arrays(model, data)
    _train_kernel(model.theta, model.adagrad_accum, ptr, blocks, idxs,
                  model.block_offset, model.block_size,
                  float(cfg.c), float(cfg.lr), int(cfg.epochs))
    if not np.isfinite(model.theta).all():
        raise RuntimeError("training diverged: non-finite parameters")
    return model


# ---------------------------------------------------------------------------
# Margins
# ---------------------------------------------------------------------------


def measure_margin(model: _BlockModel) -> float:
    """log P(best positive) - log P("0"), both as full-sequence log-probs."""
    return model.sequence_logprob(model.best_positive()) - model.sequence_logprob("0")


def measure_local_margin(model: TabularLocalModel) -> float:
    """First-position log-probability gap between tokens '1' and '0'."""
    lp0, lp1 = model.first_position_logprobs()
    return lp1 - lp0


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    mode: str
    grid_value: float
    global_model_margin: float
    local_model_global_margin: float
    local_model_local_margin: float
    seed: int


def run_grid_point(cfg: ToyConfig,
                   softmax_scope: str = "prefix_marginal",
                   include_unreachable: bool = False) -> tuple[float, float, float]:
    """Train both models on one configuration; returns the three margins."""
    space = SequenceSpace(cfg.ell, include_unreachable)
    data = generate_toy_data(cfg)
    gmodel = train_toy(TabularGlobalModel(space), data, cfg)
    lmodel = train_toy(TabularLocalModel(space, softmax_scope), data, cfg)
    return (measure_margin(gmodel), measure_margin(lmodel),
            measure_local_margin(lmodel))


def sweep(mode: str, grid: Iterable[float] | None, cfg: ToyConfig,
          softmax_scope: str = "prefix_marginal") -> list[SweepRow]:
    """Margin tables over a regularization grid (ell=2) or a length grid (c=0.1)."""
    rows: list[SweepRow] = []
    if mode == "by_c":
        grid = DEFAULT_C_GRID if grid is None else tuple(grid)
        for c in grid:
            point = replace(cfg, ell=2, c=float(c))
            g, lg, ll = run_grid_point(point, softmax_scope)
            rows.append(SweepRow(mode, float(c), g, lg, ll, cfg.seed))
    elif mode == "by_length":
        grid = DEFAULT_LENGTH_GRID if grid is None else tuple(grid)
        for ell in grid:
            point = replace(cfg, ell=int(ell), c=0.1)
            g, lg, ll = run_grid_point(point, softmax_scope)
            rows.append(SweepRow(mode, float(ell), g, lg, ll, cfg.seed))
    else:
        raise ValueError(f"unknown sweep mode {mode!r}")
    return rows


def write_sweep_csv(rows: list[SweepRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_COLUMNS)
        for r in rows:
            writer.writerow([r.mode, f"{r.grid_value:.12g}",
                             f"{r.global_model_margin:.12g}",
                             f"{r.local_model_global_margin:.12g}",
                             f"{r.local_model_local_margin:.12g}",
                             r.seed])


def read_sweep_csv(path) -> list[SweepRow]:
    rows: list[SweepRow] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != SWEEP_COLUMNS:
            raise ValueError(f"unexpected sweep header {header!r}")
        for rec in reader:
            rows.append(SweepRow(rec[0], float(rec[1]), float(rec[2]),
                                 float(rec[3]), float(rec[4]), int(rec[5])))
    return rows
