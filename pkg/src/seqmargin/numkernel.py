"""Dense numeric kernel: peephole LSTM, stable softmax, Adagrad, gradient checks.

Everything is float64 numpy. Forward passes that participate in training
return an explicit cache consumed by the matching ``*_backward`` function;
gradients accumulate into ``Parameter.grad`` so callers can sum over a batch
before updating. There is no tape: each layer's backward is hand-derived and
verified against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
ADAGRAD_DELTA = 1e-8
INIT_SCALE = 0.08


class ShapeError(ValueError):
    """Mismatch between declared and actual tensor dimensions."""


# ---------------------------------------------------------------------------
# Softmax utilities
# ---------------------------------------------------------------------------


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Log-probabilities for a logit vector, computed with max subtraction."""
    logits = np.asarray(logits, dtype=DTYPE)
    if logits.ndim != 1 or logits.size == 0:
        raise ShapeError(f"expected nonempty 1-d logits, got shape {logits.shape}")
    shifted = logits - logits.max()
    return shifted - np.log(np.exp(shifted).sum())


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_logprob(logits: np.ndarray, index: int) -> float:
    """log Pr(index) under the softmax of ``logits``; always <= 0."""
    logits = np.asarray(logits, dtype=DTYPE)
    if not 0 <= index < logits.size:
        raise ValueError(f"index {index} out of range for {logits.size} logits")
    if not np.isfinite(logits).all():
        raise ValueError("logits must be finite")
    return float(log_softmax(logits)[index])


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


class Parameter:
    """Trainable tensor with a gradient and an Adagrad accumulator.

    The three arrays always share one shape; the accumulator is nonnegative
    and nondecreasing across updates.
    """

    __slots__ = ("value", "grad", "adagrad_accum")

    def __init__(self, value: np.ndarray):
        self.value = np.array(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)
        self.adagrad_accum = np.zeros_like(self.value)

    @classmethod
    def zeros(cls, *shape: int) -> "Parameter":
        return cls(np.zeros(shape, dtype=DTYPE))

    @classmethod
    def uniform(cls, shape: tuple[int, ...], rng: np.random.Generator,
                scale: float = INIT_SCALE) -> "Parameter":
        return cls(rng.uniform(-scale, scale, size=shape))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:  # pragma: no cover
        return f"Parameter(shape={self.value.shape})"


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# Peephole LSTM cell
# ---------------------------------------------------------------------------


@dataclass
class LstmState:
    """Recurrent state: hidden vector h and cell vector c, equal width d."""

    h: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=DTYPE)
        self.c = np.asarray(self.c, dtype=DTYPE)
        if self.h.shape != self.c.shape or self.h.ndim != 1 or self.h.size == 0:
            raise ShapeError(
                f"state vectors must be equal-length 1-d, got {self.h.shape} / {self.c.shape}")

    @classmethod
    def zeros(cls, d: int) -> "LstmState":
        return cls(np.zeros(d, dtype=DTYPE), np.zeros(d, dtype=DTYPE))


class LstmCellParams:
    """Peephole LSTM cell parameters for input width e and state width d.

    Gate matrices are d x (e + d) and act on the concatenation [x; h_prev].
    Input and forget gates peek at the previous cell vector, the output gate
    at the freshly computed one.
    """

    GATE_NAMES = ("input", "forget", "output", "candidate")

    def __init__(self, d: int, e: int,
                 weights: Sequence[Parameter], biases: Sequence[Parameter],
                 peepholes: Sequence[Parameter]):
        if d <= 0 or e <= 0:
            raise ShapeError("d and e must be positive")
        self.d = d
        self.e = e
        self.w_i, self.w_f, self.w_o, self.w_g = weights
        self.b_i, self.b_f, self.b_o, self.b_g = biases
        self.p_i, self.p_f, self.p_o = peepholes
        for w in weights:
            if w.shape != (d, e + d):
                raise ShapeError(f"gate matrix shape {w.shape}, expected {(d, e + d)}")
        for b in list(biases) + list(peepholes):
            if b.shape != (d,):
                raise ShapeError(f"gate vector shape {b.shape}, expected {(d,)}")

    @classmethod
    def zeros(cls, d: int, e: int) -> "LstmCellParams":
        return cls(d, e,
                   [Parameter.zeros(d, e + d) for _ in range(4)],
                   [Parameter.zeros(d) for _ in range(4)],
                   [Parameter.zeros(d) for _ in range(3)])

    @classmethod
    def uniform(cls, d: int, e: int, rng: np.random.Generator,
                scale: float = INIT_SCALE) -> "LstmCellParams":
        return cls(d, e,
                   [Parameter.uniform((d, e + d), rng, scale) for _ in range(4)],
                   [Parameter.uniform((d,), rng, scale) for _ in range(4)],
                   [Parameter.uniform((d,), rng, scale) for _ in range(3)])

    def parameters(self) -> list[Parameter]:
        return [self.w_i, self.w_f, self.w_o, self.w_g,
                self.b_i, self.b_f, self.b_o, self.b_g,
                self.p_i, self.p_f, self.p_o]

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        names = ["w_i", "w_f", "w_o", "w_g", "b_i", "b_f", "b_o", "b_g",
                 "p_i", "p_f", "p_o"]
        return [(prefix + n, p) for n, p in zip(names, self.parameters())]


@dataclass
class LstmStepCache:
    """Intermediate values of one forward step, consumed by the backward pass."""

    z: np.ndarray        # [x; h_prev], width e + d
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    g: np.ndarray
    c_prev: np.ndarray
    c_new: np.ndarray
    tanh_c: np.ndarray   # tanh(c_new)


def _lstm_forward(params: LstmCellParams, x: np.ndarray,
                  state: LstmState) -> tuple[LstmState, LstmStepCache]:
    z = np.concatenate((x, state.h))
    c_prev = state.c
    a_i = params.w_i.value @ z + params.b_i.value + params.p_i.value * c_prev
    a_f = params.w_f.value @ z + params.b_f.value + params.p_f.value * c_prev
    a_g = params.w_g.value @ z + params.b_g.value
    i = sigmoid(a_i)
    f = sigmoid(a_f)
    g = np.tanh(a_g)
    c_new = f * c_prev + i * g
    a_o = params.w_o.value @ z + params.b_o.value + params.p_o.value * c_new
    o = sigmoid(a_o)
    tanh_c = np.tanh(c_new)
    h_new = o * tanh_c
    cache = LstmStepCache(z, i, f, o, g, c_prev, c_new, tanh_c)
    return LstmState(h_new, c_new), cache


def lstm_step(params: LstmCellParams, x: np.ndarray, state: LstmState) -> LstmState:
    """One peephole LSTM step; deterministic, forward only."""
    x = np.asarray(x, dtype=DTYPE)
    if x.shape != (params.e,):
        raise ShapeError(f"input shape {x.shape}, expected {(params.e,)}")
    if state.h.shape != (params.d,):
        raise ShapeError(f"state width {state.h.shape[0]}, expected {params.d}")
    if not (np.isfinite(x).all() and np.isfinite(state.h).all()
            and np.isfinite(state.c).all()):
        raise ValueError("lstm_step inputs must be finite")
    new_state, _ = _lstm_forward(params, x, state)
    return new_state


def lstm_step_cached(params: LstmCellParams, x: np.ndarray,
                     state: LstmState) -> tuple[LstmState, LstmStepCache]:
    """Forward step for training; skips the finiteness scan on the hot path."""
    x = np.asarray(x, dtype=DTYPE)
    if x.shape != (params.e,):
        raise ShapeError(f"input shape {x.shape}, expected {(params.e,)}")
    return _lstm_forward(params, x, state)


def lstm_step_backward(params: LstmCellParams, cache: LstmStepCache,
                       dh: np.ndarray, dc: np.ndarray
                       ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backprop one step. Accumulates into param grads; returns (dx, dh_prev, dc_prev).

    ``dh``/``dc`` are the loss gradients w.r.t. the step's outputs h_new, c_new.
    """
    i, f, o, g = cache.i, cache.f, cache.o, cache.g
    t = cache.tanh_c
    da_o = dh * t * o * (1.0 - o)
    dc_total = dc + dh * o * (1.0 - t * t) + da_o * params.p_o.value
    da_i = dc_total * g * i * (1.0 - i)
    da_f = dc_total * cache.c_prev * f * (1.0 - f)
    da_g = dc_total * i * (1.0 - g * g)

    z = cache.z
    params.w_i.grad += np.outer(da_i, z)
    params.w_f.grad += np.outer(da_f, z)
    params.w_o.grad += np.outer(da_o, z)
    params.w_g.grad += np.outer(da_g, z)
    params.b_i.grad += da_i
    params.b_f.grad += da_f
    params.b_o.grad += da_o
    params.b_g.grad += da_g
    params.p_i.grad += da_i * cache.c_prev
    params.p_f.grad += da_f * cache.c_prev
    params.p_o.grad += da_o * cache.c_new

    dz = (params.w_i.value.T @ da_i + params.w_f.value.T @ da_f
          + params.w_o.value.T @ da_o + params.w_g.value.T @ da_g)
    dc_prev = dc_total * f + da_i * params.p_i.value + da_f * params.p_f.value
    e = params.e
    return dz[:e], dz[e:], dc_prev


# ---------------------------------------------------------------------------
# Stacked runner (depth >= 1): layer k feeds its hidden vector to layer k+1
# ---------------------------------------------------------------------------


@dataclass
class StackRun:
    top_h: list[np.ndarray]            # per-step hidden of the top layer
    finals: list[LstmState]            # per-layer final states
    caches: list[list[LstmStepCache]]  # [step][layer]


def run_lstm_stack(cells: Sequence[LstmCellParams], xs: Sequence[np.ndarray],
                   init: Sequence[LstmState]) -> StackRun:
    if len(cells) != len(init):
        raise ShapeError("one initial state per layer required")
    states = list(init)
    top_h: list[np.ndarray] = []
    caches: list[list[LstmStepCache]] = []
    for x in xs:
        step_caches = []
        inp = x
        for k, cell in enumerate(cells):
            states[k], cache = lstm_step_cached(cell, inp, states[k])
            step_caches.append(cache)
            inp = states[k].h
        caches.append(step_caches)
        top_h.append(states[-1].h)
    return StackRun(top_h, states, caches)


def run_lstm_stack_backward(cells: Sequence[LstmCellParams], run: StackRun,
                            d_top_h: Sequence[np.ndarray | None],
                            d_finals: Sequence[LstmState] | None = None
                            ) -> tuple[list[np.ndarray], list[LstmState]]:
    """Backprop a stack run. Returns (d_xs, d_init) and accumulates param grads.

    ``d_top_h[t]`` is the loss gradient w.r.t. the top hidden at step t (or
    None); ``d_finals`` optionally adds gradients w.r.t. each layer's final
    state.
    """
    depth = len(cells)
    n_steps = len(run.caches)
    dh = [np.zeros(c.d, dtype=DTYPE) for c in cells]
    dc = [np.zeros(c.d, dtype=DTYPE) for c in cells]
    if d_finals is not None:
        for k in range(depth):
            dh[k] = dh[k] + d_finals[k].h
            dc[k] = dc[k] + d_finals[k].c
    d_xs: list[np.ndarray] = [None] * n_steps  # type: ignore[list-item]
    for t in range(n_steps - 1, -1, -1):
        if d_top_h[t] is not None:
            dh[depth - 1] = dh[depth - 1] + d_top_h[t]
        down = None
        for k in range(depth - 1, -1, -1):
            if down is not None:
                dh[k] = dh[k] + down
            dx, dh_prev, dc_prev = lstm_step_backward(
                cells[k], run.caches[t][k], dh[k], dc[k])
            dh[k], dc[k] = dh_prev, dc_prev
            down = dx
        d_xs[t] = down
    d_init = [LstmState(dh[k], dc[k]) for k in range(depth)]
    return d_xs, d_init


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most max_norm.

    Returns the scale factor applied (1.0 when no clipping happened).
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = 0.0
    for g in grads:
        total += float(np.dot(g.ravel(), g.ravel()))
    norm = np.sqrt(total)
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for g in grads:
        g *= scale
    return scale


def adagrad_update(param: Parameter, lr: float) -> Parameter:
    """One Adagrad step: accum += grad^2, value -= lr*grad/(sqrt(accum)+delta).

    The gradient is zeroed afterwards. Modifies and returns ``param``.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    g = param.grad
    if not np.isfinite(g).all():
        raise ValueError("gradient contains non-finite values")
    param.adagrad_accum += g * g
    param.value -= lr * g / (np.sqrt(param.adagrad_accum) + ADAGRAD_DELTA)
    param.zero_grad()
    return param


# ---------------------------------------------------------------------------
# Finite-difference checker
# ---------------------------------------------------------------------------


def finite_diff_check(loss: Callable[[], float], params: Sequence[Parameter],
                      eps: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central differences.

    ``loss()`` must be deterministic, return a scalar, and accumulate analytic
    gradients into each parameter's ``grad``. The relative error per
    coordinate is |analytic - numeric| / max(1e-8, |numeric|).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    zero_grads(params)
    base = float(loss())
    if not np.isfinite(base):
        raise ValueError("loss is not finite at the evaluation point")
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.value.ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            lp = float(loss())
            flat[idx] = orig - eps
            lm = float(loss())
            flat[idx] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise ValueError("loss is not finite near the evaluation point")
            numeric = (lp - lm) / (2.0 * eps)
            err = abs(a.ravel()[idx] - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, err)
    return worst
