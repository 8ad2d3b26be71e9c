"""Single-layer LSTM cell, sequence unrolling with a linear output head,
and the exact hand-derived backward pass (BPTT).

Gate blocks are stacked in the fixed order [forget, input, candidate,
output] inside the 4H-row weight matrices.  Two separate bias vectors are
kept (b_ih and b_hh); they always receive identical gradients but the
double-bias layout is part of the parameter-count contract.

Public entry points are batch-first: inputs (B, t, D), states (B, H).
Internally the recurrence runs over time-major (t, B, .) buffers; the hot
loops are numba-compiled when numba is importable, with an equivalent
numpy fallback.  Trace arrays are stored time-major.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ShapeError, UsageError
from .numerics import Rng, sigmoid

try:
    from numba import njit

    _HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn
        return wrap if not (args and callable(args[0])) else args[0]


@dataclass
class LSTMParams:
    """Weights of one LSTM module; rows stacked [forget, input, candidate, output]."""

    w_x: np.ndarray   # (4H, D)
    w_h: np.ndarray   # (4H, H)
    b_ih: np.ndarray  # (4H,)
    b_hh: np.ndarray  # (4H,)

    def __post_init__(self):
        h4 = self.w_x.shape[0]
        if h4 % 4 != 0 or self.w_h.shape != (h4, h4 // 4) \
                or self.b_ih.shape != (h4,) or self.b_hh.shape != (h4,):
            raise ShapeError(f"inconsistent LSTM shapes: w_x {self.w_x.shape}, "
                             f"w_h {self.w_h.shape}, b_ih {self.b_ih.shape}")

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[1]

    @property
    def input_size(self) -> int:
        return self.w_x.shape[1]

    def arrays(self) -> dict:
        return {"w_x": self.w_x, "w_h": self.w_h, "b_ih": self.b_ih, "b_hh": self.b_hh}

    def param_count(self) -> int:
        return sum(a.size for a in self.arrays().values())


@dataclass
class LinearHead:
    """Per-step affine readout of the hidden state."""

    w_y: np.ndarray  # (O, H)
    b_y: np.ndarray  # (O,)

    @property
    def output_size(self) -> int:
        return self.w_y.shape[0]

    def arrays(self) -> dict:
        return {"w_y": self.w_y, "b_y": self.b_y}

    def param_count(self) -> int:
        return self.w_y.size + self.b_y.size


@dataclass
class LSTMState:
    h: np.ndarray  # (B, H)
    c: np.ndarray  # (B, H)


def lstm_param_count(input_dim: int, hidden: int) -> int:
    """4H(D+H) weights plus the two 4H bias vectors."""
    return 4 * hidden * (input_dim + hidden) + 8 * hidden


def head_param_count(hidden: int, outputs: int) -> int:
    return outputs * (hidden + 1)


def init_lstm(rng: Rng, input_dim: int, hidden: int,
              forget_bias: float = 1.0) -> LSTMParams:
    """Uniform(-1/sqrt(H), +1/sqrt(H)) init with the forget-gate bias block
    offset by `forget_bias` afterwards."""
    bound = 1.0 / np.sqrt(hidden)
    w_x = rng.uniform(-bound, bound, (4 * hidden, input_dim))
    w_h = rng.uniform(-bound, bound, (4 * hidden, hidden))
    b_ih = rng.uniform(-bound, bound, 4 * hidden)
    b_hh = rng.uniform(-bound, bound, 4 * hidden)
    b_ih[:hidden] += forget_bias
    return LSTMParams(w_x=w_x, w_h=w_h, b_ih=b_ih, b_hh=b_hh)


def init_head(rng: Rng, hidden: int, outputs: int) -> LinearHead:
    bound = 1.0 / np.sqrt(hidden)
    w_y = rng.uniform(-bound, bound, (outputs, hidden))
    b_y = rng.uniform(-bound, bound, outputs)
    return LinearHead(w_y=w_y, b_y=b_y)


def zero_state(batch: int, hidden: int) -> LSTMState:
    return LSTMState(h=np.zeros((batch, hidden)), c=np.zeros((batch, hidden)))


# ---------------------------------------------------------------------------
# Recurrence kernels.  All buffers are time-major (t, B, .) and contiguous.
# ---------------------------------------------------------------------------

@njit(cache=True)
def _gate_step(t, c_prev, f_, i_, g_, o_, c_):
    # t holds tanh of the half-scaled preactivations; sigmoid(x) is
    # recovered as (tanh(x/2) + 1) / 2, so one vectorized tanh covers
    # every gate.
    batch, h4 = t.shape
    hsz = h4 // 4
    for b in range(batch):
        for j in range(hsz):
            f = 0.5 * (t[b, j] + 1.0)
            i = 0.5 * (t[b, hsz + j] + 1.0)
            g = t[b, 2 * hsz + j]
            o = 0.5 * (t[b, 3 * hsz + j] + 1.0)
            f_[b, j] = f
            i_[b, j] = i
            g_[b, j] = g
            o_[b, j] = o
            c_[b, j] = f * c_prev[b, j] + i * g


@njit(cache=True)
def _backward_kernel(d_h_in, f_, i_, g_, o_, c_, tc_, c0, w_h, dz, dh_rec, dc_rec):
    steps, batch, hsz = f_.shape
    for k in range(steps - 1, -1, -1):
        for b in range(batch):
            for j in range(hsz):
                f = f_[k, b, j]
                i = i_[k, b, j]
                g = g_[k, b, j]
                o = o_[k, b, j]
                tc = tc_[k, b, j]
                cp = c_[k - 1, b, j] if k > 0 else c0[b, j]
                dh = d_h_in[k, b, j] + dh_rec[b, j]
                do = dh * tc
                dc = dc_rec[b, j] + dh * o * (1.0 - tc * tc)
                dz[k, b, j] = (dc * cp) * f * (1.0 - f)
                dz[k, b, hsz + j] = (dc * g) * i * (1.0 - i)
                dz[k, b, 2 * hsz + j] = (dc * i) * (1.0 - g * g)
                dz[k, b, 3 * hsz + j] = do * o * (1.0 - o)
                dc_rec[b, j] = dc * f
        dh_rec[:, :] = np.dot(dz[k], w_h)


def _gate_step_np(t, c_prev, f_, i_, g_, o_, c_):
    # numpy fallback, same math as _gate_step
    hsz = t.shape[1] // 4
    np.multiply(0.5, t[:, :hsz] + 1.0, out=f_)
    np.multiply(0.5, t[:, hsz:2 * hsz] + 1.0, out=i_)
    g_[:, :] = t[:, 2 * hsz:3 * hsz]
    np.multiply(0.5, t[:, 3 * hsz:] + 1.0, out=o_)
    c_[:, :] = f_ * c_prev + i_ * g_


def _backward_loop_np(d_h_in, f_, i_, g_, o_, c_, tc_, c0, w_h, dz, dh_rec, dc_rec):
    steps, _, hsz = f_.shape
    for k in range(steps - 1, -1, -1):
        f, i, g, o, tc = f_[k], i_[k], g_[k], o_[k], tc_[k]
        cp = c_[k - 1] if k > 0 else c0
        dh = d_h_in[k] + dh_rec
        do = dh * tc
        dc = dc_rec + dh * o * (1.0 - tc * tc)
        dz[k, :, :hsz] = (dc * cp) * f * (1.0 - f)
        dz[k, :, hsz:2 * hsz] = (dc * g) * i * (1.0 - i)
        dz[k, :, 2 * hsz:3 * hsz] = (dc * i) * (1.0 - g * g)
        dz[k, :, 3 * hsz:] = do * o * (1.0 - o)
        dc_rec[:, :] = dc * f
        dh_rec[:, :] = dz[k] @ w_h


_gate_update = _gate_step if _HAS_NUMBA else _gate_step_np
_backward_loop = _backward_kernel if _HAS_NUMBA else _backward_loop_np


@dataclass
class SequenceTrace:
    """Backward-pass cache.  All arrays are time-major: (t, B, .)."""

    inputs: np.ndarray   # (t, B, D)
    f: np.ndarray        # (t, B, H)
    i: np.ndarray
    g: np.ndarray
    o: np.ndarray
    c: np.ndarray        # cell states after each step
    tanh_c: np.ndarray
    h: np.ndarray        # hidden states after each step
    h0: np.ndarray       # (B, H)
    c0: np.ndarray
    mask: Optional[np.ndarray]  # (B, H) inverted-dropout mask or None

    @property
    def steps(self) -> int:
        return self.inputs.shape[0]

    @property
    def batch(self) -> int:
        return self.inputs.shape[1]


@dataclass
class SequenceGrads:
    """Gradients for one module and its head, plus inputs and initial state."""

    w_x: np.ndarray
    w_h: np.ndarray
    b_ih: np.ndarray
    b_hh: np.ndarray
    w_y: np.ndarray
    b_y: np.ndarray
    inputs: np.ndarray  # (B, t, D)
    h0: np.ndarray      # (B, H)
    c0: np.ndarray

    def lstm_arrays(self) -> dict:
        return {"w_x": self.w_x, "w_h": self.w_h, "b_ih": self.b_ih, "b_hh": self.b_hh}

    def head_arrays(self) -> dict:
        return {"w_y": self.w_y, "b_y": self.b_y}


def _run_recurrence(params: LSTMParams, x_tm: np.ndarray, init: LSTMState):
    """x_tm is time-major (t, B, D); returns filled trace buffers
    (f, i, g, o, c, tanh_c, h)."""
    steps, batch, _ = x_tm.shape
    hsz = params.hidden_size
    # Half-scale the sigmoid-gate rows so one tanh serves every gate.
    scale = np.ones(4 * hsz)
    scale[:2 * hsz] = 0.5
    scale[3 * hsz:] = 0.5
    zx = x_tm @ (params.w_x * scale[:, None]).T \
        + (params.b_ih + params.b_hh) * scale
    w_h_t = np.ascontiguousarray((params.w_h * scale[:, None]).T)

    f_, i_, g_, o_, c_, tc_, h_ = (np.empty((steps, batch, hsz))
                                   for _ in range(7))
    z = np.empty((batch, 4 * hsz))
    h_prev = np.ascontiguousarray(init.h)
    c_prev = np.ascontiguousarray(init.c)
    for k in range(steps):
        np.dot(h_prev, w_h_t, out=z)
        z += zx[k]
        np.tanh(z, out=z)
        _gate_update(z, c_prev, f_[k], i_[k], g_[k], o_[k], c_[k])
        np.tanh(c_[k], out=tc_[k])
        np.multiply(o_[k], tc_[k], out=h_[k])
        h_prev, c_prev = h_[k], c_[k]
    return f_, i_, g_, o_, c_, tc_, h_


def cell_forward(params: LSTMParams, x: np.ndarray, prev: LSTMState):
    """One LSTM step.  x is (D,) or (B, D); prev holds matching states.

    Returns (new state, gate activations {f, i, g, o})."""
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != params.input_size:
        raise ShapeError(f"input of width {params.input_size} expected, "
                         f"got shape {x.shape}")
    h = prev.h[None, :] if prev.h.ndim == 1 else prev.h
    c = prev.c[None, :] if prev.c.ndim == 1 else prev.c
    if h.shape != (xb.shape[0], params.hidden_size):
        raise ShapeError(f"state shape {prev.h.shape} incompatible with "
                         f"batch {xb.shape[0]}, hidden {params.hidden_size}")
    f, i, g, o, cs, _, hs = _run_recurrence(
        params, np.ascontiguousarray(xb[None, :, :]), LSTMState(h, c))
    squeeze = (lambda a: a[0, 0]) if single else (lambda a: a[0])
    state = LSTMState(h=squeeze(hs), c=squeeze(cs))
    gates = {"f": squeeze(f), "i": squeeze(i), "g": squeeze(g), "o": squeeze(o)}
    return state, gates


def sequence_forward(params: LSTMParams, head: LinearHead, inputs: np.ndarray,
                     init: Optional[LSTMState] = None,
                     mask: Optional[np.ndarray] = None):
    """Unroll the cell over a batch of segments and apply the head at every
    step.  The dropout mask, when given, is shared across timesteps of a
    segment and applied to the hidden vector entering the head only.

    Returns (predictions (B, t, O), hidden states (B, t, H), trace)."""
    if inputs.ndim != 3:
        raise ShapeError(f"inputs must be (B, t, D), got {inputs.shape}")
    batch, steps, width = inputs.shape
    if steps < 1:
        raise ShapeError("need at least one timestep")
    if width != params.input_size:
        raise ShapeError(f"input width {width} != expected {params.input_size}")
    hsz = params.hidden_size
    if init is None:
        init = zero_state(batch, hsz)
    if mask is not None and mask.shape != (batch, hsz):
        raise ShapeError(f"mask must be ({batch}, {hsz}), got {mask.shape}")

    x_tm = np.ascontiguousarray(inputs.transpose(1, 0, 2))
    f, i, g, o, c, tc, h = _run_recurrence(params, x_tm, init)
    dropped = h if mask is None else h * mask[None, :, :]
    preds_tm = dropped.reshape(-1, hsz) @ head.w_y.T + head.b_y
    preds = preds_tm.reshape(steps, batch, -1).transpose(1, 0, 2)
    trace = SequenceTrace(inputs=x_tm, f=f, i=i, g=g, o=o, c=c, tanh_c=tc,
                          h=h, h0=np.ascontiguousarray(init.h),
                          c0=np.ascontiguousarray(init.c), mask=mask)
    return preds, h.transpose(1, 0, 2), trace


def sequence_backward(trace: SequenceTrace, params: LSTMParams, head: LinearHead,
                      d_preds: np.ndarray,
                      d_h_extra: Optional[np.ndarray] = None) -> SequenceGrads:
    """Exact reverse-mode pass through sequence_forward.

    d_preds is dLoss/dPredictions, shape (B, t, O).  d_h_extra, when given,
    carries extra gradient arriving directly at each hidden state (B, t, H)
    from consumers outside this module."""
    if trace is None:
        raise UsageError("backward called without a forward trace")
    steps, batch = trace.steps, trace.batch
    hsz = params.hidden_size
    if d_preds.shape != (batch, steps, head.output_size):
        raise ShapeError(f"d_preds {d_preds.shape} != "
                         f"{(batch, steps, head.output_size)}")
    if d_h_extra is not None and d_h_extra.shape != (batch, steps, hsz):
        raise ShapeError(f"d_h_extra {d_h_extra.shape} != {(batch, steps, hsz)}")

    dropped = trace.h if trace.mask is None else trace.h * trace.mask[None, :, :]
    dp_tm = np.ascontiguousarray(d_preds.transpose(1, 0, 2)).reshape(-1, head.output_size)
    d_w_y = dp_tm.T @ dropped.reshape(-1, hsz)
    d_b_y = dp_tm.sum(axis=0)
    d_h_in = (dp_tm @ head.w_y).reshape(steps, batch, hsz)
    if trace.mask is not None:
        d_h_in = d_h_in * trace.mask[None, :, :]
    if d_h_extra is not None:
        d_h_in = d_h_in + d_h_extra.transpose(1, 0, 2)

    dz = np.empty((steps, batch, 4 * hsz))
    dh_rec = np.zeros((batch, hsz))
    dc_rec = np.zeros((batch, hsz))
    _backward_loop(np.ascontiguousarray(d_h_in), trace.f, trace.i, trace.g,
                   trace.o, trace.c, trace.tanh_c, trace.c0,
                   np.ascontiguousarray(params.w_h), dz, dh_rec, dc_rec)

    h_prev = np.concatenate([trace.h0[None, :, :], trace.h[:-1]], axis=0)
    dz_flat = dz.reshape(-1, 4 * hsz)
    d_w_x = dz_flat.T @ trace.inputs.reshape(-1, params.input_size)
    d_w_h = dz_flat.T @ h_prev.reshape(-1, hsz)
    d_b = dz_flat.sum(axis=0)
    d_inputs = (dz_flat @ params.w_x).reshape(steps, batch, -1).transpose(1, 0, 2)
    return SequenceGrads(w_x=d_w_x, w_h=d_w_h, b_ih=d_b, b_hh=d_b.copy(),
                         w_y=d_w_y, b_y=d_b_y, inputs=d_inputs,
                         h0=dh_rec, c0=dc_rec)
