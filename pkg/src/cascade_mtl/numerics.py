"""Dense float64 math, seeded randomness, the Adam update, and the
finite-difference gradient oracle that the hand-derived backward passes
are checked against."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

from .errors import ConfigError, OracleError, ShapeError, TrainingError

# All tensors in this package are C-contiguous float64 ndarrays.
Mat = np.ndarray


def matmul(a: Mat, b: Mat) -> Mat:
    """Matrix product with explicit shape checking."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def sigmoid(x):
    """Logistic function; expit saturates instead of overflowing."""
    return expit(x)


def tanh(x):
    return np.tanh(x)


@dataclass
class Rng:
    """Deterministic PCG64 stream: the same seed yields bit-identical values
    on every platform.  Child streams are derived, never shared."""

    seed: int

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError(f"seed must fit in u64, got {self.seed}")
        self.seed = int(self.seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def child(self, *keys: int) -> "Rng":
        """Independent stream addressed by a key path under this seed."""
        ss = np.random.SeedSequence([self.seed, *[int(k) for k in keys]])
        return Rng(int(ss.generate_state(1, dtype=np.uint64)[0]))


def dropout_mask(rng: Rng, n: int, rate: float) -> np.ndarray:
    """Inverted-dropout mask of length n: entries are 0 with probability
    `rate`, else 1/(1-rate), so inference needs no rescaling."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(n)
    keep = rng.uniform(0.0, 1.0, n) >= rate
    return keep.astype(np.float64) / (1.0 - rate)


@dataclass
class AdamState:
    """First/second moment buffers for one parameter array."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: np.ndarray, lr: float = 1e-3, beta1: float = 0.9,
                  beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param),
                   lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState,
              context: str = "") -> np.ndarray:
    """Bias-corrected Adam update, applied to `param` in place."""
    if param.shape != grad.shape:
        raise ShapeError(f"param {param.shape} vs grad {grad.shape}{context}")
    if not np.all(np.isfinite(grad)):
        raise TrainingError(f"non-finite gradient at step {state.step + 1}{context}")
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    param -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return param


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                     h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at
    a time.  Slow and deliberately independent of every backward pass."""
    if h <= 0:
        raise ConfigError(f"step size must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp.flat[i] += h
        xm = x.copy()
        xm.flat[i] -= h
        fp = float(f(xp))
        fm = float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite evaluation at coordinate {i}")
        grad.flat[i] = (fp - fm) / (2.0 * h)
    return grad


def global_norm(arrays) -> float:
    return float(np.sqrt(sum(float(np.sum(a * a)) for a in arrays)))


def clip_by_global_norm(arrays, max_norm: float) -> float:
    """Scale `arrays` in place so their joint L2 norm is at most max_norm.
    Returns the pre-clip norm."""
    norm = global_norm(arrays)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for a in arrays:
            a *= scale
    return norm
