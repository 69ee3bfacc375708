"""Dense numeric core: matrix ops, Adam, and a finite-difference checker.

All tensors are 2-D float64 numpy arrays in row-major order ("Tensor2D").
Model code works with plain arrays; trainable state lives in a ParamStore,
whose slots pair a value with its gradient accumulator and Adam moments.
Backward passes elsewhere in the package are written by hand per layer, and
finite_diff_check is the oracle that keeps them honest.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DimensionError, TrainingError

Tensor2D = np.ndarray  # 2-D float64, row-major


def tensor(data) -> np.ndarray:
    """Coerce nested lists/arrays to a contiguous 2-D float64 array."""
    arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D tensor, got shape {arr.shape}")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Elementwise logistic function, stable on both tails."""
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid_grad(y: np.ndarray) -> np.ndarray:
    """Derivative of sigmoid expressed through its output y."""
    return y * (1.0 - y)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction; each row sums to 1."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] < 1:
        raise DimensionError(f"softmax_rows needs a 2-D input with >=1 column, got {m.shape}")
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def conv_seq(b: np.ndarray, filt: np.ndarray, bias: float) -> np.ndarray:
    """Valid 1-D convolution of a d x k sequence with a full-height d x N filter.

    Output position t is the sum of the elementwise product of the filter with
    the window b[:, t:t+N], plus the bias. Returns a vector of length k-N+1.
    """
    if b.ndim != 2 or filt.ndim != 2:
        raise DimensionError("conv_seq expects 2-D input and filter")
    d, k = b.shape
    fd, n = filt.shape
    if fd != d:
        raise DimensionError(f"filter height {fd} does not match input height {d}")
    if n > k:
        raise DimensionError(f"filter width {n} exceeds sequence length {k}")
    out = np.empty(k - n + 1, dtype=np.float64)
    for t in range(k - n + 1):
        out[t] = np.sum(b[:, t : t + n] * filt) + bias
    return out


@dataclass
class Slot:
    """One named trainable tensor with its gradient and Adam moments."""

    value: np.ndarray
    grad: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    step_count: int = 0


@dataclass
class ParamStore:
    """Insertion-ordered map of named parameter slots."""

    slots: dict[str, Slot] = field(default_factory=dict)

    def add(self, name: str, value) -> np.ndarray:
        if name in self.slots:
            raise KeyError(f"slot '{name}' already exists")
        v = tensor(value)
        self.slots[name] = Slot(v, np.zeros_like(v), np.zeros_like(v), np.zeros_like(v))
        return v

    def __contains__(self, name: str) -> bool:
        return name in self.slots

    def __getitem__(self, name: str) -> Slot:
        return self.slots[name]

    def names(self) -> list[str]:
        return list(self.slots)

    def value(self, name: str) -> np.ndarray:
        return self.slots[name].value

    def grad(self, name: str) -> np.ndarray:
        return self.slots[name].grad

    def zero_grads(self) -> None:
        for slot in self.slots.values():
            slot.grad[...] = 0.0

    def total_size(self) -> int:
        return sum(s.value.size for s in self.slots.values())


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Apply one bias-corrected Adam update to every slot, then zero grads."""
    for name, slot in store.slots.items():
        if not np.all(np.isfinite(slot.grad)):
            raise TrainingError(f"non-finite gradient in slot '{name}'")
        slot.step_count += 1
        t = slot.step_count
        g = slot.grad
        slot.adam_m *= beta1
        slot.adam_m += (1.0 - beta1) * g
        slot.adam_v *= beta2
        slot.adam_v += (1.0 - beta2) * (g * g)
        denom = np.sqrt(slot.adam_v / (1.0 - beta2**t))
        denom += eps
        slot.value -= (lr / (1.0 - beta1**t)) * slot.adam_m / denom
    store.zero_grads()


def finite_diff_check(
    fn: Callable[[], float],
    store: ParamStore,
    slot_name: str,
    eps: float = 1e-5,
) -> float:
    """Compare the analytic gradient held in a slot against central differences.

    fn must be a pure, deterministic scalar function of the store's current
    values. The analytic gradient for slot_name must already be populated in
    store[slot_name].grad. Returns the maximum over coordinates of
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    slot = store[slot_name]
    analytic = slot.grad.copy()
    value = slot.value
    flat = value.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = fn()
        flat[i] = orig - eps
        f_minus = fn()
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        worst = max(worst, err)
    return worst
