"""Dense float64 numeric core.

Tensors are plain 2-D numpy float64 arrays ("row-major reals with shape
metadata"). On top of them this module provides stable nonlinearities, named
parameter stores with gradient accumulators, an adaptive-moment (Adam)
optimizer, counter-based seeded random streams, a finite-difference gradient
checker, and an order-preserving parallel map whose results do not depend on
the worker count.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterator, Sequence

import numpy as np

Tensor = np.ndarray


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(RuntimeError):
    """A value that must stay finite became NaN or infinite."""


def as_tensor(values) -> Tensor:
    return np.asarray(values, dtype=np.float64)


def check_finite(name: str, *arrays: Tensor) -> None:
    """Raise NumericError naming `name` if any array holds NaN/Inf."""
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite values in '{name}'")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors with shape and finiteness checks."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a @ b
    check_finite("matmul result", out)
    return out


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic function, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def softmax_rows(logits: Tensor) -> Tensor:
    """Row-wise softmax via max subtraction; safe for entries up to +-1e3."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D tensor, got {logits.shape}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_rows(logits: Tensor) -> Tensor:
    logits = as_tensor(logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# Parameter stores
# ---------------------------------------------------------------------------


class Param:
    __slots__ = ("value", "grad")

    def __init__(self, value: Tensor):
        self.value = as_tensor(value)
        self.grad = np.zeros_like(self.value)


class ParamStore:
    """Ordered map of name -> (value, gradient accumulator).

    Values and their gradients always share a shape; names are unique.
    Mutation is single-writer by convention.
    """

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, value: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name '{name}'")
        p = Param(value)
        self._params[name] = p
        return p.value

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Param]]:
        return iter(self._params.items())

    def value(self, name: str) -> Tensor:
        return self._params[name].value

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0

    def copy(self) -> "ParamStore":
        """Deep copy of values (gradients start from zero)."""
        out = ParamStore()
        for name, p in self._params.items():
            out.add(name, p.value.copy())
        return out

    def copy_values_from(self, other: "ParamStore") -> None:
        if self.names() != other.names():
            raise ShapeError("parameter stores hold different names")
        for name, p in self._params.items():
            p.value[...] = other[name].value

    def n_coords(self) -> int:
        return sum(p.value.size for p in self._params.values())


def global_grad_norm(params: ParamStore) -> float:
    total = 0.0
    for _, p in params.items():
        total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def clip_gradients(params: ParamStore, max_norm: float) -> float:
    """Scale all gradients so the global norm is at most max_norm.

    Returns the pre-clip norm.
    """
    norm = global_grad_norm(params)
    if max_norm is not None and norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for _, p in params.items():
            p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# Adaptive-moment optimizer
# ---------------------------------------------------------------------------


class AdamState:
    """First/second moment accumulators plus step counter for a ParamStore."""

    def __init__(self, params: ParamStore, lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {name: np.zeros_like(p.value) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.value) for name, p in params.items()}

    def state_tensors(self) -> dict[str, Tensor]:
        """Flatten moments and step counter into named 2-D tensors."""
        out: dict[str, Tensor] = {}
        for name, arr in self.m.items():
            out[f"m.{name}"] = arr
        for name, arr in self.v.items():
            out[f"v.{name}"] = arr
        out["t"] = np.array([[float(self.t)]])
        return out

    def load_state_tensors(self, blocks: dict[str, Tensor]) -> None:
        for name in self.m:
            self.m[name][...] = blocks[f"m.{name}"]
            self.v[name][...] = blocks[f"v.{name}"]
        self.t = int(round(float(blocks["t"][0, 0])))


def adam_step(params: ParamStore, state: AdamState) -> None:
    """One bias-corrected adaptive-moment update; gradients are zeroed after.

    A NaN/Inf gradient raises NumericError naming the offending parameter so
    poisoned state never reaches the weights.
    """
    for name, p in params.items():
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient for parameter '{name}'")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * p.grad
        v *= b2
        v += (1.0 - b2) * (p.grad * p.grad)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.value -= state.lr * update
        if not np.all(np.isfinite(p.value)):
            raise NumericError(f"non-finite value for parameter '{name}' after update")
    params.zero_grads()


# ---------------------------------------------------------------------------
# Seeded random streams
# ---------------------------------------------------------------------------


def _derive_key(seed: int, path: tuple) -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update(int(seed).to_bytes(8, "little", signed=True))
    for part in path:
        if isinstance(part, str):
            raw = part.encode("utf-8")
            h.update(b"s" + len(raw).to_bytes(4, "little") + raw)
        elif isinstance(part, (int, np.integer)):
            h.update(b"i" + int(part).to_bytes(8, "little", signed=True))
        else:
            raise TypeError(f"rng path parts must be str or int, got {type(part).__name__}")
    return int.from_bytes(h.digest(), "little")


class RngStream:
    """Counter-based random stream keyed by (seed, path).

    Identical (seed, path) pairs replay identical draw sequences; distinct
    paths give independent streams, so batch items can each own a stream and
    the execution schedule never changes results.
    """

    def __init__(self, seed: int, *path):
        self.seed = int(seed)
        self.path: tuple = tuple(path)
        self._gen = np.random.Generator(np.random.Philox(key=_derive_key(self.seed, self.path)))

    def child(self, *path) -> "RngStream":
        return RngStream(self.seed, *self.path, *path)

    def uniform(self, size=None) -> Tensor:
        return self._gen.random(size)

    def normal(self, size=None, scale: float = 1.0) -> Tensor:
        return self._gen.standard_normal(size) * scale

    def uniform_range(self, low: float, high: float, size=None) -> Tensor:
        return low + (high - low) * self._gen.random(size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


def finite_diff_check(loss_fn: Callable[[ParamStore], float], params: ParamStore,
                      eps: float = 1e-5, max_coords: int | None = None,
                      rng: RngStream | None = None) -> float:
    """Compare stored analytic gradients against central differences.

    The caller runs its backward pass first so `params` holds analytic
    gradients; `loss_fn` must evaluate the same loss without touching them.
    Returns the max over checked coordinates of
    |analytic - central| / max(|analytic|, |central|, floor).

    The floor absorbs central-difference roundoff: for losses of order
    1..100 in float64 the difference quotient carries ~|loss|*1e-16/eps of
    absolute noise, so coordinates whose true gradient sits below ~1e-5
    cannot be compared relatively and are measured against the floor
    instead. Genuinely wrong gradients at any meaningful scale still
    register as order-one relative errors.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    floor = 1e-5
    analytic = {name: p.grad.copy() for name, p in params.items()}
    worst = 0.0
    for name, p in params.items():
        flat = p.value.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            if rng is None:
                raise ValueError("sampling coordinates requires an rng")
            coords = rng.child("fdc", name).choice(n, size=max_coords, replace=False)
        else:
            coords = range(n)
        a_flat = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(loss_fn(params))
            flat[i] = orig - eps
            lo = float(loss_fn(params))
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError(f"loss not finite while perturbing '{name}'")
            numeric = (hi - lo) / (2.0 * eps)
            denom = max(abs(a_flat[i]), abs(numeric), floor)
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
    # restore analytic gradients in case loss_fn disturbed them
    for name, p in params.items():
        p.grad[...] = analytic[name]
    return worst


# ---------------------------------------------------------------------------
# Deterministic parallel map
# ---------------------------------------------------------------------------


def pmap(fn: Callable, items: Sequence, threads: int = 1) -> list:
    """Order-preserving map over independent items.

    The work decomposition is fixed by the item list, never by the worker
    count, so outputs are identical for any `threads` value.
    """
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def chunk_slices(n: int, chunk: int) -> list[slice]:
    """Fixed-size slicing of range(n), independent of worker count."""
    return [slice(i, min(i + chunk, n)) for i in range(0, n, chunk)]
