"""Dense float64 tensors.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 and rank <= 4.
This module holds the constructors and the raw (non-differentiable)
arithmetic that the autograd layer builds on. Broadcasting follows numpy's
trailing-alignment rule.
"""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

MAX_RANK = 4
DTYPE = np.float64


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if len(shape) > MAX_RANK:
        raise ValueError(f"rank {len(shape)} exceeds the supported maximum of {MAX_RANK}")
    if any(d < 0 for d in shape):
        raise ValueError(f"negative dimension in shape {shape}")
    return shape


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def as_tensor(a) -> np.ndarray:
    """Convert ``a`` to a float64 array, validating rank."""
    arr = np.asarray(a, dtype=DTYPE)
    _check_shape(arr.shape)
    return arr


def zeros(shape: Sequence[int]) -> np.ndarray:
    return _freeze(np.zeros(_check_shape(shape), dtype=DTYPE))


def full(shape: Sequence[int], value: float) -> np.ndarray:
    return _freeze(np.full(_check_shape(shape), float(value), dtype=DTYPE))


def from_values(shape: Sequence[int], values: Iterable[float]) -> np.ndarray:
    shape = _check_shape(shape)
    flat = np.asarray(list(values), dtype=DTYPE)
    size = int(np.prod(shape, dtype=np.int64))
    if flat.size != size:
        raise ValueError(f"length mismatch: {flat.size} values for shape {shape} ({size} elements)")
    return _freeze(flat.reshape(shape))


def random(shape: Sequence[int], dist: str = "normal", seed: int = 0,
           a: float = 0.0, b: float = 1.0) -> np.ndarray:
    """Seeded random tensor.

    ``dist="uniform"`` draws from U(a, b); ``dist="normal"`` from N(a, b**2).
    """
    shape = _check_shape(shape)
    rng = np.random.default_rng(seed)
    if dist == "uniform":
        out = rng.uniform(a, b, size=shape)
    elif dist == "normal":
        if b < 0:
            raise ValueError("normal sigma must be non-negative")
        out = rng.normal(a, b, size=shape)
    else:
        raise ValueError(f"unknown distribution {dist!r}")
    return _freeze(out.astype(DTYPE))


def broadcast_shape(*shapes: Sequence[int]) -> tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(*shapes))
    except ValueError as exc:
        raise ValueError(f"incompatible shapes {shapes}") from exc


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Branching keeps exp() from overflowing for large |x|.
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def divide(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise a / b; a zero anywhere in ``b`` is an error."""
    b = np.asarray(b, dtype=DTYPE)
    if np.any(b == 0):
        raise ZeroDivisionError("division by a tensor containing 0")
    return np.asarray(a, dtype=DTYPE) / b


_UNARY = {
    "neg": np.negative,
    "relu": relu,
    "sigmoid": sigmoid,
    "exp": np.exp,
    "log": np.log,
}
_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": divide,
}


def elementwise(op: str, a, b=None, k: float | None = None) -> np.ndarray:
    """Apply a named elementwise op.

    Binary ops (add, sub, mul, div) take ``b``; ``scale`` and ``add_scalar``
    take the scalar ``k``; the rest are unary.
    """
    a = as_tensor(a)
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} needs a second operand")
        b = as_tensor(b)
        broadcast_shape(a.shape, b.shape)
        return _BINARY[op](a, b)
    if op == "scale":
        return a * float(k)
    if op == "add_scalar":
        return a + float(k)
    if op in _UNARY:
        return _UNARY[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


def matmul(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects two rank-2 tensors")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(op: str, a, axes=None, keepdims: bool = False) -> np.ndarray:
    a = as_tensor(a)
    axes = normalize_axes(axes, a.ndim)
    if op == "sum":
        return np.sum(a, axis=axes, keepdims=keepdims)
    if op == "mean":
        m = np.mean(a, axis=axes, keepdims=keepdims)
        # sum/n can round for constant slices; return their value exactly
        hi = np.max(a, axis=axes, keepdims=keepdims)
        lo = np.min(a, axis=axes, keepdims=keepdims)
        return np.where(hi == lo, hi, m)
    if op == "max":
        return np.max(a, axis=axes, keepdims=keepdims)
    raise ValueError(f"unknown reduction {op!r}")


def concat(tensors: Sequence, axis: int) -> np.ndarray:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty list")
    ndim = tensors[0].ndim
    axis = normalize_axes(axis, ndim)[0]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != ref[i] for i in range(ndim) if i != axis):
            raise ValueError(f"shape mismatch off axis {axis}: {ref} vs {t.shape}")
    return np.concatenate(tensors, axis=axis)
