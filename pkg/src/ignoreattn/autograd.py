"""Tape-based reverse-mode automatic differentiation.

Every differentiable operation appends a node to a :class:`Tape`. A tape is
created lazily by the first recorded op whose inputs are all leaves, and
inherited by everything computed downstream. Backward walks the tape in
reverse insertion order, which is a valid reverse topological order because
parents are always recorded before their children.

Leaf variables (parameters, inputs) are never on a tape; they only receive
gradients. Intermediate variables keep their gradient only when
:meth:`Variable.retain_grad` was called before backward.
"""
from __future__ import annotations

import itertools
import threading
import weakref
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .tensor import as_tensor

BackwardRule = Callable[..., Sequence[np.ndarray | None]]

_RULES: dict[str, BackwardRule] = {}
_ids = itertools.count()
_state = threading.local()


def register(kind: str):
    """Decorator registering the backward rule for primitive ``kind``.

    A rule is called as ``rule(grad_out, *input_values, **saved)`` and
    returns one gradient (or ``None``) per input.
    """
    def deco(fn: BackwardRule) -> BackwardRule:
        _RULES[kind] = fn
        return fn
    return deco


def registered_primitives() -> list[str]:
    return sorted(_RULES)


def backward_rule(kind: str) -> BackwardRule:
    return _RULES[kind]


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    # The output is held weakly so a dropped graph is freed by refcounting.
    __slots__ = ("node_id", "kind", "parents", "saved", "_output", "__weakref__")

    def __init__(self, node_id, kind, parents, saved, output):
        self.node_id = node_id
        self.kind = kind
        self.parents = parents
        self.saved = saved
        self._output = weakref.ref(output)

    @property
    def output(self):
        return self._output()


class Tape:
    """Append-only record of primitive applications.

    Nodes are referenced weakly: each node is owned by its output variable,
    and a node stays alive while something downstream still refers to it.
    A strong list here would close a cycle (variable -> tape -> node ->
    parent variable) and keep every finished graph in memory until the
    cyclic collector happened to run.
    """

    def __init__(self):
        self._refs: list[weakref.ref] = []

    def __len__(self):
        return len(self.nodes)

    @property
    def nodes(self) -> list[Node]:
        return [n for n in (r() for r in self._refs) if n is not None]

    def append(self, node: Node) -> None:
        if len(self._refs) >= 1024 and len(self._refs) & (len(self._refs) - 1) == 0:
            self._refs = [r for r in self._refs if r() is not None]
        self._refs.append(weakref.ref(node))

    def absorb(self, other: "Tape") -> None:
        # Two independent graphs meeting: appending keeps topological order
        # because no edge runs from self into other.
        for node in other.nodes:
            out = node.output
            if out is not None:
                out.tape = self
            self.append(node)
        other._refs = []


class Variable:
    """A tensor value that participates in differentiation."""

    __array_priority__ = 100  # numpy defers binary ops to our reflected operators

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = as_tensor(value)
        self.requires_grad = requires_grad
        self.name = name
        self.node_id = next(_ids)
        self.tape: Tape | None = None
        self.node: Node | None = None
        self._grad: np.ndarray | None = None
        self._retain = False

    # -- gradient access -------------------------------------------------
    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g):
        self._grad = None if g is None else as_tensor(g)

    @property
    def has_grad(self) -> bool:
        return self._grad is not None

    def zero_grad(self) -> None:
        self._grad = None

    def retain_grad(self) -> "Variable":
        self._retain = True
        return self

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def backward(self, seed=None) -> None:
        backward(self, seed)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Variable(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- operator sugar (resolved lazily to avoid an import cycle) --------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_variable(x) -> Variable:
    return x if isinstance(x, Variable) else Variable(x)


def record(kind: str, inputs: Sequence[Variable], output_value, **saved) -> Variable:
    """Wrap ``output_value`` in a Variable and, if needed, append it to a tape."""
    if kind not in _RULES:
        raise KeyError(f"no backward rule registered for primitive {kind!r}")
    out = Variable(output_value)
    if not grad_enabled() or not any(v.requires_grad for v in inputs):
        return out
    tape = None
    for v in inputs:
        if v.tape is None:
            continue
        if tape is None:
            tape = v.tape
        elif v.tape is not tape:
            tape.absorb(v.tape)
    if tape is None:
        tape = Tape()
    out.requires_grad = True
    out.tape = tape
    out.node = Node(out.node_id, kind, tuple(inputs), saved, out)
    tape.append(out.node)
    return out


def backward(root: Variable, seed=None) -> None:
    """Accumulate d(root)/d(v) into ``v.grad`` for every reachable variable."""
    if seed is None:
        if root.value.size != 1:
            raise ValueError("backward from a non-scalar root needs an explicit seed")
        seed = np.ones_like(root.value)
    else:
        seed = as_tensor(seed)
        if seed.shape != root.shape:
            raise ValueError(f"seed shape {seed.shape} does not match root shape {root.shape}")

    if root.node is None:
        if root.requires_grad:
            _accumulate(root, seed)
            return
        raise ValueError("root is not on a tape")
    nodes = root.tape.nodes
    try:
        start = nodes.index(root.node)
    except ValueError:
        raise ValueError("root is not on its tape") from None

    pending: dict[int, np.ndarray] = {root.node_id: seed}
    for node in reversed(nodes[: start + 1]):
        g = pending.pop(node.node_id, None)
        if g is None:
            continue
        out = node.output
        if out is not None and out._retain:
            _accumulate(out, g)
        rule = _RULES[node.kind]
        grads = rule(g, *[p.value for p in node.parents], **node.saved)
        for parent, pg in zip(node.parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node is None:
                _accumulate(parent, pg)
            elif parent.node_id in pending:
                pending[parent.node_id] = pending[parent.node_id] + pg
            else:
                pending[parent.node_id] = pg


def _accumulate(v: Variable, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64)
    if g.shape != v.shape:
        raise ValueError(f"gradient shape {g.shape} does not match variable shape {v.shape}")
    v._grad = g.copy() if v._grad is None else v._grad + g


def numeric_grad(f: Callable[[np.ndarray], Variable | float], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(as_tensor(x), dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)

    def call(arr):
        out = f(arr)
        val = out.value if isinstance(out, Variable) else np.asarray(out, dtype=np.float64)
        if val.size != 1:
            raise ValueError("numeric_grad needs a scalar-valued function")
        val = float(val.reshape(()))
        if not np.isfinite(val):
            raise ArithmeticError("function returned a non-finite value")
        return val

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = call(x.copy())
        flat[i] = orig - eps
        fm = call(x.copy())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad
