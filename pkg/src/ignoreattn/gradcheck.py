"""Backward-versus-finite-difference checks for every primitive and block.

Each case draws random inputs, reduces the output to a scalar through a fixed
random projection, and compares the tape gradient of every input and
parameter against central differences.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .attention import AttentionMode, CBAMBlock, SEBlock
from .autograd import Variable, numeric_grad
from .models import ModelConfig, ResidualUnit
from .nn import BatchNorm2d, Conv2d, Linear, Parameter, channel_pool, global_pool

EPS = 1e-5
TOLERANCE = 1e-4
TRIALS = 5
REL_FLOOR = 1e-8
PEAK_FRACTION = 1e-3


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-3 * peak, 1e-8).

    ``peak`` is the largest gradient magnitude in the tensor; entries far
    below it are judged on the tensor's scale, where finite differences
    are only accurate to about eps**2.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    peak = max(np.abs(a).max(), np.abs(n).max())
    floor = max(PEAK_FRACTION * peak, REL_FLOOR)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check(fn: Callable[..., Variable], inputs: list[Variable], rng: np.random.Generator,
          eps: float = EPS) -> float:
    """Max relative error over all ``inputs`` of d(sum(fn(*inputs) * R))."""
    out = fn()
    proj = rng.normal(size=out.shape)

    def scalar():
        return ops.sum(ops.mul(fn(), proj))

    for v in inputs:
        v.zero_grad()
    scalar().backward()
    worst = 0.0
    for v in inputs:
        analytic = v.grad.copy()
        orig = v.value

        def f(arr, v=v):
            v.value = arr
            return scalar()

        numeric = numeric_grad(f, orig, eps)
        v.value = orig
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _var(arr) -> Variable:
    return Variable(arr, requires_grad=True)


def _away_from_zero(rng, shape, gap=0.1):
    x = rng.normal(size=shape)
    return np.sign(x) * (np.abs(x) + gap)


def _nchw(rng, cmin=1, cmax=4, hmin=3, hmax=6):
    return (int(rng.integers(1, 4)), int(rng.integers(cmin, cmax + 1)),
            int(rng.integers(hmin, hmax + 1)), int(rng.integers(hmin, hmax + 1)))


# Each case takes an rng and returns (fn, inputs).

def _binary(op, positive_b=False):
    def case(rng):
        shape = _nchw(rng)
        # b broadcasts over a random subset of axes
        bshape = tuple(d if rng.random() < 0.5 else 1 for d in shape)
        a = _var(rng.normal(size=shape))
        b = rng.uniform(0.5, 2.0, size=bshape) * rng.choice([-1, 1], size=bshape) if positive_b else rng.normal(size=bshape)
        b = _var(b)
        return (lambda: op(a, b)), [a, b]
    return case


def _unary(op, sampler=lambda rng, s: rng.normal(size=s)):
    def case(rng):
        a = _var(sampler(rng, _nchw(rng)))
        return (lambda: op(a)), [a]
    return case


def _matmul(rng):
    m, k, n = rng.integers(1, 6, size=3)
    a, b = _var(rng.normal(size=(m, k))), _var(rng.normal(size=(k, n)))
    return (lambda: ops.matmul(a, b)), [a, b]


def _transpose(rng):
    a = _var(rng.normal(size=tuple(rng.integers(1, 6, size=2))))
    return (lambda: ops.transpose(a)), [a]


def _reshape(rng):
    shape = _nchw(rng)
    a = _var(rng.normal(size=shape))
    return (lambda: ops.reshape(a, (shape[0], -1))), [a]


def _reduction(op):
    def case(rng):
        shape = _nchw(rng)
        axes = tuple(i for i in range(4) if rng.random() < 0.5) or (int(rng.integers(0, 4)),)
        keep = bool(rng.random() < 0.5)
        a = _var(rng.normal(size=shape))
        return (lambda: op(a, axes=axes, keepdims=keep)), [a]
    return case


def _concat(rng):
    shape = _nchw(rng)
    axis = int(rng.integers(0, 4))
    other = list(shape)
    other[axis] = int(rng.integers(1, 4))
    a, b = _var(rng.normal(size=shape)), _var(rng.normal(size=other))
    return (lambda: ops.concat([a, b], axis)), [a, b]


def _slice(rng):
    shape = _nchw(rng, cmin=2)
    a = _var(rng.normal(size=shape))
    return (lambda: ops.slice_axis(a, 1, 1, shape[1])), [a]


def _conv2d(rng):
    n, c, h, w = _nchw(rng, hmin=4, hmax=7)
    o = int(rng.integers(1, 4))
    k = int(rng.choice([1, 3]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x = _var(rng.normal(size=(n, c, h, w)))
    wt = _var(rng.normal(size=(o, c, k, k)))
    b = _var(rng.normal(size=o))
    return (lambda: ops.conv2d(x, wt, b, (stride, stride), (pad, pad))), [x, wt, b]


def _batch_norm(rng):
    n, c, h, w = _nchw(rng)
    n = max(n, 2)
    x = _var(rng.normal(size=(n, c, h, w)) * 2 + 1)
    gamma, beta = _var(rng.normal(size=c)), _var(rng.normal(size=c))
    return (lambda: ops.batch_norm_train(x, gamma, beta, 1e-5)[0]), [x, gamma, beta]


def _cross_entropy(rng):
    n, k = int(rng.integers(1, 6)), int(rng.integers(2, 7))
    logits = _var(rng.normal(size=(n, k)) * 3)
    labels = rng.integers(0, k, size=n)
    return (lambda: ops.softmax_cross_entropy(logits, labels)), [logits]


def _linear_layer(rng):
    n, i, o = rng.integers(1, 6, size=3)
    layer = Linear(int(i), int(o), "lin", int(rng.integers(1 << 30)))
    x = _var(rng.normal(size=(n, i)))
    return (lambda: layer(x)), [x] + layer.parameters()


def _conv_layer(rng):
    n, c, h, w = _nchw(rng, hmin=5, hmax=8)
    layer = Conv2d(c, int(rng.integers(1, 4)), 3, "conv", int(rng.integers(1 << 30)),
                   stride=int(rng.integers(1, 3)), padding=1, bias=True)
    x = _var(rng.normal(size=(n, c, h, w)))
    return (lambda: layer(x)), [x] + layer.parameters()


def _bn_layer(rng):
    n, c, h, w = _nchw(rng)
    layer = BatchNorm2d(c, "bn")
    layer.gamma.value = rng.normal(size=c)
    x = _var(rng.normal(size=(max(n, 2), c, h, w)))
    return (lambda: layer(x, "train")), [x] + layer.parameters()


def _pool(fn, kind):
    def case(rng):
        x = _var(rng.normal(size=_nchw(rng)))
        return (lambda: fn(kind, x)), [x]
    return case


def _block_case(kind: str, part: str = "apply"):
    mode = AttentionMode.parse(kind)

    def case(rng):
        n, c, h, w = _nchw(rng, cmin=4, cmax=8, hmin=4, hmax=7)
        cls = SEBlock if mode.family == "se" else CBAMBlock
        block = cls(c, 16, mode.inversion, kind, int(rng.integers(1 << 30)))
        x = _var(rng.normal(size=(n, c, h, w)))
        if part == "channel":
            fn = lambda: block.channel_mask(x)  # noqa: E731
        elif part == "spatial":
            fn = lambda: block.spatial_mask(x)  # noqa: E731
        elif part == "mask":
            fn = lambda: block.mask(x)  # noqa: E731
        else:
            fn = lambda: block(x)  # noqa: E731
        return fn, [x] + block.parameters()
    return case


def _unit_case(kind: str):
    def case(rng):
        n, c, h, w = _nchw(rng, cmin=4, cmax=8, hmin=4, hmax=6)
        cfg = ModelConfig(attention=AttentionMode.parse(kind), num_classes=2)
        unit = ResidualUnit(c, 8, int(rng.integers(1, 3)), cfg, "unit", int(rng.integers(1 << 30)))
        x = _var(rng.normal(size=(max(n, 2), c, h, w)))
        return (lambda: unit(x, "train")), [x] + unit.parameters()
    return case


PRIMITIVES: dict[str, Callable] = {
    "add": _binary(ops.add),
    "sub": _binary(ops.sub),
    "mul": _binary(ops.mul),
    "div": _binary(ops.div, positive_b=True),
    "neg": _unary(ops.neg),
    "scale": _unary(lambda a: ops.scale(a, -1.7)),
    "add_scalar": _unary(lambda a: ops.add_scalar(a, 0.3)),
    "relu": _unary(ops.relu, _away_from_zero),
    "sigmoid": _unary(ops.sigmoid),
    "exp": _unary(ops.exp),
    "log": _unary(ops.log, lambda rng, s: rng.uniform(0.2, 3.0, size=s)),
    "sigmoid_reciprocal": _unary(ops.sigmoid_reciprocal, lambda rng, s: rng.uniform(0.05, 1.0, size=s)),
    "matmul": _matmul,
    "transpose": _transpose,
    "reshape": _reshape,
    "sum": _reduction(ops.sum),
    "mean": _reduction(ops.mean),
    "max": _reduction(ops.max),
    "concat": _concat,
    "slice_axis": _slice,
    "conv2d": _conv2d,
    "batch_norm": _batch_norm,
    "softmax_cross_entropy": _cross_entropy,
}

BLOCKS: dict[str, Callable] = {
    "linear": _linear_layer,
    "conv2d-layer": _conv_layer,
    "batchnorm-layer": _bn_layer,
    "global-avg-pool": _pool(global_pool, "avg"),
    "global-max-pool": _pool(global_pool, "max"),
    "channel-avg-pool": _pool(channel_pool, "avg"),
    "channel-max-pool": _pool(channel_pool, "max"),
    "se": _block_case("se"),
    "se-ign1": _block_case("se-ign1:alpha=0.8"),
    "se-ign2": _block_case("se-ign2"),
    "se-ign3": _block_case("se-ign3"),
    "cbam-channel": _block_case("cbam", "channel"),
    "cbam-spatial": _block_case("cbam", "spatial"),
    "cbam": _block_case("cbam"),
    "cbam-ign1": _block_case("cbam-ign1:alpha=0.8"),
    "cbam-ign2": _block_case("cbam-ign2"),
    "cbam-ign3": _block_case("cbam-ign3"),
    "cbam-ign1-channel": _block_case("cbam-ign1", "channel"),
    "cbam-ign2-spatial": _block_case("cbam-ign2", "spatial"),
    "cbam-ign3-spatial": _block_case("cbam-ign3", "spatial"),
    "unit-none": _unit_case("none"),
    "unit-se-ign3": _unit_case("se-ign3"),
    "unit-cbam-ign1": _unit_case("cbam-ign1"),
}

ALL_CASES = {**PRIMITIVES, **BLOCKS}


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_error: float
    trials: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def run_case(name: str, trials: int = TRIALS, seed: int = 0) -> CheckResult:
    case = ALL_CASES[name]
    worst = 0.0
    for t in range(trials):
        rng = np.random.default_rng([seed, t, sum(name.encode())])
        fn, inputs = case(rng)
        worst = max(worst, check(fn, inputs, rng))
    return CheckResult(name, worst, trials)


def select(scope: str = "all") -> list[str]:
    if scope == "all":
        return list(ALL_CASES)
    if scope == "primitives":
        return list(PRIMITIVES)
    if scope == "blocks":
        return list(BLOCKS)
    names = [s.strip() for s in scope.split(",") if s.strip()]
    unknown = [n for n in names if n not in ALL_CASES]
    if unknown:
        raise KeyError(f"unknown gradcheck scope {unknown}; choose from all, primitives, blocks, "
                       + ", ".join(ALL_CASES))
    return names


def run_suite(scope: str = "all", trials: int = TRIALS, seed: int = 0) -> list[CheckResult]:
    return [run_case(name, trials, seed) for name in select(scope)]
