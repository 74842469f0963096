"""Differentiable primitives.

Each function computes its forward value with :mod:`ignoreattn.tensor` /
numpy and records itself on the tape; the matching ``@register`` function is
its backward rule.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .autograd import Variable, as_variable, record, register


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` over the axes that broadcasting stretched to reach its shape."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- binary ops

def add(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    return record("add", (a, b), T.elementwise("add", a.value, b.value))


@register("add")
def _add_bw(g, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    return record("sub", (a, b), T.elementwise("sub", a.value, b.value))


@register("sub")
def _sub_bw(g, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def mul(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    return record("mul", (a, b), T.elementwise("mul", a.value, b.value))


@register("mul")
def _mul_bw(g, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def div(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    return record("div", (a, b), T.elementwise("div", a.value, b.value))


@register("div")
def _div_bw(g, a, b):
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


# ----------------------------------------------------------------- unary ops

def neg(a) -> Variable:
    a = as_variable(a)
    return record("neg", (a,), -a.value)


@register("neg")
def _neg_bw(g, a):
    return (-g,)


def scale(a, k: float) -> Variable:
    a = as_variable(a)
    return record("scale", (a,), T.elementwise("scale", a.value, k=k), k=float(k))


@register("scale")
def _scale_bw(g, a, k):
    return (g * k,)


def add_scalar(a, k: float) -> Variable:
    a = as_variable(a)
    return record("add_scalar", (a,), T.elementwise("add_scalar", a.value, k=k))


@register("add_scalar")
def _add_scalar_bw(g, a):
    return (g,)


def relu(a) -> Variable:
    a = as_variable(a)
    return record("relu", (a,), T.relu(a.value))


@register("relu")
def _relu_bw(g, a):
    return (g * (a > 0),)


def sigmoid(a) -> Variable:
    a = as_variable(a)
    out = T.sigmoid(a.value)
    return record("sigmoid", (a,), out, out=out)


@register("sigmoid")
def _sigmoid_bw(g, a, out):
    return (g * out * (1.0 - out),)


def exp(a) -> Variable:
    a = as_variable(a)
    out = np.exp(a.value)
    return record("exp", (a,), out, out=out)


@register("exp")
def _exp_bw(g, a, out):
    return (g * out,)


def log(a) -> Variable:
    a = as_variable(a)
    if np.any(a.value <= 0):
        raise ValueError("log of a non-positive value")
    return record("log", (a,), np.log(a.value))


@register("log")
def _log_bw(g, a):
    return (g / a,)


RECIP_FLOOR = 1e-12


def sigmoid_reciprocal(m) -> Variable:
    """sigmoid(1/m) on masks in [0, 1], continuous at m = 0 (value 1)."""
    m = as_variable(m)
    mc = np.maximum(m.value, RECIP_FLOOR)
    out = T.sigmoid(1.0 / mc)
    return record("sigmoid_reciprocal", (m,), out, out=out)


@register("sigmoid_reciprocal")
def _sigmoid_reciprocal_bw(g, m, out):
    clamped = m < RECIP_FLOOR
    mc = np.maximum(m, RECIP_FLOOR)
    d = -out * (1.0 - out) / (mc * mc)
    d = np.where(clamped, 0.0, d)
    return (g * d,)


# ------------------------------------------------------------ linear algebra

def matmul(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    return record("matmul", (a, b), T.matmul(a.value, b.value))


@register("matmul")
def _matmul_bw(g, a, b):
    return g @ b.T, a.T @ g


def transpose(a) -> Variable:
    a = as_variable(a)
    if a.ndim != 2:
        raise ValueError("transpose expects a rank-2 tensor")
    return record("transpose", (a,), a.value.T)


@register("transpose")
def _transpose_bw(g, a):
    return (g.T,)


def reshape(a, shape) -> Variable:
    a = as_variable(a)
    shape = tuple(shape)
    out = a.value.reshape(shape)
    T.as_tensor(out)
    return record("reshape", (a,), out)


@register("reshape")
def _reshape_bw(g, a):
    return (g.reshape(a.shape),)


# ---------------------------------------------------------------- reductions

def sum(a, axes=None, keepdims: bool = False) -> Variable:  # noqa: A001
    a = as_variable(a)
    axes = T.normalize_axes(axes, a.ndim)
    out = T.reduce("sum", a.value, axes, keepdims)
    return record("sum", (a,), out, axes=axes, keepdims=keepdims)


@register("sum")
def _sum_bw(g, a, axes, keepdims):
    if not keepdims:
        g = np.expand_dims(g, axes)
    return (np.broadcast_to(g, a.shape),)


def mean(a, axes=None, keepdims: bool = False) -> Variable:
    a = as_variable(a)
    axes = T.normalize_axes(axes, a.ndim)
    out = T.reduce("mean", a.value, axes, keepdims)
    return record("mean", (a,), out, axes=axes, keepdims=keepdims)


@register("mean")
def _mean_bw(g, a, axes, keepdims):
    count = int(np.prod([a.shape[i] for i in axes], dtype=np.int64))
    if not keepdims:
        g = np.expand_dims(g, axes)
    return (np.broadcast_to(g / count, a.shape),)


def _first_argmax_mask(a: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
    """Boolean mask marking, per reduced slice, the first maximum in row-major order."""
    keep = [i for i in range(a.ndim) if i not in axes]
    moved = np.transpose(a, keep + list(axes))
    lead = moved.shape[: len(keep)]
    flat = moved.reshape(lead + (-1,))
    idx = np.argmax(flat, axis=-1)
    onehot = np.zeros_like(flat, dtype=bool)
    np.put_along_axis(onehot, idx[..., None], True, axis=-1)
    onehot = onehot.reshape(moved.shape)
    inverse = np.argsort(keep + list(axes))
    return np.transpose(onehot, inverse)


def max(a, axes=None, keepdims: bool = False) -> Variable:  # noqa: A001
    a = as_variable(a)
    axes = T.normalize_axes(axes, a.ndim)
    out = T.reduce("max", a.value, axes, keepdims)
    return record("max", (a,), out, axes=axes, keepdims=keepdims)


@register("max")
def _max_bw(g, a, axes, keepdims):
    if not keepdims:
        g = np.expand_dims(g, axes)
    return (np.where(_first_argmax_mask(a, axes), g, 0.0),)


# ------------------------------------------------------------ concat / slice

def concat(tensors, axis: int) -> Variable:
    tensors = [as_variable(t) for t in tensors]
    out = T.concat([t.value for t in tensors], axis)
    axis = T.normalize_axes(axis, out.ndim)[0]
    sizes = [t.shape[axis] for t in tensors]
    return record("concat", tuple(tensors), out, axis=axis, sizes=sizes)


@register("concat")
def _concat_bw(g, *inputs, axis, sizes):
    bounds = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def slice_axis(a, axis: int, start: int, stop: int) -> Variable:
    a = as_variable(a)
    axis = T.normalize_axes(axis, a.ndim)[0]
    if not 0 <= start <= stop <= a.shape[axis]:
        raise ValueError(f"slice [{start}:{stop}] out of range for axis size {a.shape[axis]}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    return record("slice_axis", (a,), a.value[tuple(index)], index=tuple(index))


@register("slice_axis")
def _slice_axis_bw(g, a, index):
    out = np.zeros_like(a)
    out[index] = g
    return (out,)


# ------------------------------------------------------------- convolution

def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """Columns laid out as [C*kh*kw, N*Ho*Wo] from padded x[N,C,Hp,Wp]."""
    n, c = xp.shape[:2]
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw]
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv2d(x, w, bias=None, stride=(1, 1), padding=(0, 0)) -> Variable:
    """2-D cross-correlation of x[N,C,H,W] with w[O,C,kh,kw], zero padding."""
    x, w = as_variable(x), as_variable(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects x[N,C,H,W] and w[O,C,kh,kw]")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise ValueError(f"input has {c} channels, kernel expects {cw}")
    sh, sw = stride
    ph, pw = padding
    ho = conv_output_size(h, kh, sh, ph)
    wo = conv_output_size(wd, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv output would be {ho}x{wo}")
    xp = np.pad(x.value, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.value
    cols = _im2col(xp, kh, kw, sh, sw, ho, wo)
    out = (w.value.reshape(o, -1) @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    inputs = (x, w)
    if bias is not None:
        bias = as_variable(bias)
        out = out + bias.value.reshape(1, -1, 1, 1)
        inputs = (x, w, bias)
    out = np.ascontiguousarray(out)
    return record("conv2d", inputs, out, cols=cols, stride=(sh, sw), padding=(ph, pw))


@register("conv2d")
def _conv2d_bw(g, x, w, *bias, cols, stride, padding):
    sh, sw = stride
    ph, pw = padding
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = g.shape[2], g.shape[3]
    gt = g.transpose(1, 0, 2, 3).reshape(o, -1)
    dw = (gt @ cols.T).reshape(w.shape)
    dcols = (w.reshape(o, -1).T @ gt).reshape(c, kh, kw, n, ho, wo)
    dxt = np.zeros((c, n, h + 2 * ph, wd + 2 * pw))
    for i in range(kh):
        for j in range(kw):
            dxt[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += dcols[:, i, j]
    dx = dxt[:, :, ph : ph + h, pw : pw + wd].transpose(1, 0, 2, 3)
    grads = (np.ascontiguousarray(dx), dw)
    if bias:
        grads += (g.sum(axis=(0, 2, 3)),)
    return grads


# ------------------------------------------------------------ normalization

def batch_norm_train(x, gamma, beta, eps: float):
    """Per-channel batch normalization of x[N,C,H,W] with batch statistics.

    Returns ``(output, batch_mean, biased_batch_var)``.
    """
    x, gamma, beta = as_variable(x), as_variable(gamma), as_variable(beta)
    axes = (0, 2, 3)
    mu = x.value.mean(axis=axes, keepdims=True)
    var = x.value.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * inv_std
    out = gamma.value.reshape(1, -1, 1, 1) * xhat + beta.value.reshape(1, -1, 1, 1)
    v = record("batch_norm", (x, gamma, beta), out, xhat=xhat, inv_std=inv_std)
    return v, mu.reshape(-1), var.reshape(-1)


@register("batch_norm")
def _batch_norm_bw(g, x, gamma, beta, xhat, inv_std):
    axes = (0, 2, 3)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    dbeta = g.sum(axis=axes)
    dgamma = (g * xhat).sum(axis=axes)
    dxhat = g * gamma.reshape(1, -1, 1, 1)
    dx = inv_std / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
    return dx, dgamma, dbeta


# -------------------------------------------------------------------- loss

def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, labels) -> Variable:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_variable(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    logp = log_softmax_np(logits.value)
    loss = -logp[np.arange(n), labels].mean()
    return record("softmax_cross_entropy", (logits,), np.array(loss), logp=logp, labels=labels)


@register("softmax_cross_entropy")
def _softmax_ce_bw(g, logits, logp, labels):
    n = logits.shape[0]
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return (g * d / n,)
