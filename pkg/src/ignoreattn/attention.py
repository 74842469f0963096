"""Explicit attention (SE, CBAM) and its ignoring counterparts.

An ignoring block learns a response ``g = sigmoid(z)`` that is high where
features should be suppressed, then converts it into an attention mask with
one of three inversion functions:

    t1:  1 - alpha * g
    t2:  sigmoid(1 / g)          (value 1 at g = 0, the right-hand limit)
    t3:  sigmoid(-z)             (acts on the logits z, not on g)

The resulting mask multiplies the feature map exactly like an ordinary
attention mask.
"""
from __future__ import annotations

import difflib
from dataclasses import dataclass

import numpy as np

from . import ops
from . import tensor as T
from .autograd import Variable, as_variable
from .nn import Conv2d, Linear, Module, channel_pool, global_pool

MASK_TOL = 1e-12


@dataclass(frozen=True)
class Inversion:
    kind: str
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in ("t1", "t2", "t3"):
            raise ValueError(f"unknown inversion {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")

    @property
    def uses_logits(self) -> bool:
        return self.kind == "t3"


def invert(inv: Inversion, mask=None, logits=None) -> np.ndarray:
    """Turn an ignoring response into an attention mask (plain tensors).

    t1 and t2 read ``mask`` (post-sigmoid values in [0, 1]); t3 reads ``logits``.
    """
    if inv.uses_logits:
        if logits is None:
            raise ValueError("t3 needs pre-sigmoid logits")
        return T.sigmoid(-T.as_tensor(logits))
    if mask is None:
        raise ValueError(f"{inv.kind} needs a mask")
    mask = T.as_tensor(mask)
    if np.any(mask < -MASK_TOL) or np.any(mask > 1 + MASK_TOL):
        raise ValueError("mask values must lie in [0, 1]")
    mask = np.clip(mask, 0.0, 1.0)
    if inv.kind == "t1":
        return 1.0 - inv.alpha * mask
    return T.sigmoid(1.0 / np.maximum(mask, ops.RECIP_FLOOR))


def inverted_mask(inv: Inversion | None, logits: Variable) -> tuple[Variable, np.ndarray | None]:
    """Differentiable mask from logits.

    Returns ``(attention_mask, ignoring_response)``; the response is ``None``
    for explicit attention.
    """
    if inv is None:
        return ops.sigmoid(logits), None
    if inv.kind == "t3":
        return ops.sigmoid(ops.neg(logits)), T.sigmoid(logits.value)
    g = ops.sigmoid(logits)
    if inv.kind == "t1":
        mask = ops.add_scalar(ops.scale(g, -inv.alpha), 1.0)
    else:
        mask = ops.sigmoid_reciprocal(g)
    return mask, g.value


# --------------------------------------------------------------- modes

FAMILIES = ("none", "se", "cbam")
MODE_NAMES = ("none", "se", "se-ign1", "se-ign2", "se-ign3",
              "cbam", "cbam-ign1", "cbam-ign2", "cbam-ign3")


@dataclass(frozen=True)
class AttentionMode:
    family: str = "none"
    inversion: Inversion | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown attention family {self.family!r}")
        if self.family == "none" and self.inversion is not None:
            raise ValueError("attention 'none' takes no inversion")

    @classmethod
    def parse(cls, text: str) -> "AttentionMode":
        """Parse ``name[:alpha=v]``, e.g. ``se``, ``cbam-ign1:alpha=0.5``."""
        name, _, opts = text.strip().partition(":")
        name = name.strip().lower()
        if name not in MODE_NAMES:
            close = difflib.get_close_matches(name, MODE_NAMES, n=3)
            hint = f"; did you mean {', '.join(close)}?" if close else ""
            raise ValueError(f"unknown attention mode {name!r}{hint} "
                             f"(valid: {', '.join(MODE_NAMES)})")
        alpha = 1.0
        if opts:
            key, eq, val = opts.partition("=")
            if key.strip() != "alpha" or not eq:
                raise ValueError(f"bad attention option {opts!r}; expected alpha=<value>")
            if not name.endswith("ign1"):
                raise ValueError(f"{name} does not take alpha")
            try:
                alpha = float(val)
            except ValueError:
                raise ValueError(f"alpha {val!r} is not a number") from None
        family, _, ign = name.partition("-")
        inv = Inversion("t" + ign[-1], alpha if ign == "ign1" else 1.0) if ign else None
        return cls(family, inv)

    def __str__(self):
        if self.inversion is None:
            return self.family
        base = f"{self.family}-ign{self.inversion.kind[1]}"
        if self.inversion.kind == "t1":
            return f"{base}:alpha={self.inversion.alpha:g}"
        return base


# --------------------------------------------------------------- blocks

def bottleneck_width(channels: int, reduction: int) -> int:
    """Hidden width c/r, with r lowered so the bottleneck keeps at least 4 units."""
    if reduction < 1:
        raise ValueError("reduction ratio must be >= 1")
    r = max(1, min(reduction, channels // 4))
    if channels % r:
        raise ValueError(f"{channels} channels not divisible by reduction {r}")
    return channels // r


class _MLP(Module):
    def __init__(self, channels: int, reduction: int, name: str, seed: int, bias: bool):
        hidden = bottleneck_width(channels, reduction)
        self.fc1 = Linear(channels, hidden, name + ".fc1", seed, bias=bias)
        self.fc2 = Linear(hidden, channels, name + ".fc2", seed, bias=bias)

    def __call__(self, pooled: Variable) -> Variable:
        n, c = pooled.shape[0], pooled.shape[1]
        h = ops.relu(self.fc1(ops.reshape(pooled, (n, c))))
        return ops.reshape(self.fc2(h), (n, c, 1, 1))


class SEBlock(Module):
    """Squeeze-and-excitation, optionally in ignoring form."""

    def __init__(self, channels: int, reduction: int = 16, inversion: Inversion | None = None,
                 name: str = "se", seed: int = 0, bias: bool = False):
        self.channels = channels
        self.inversion = inversion
        self.mlp = _MLP(channels, reduction, name, seed, bias)
        self.last: dict[str, np.ndarray | None] = {}

    def logits(self, x) -> Variable:
        x = as_variable(x)
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ValueError(f"expected [N,{self.channels},H,W], got {x.shape}")
        return self.mlp(global_pool("avg", x))

    def mask(self, x) -> Variable:
        mask, ignore = inverted_mask(self.inversion, self.logits(x))
        self.last = {"channel": mask.value, "channel_ignore": ignore}
        return mask

    def __call__(self, x) -> Variable:
        x = as_variable(x)
        return ops.mul(x, self.mask(x))


class CBAMBlock(Module):
    """Channel then spatial attention, optionally in ignoring form.

    The same inversion is applied to both masks.
    """

    def __init__(self, channels: int, reduction: int = 16, inversion: Inversion | None = None,
                 name: str = "cbam", seed: int = 0, bias: bool = False, kernel_size: int = 7):
        self.channels = channels
        self.inversion = inversion
        self.mlp = _MLP(channels, reduction, name + ".channel", seed, bias)
        self.spatial = Conv2d(2, 1, kernel_size, name + ".spatial", seed,
                              padding=kernel_size // 2, bias=False)
        self.last: dict[str, np.ndarray | None] = {}

    def channel_logits(self, x) -> Variable:
        x = as_variable(x)
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ValueError(f"expected [N,{self.channels},H,W], got {x.shape}")
        return ops.add(self.mlp(global_pool("avg", x)), self.mlp(global_pool("max", x)))

    def channel_mask(self, x) -> Variable:
        mask, ignore = inverted_mask(self.inversion, self.channel_logits(x))
        self.last["channel"] = mask.value
        self.last["channel_ignore"] = ignore
        return mask

    def spatial_logits(self, xch) -> Variable:
        xch = as_variable(xch)
        if xch.ndim != 4:
            raise ValueError(f"expected [N,C,H,W], got {xch.shape}")
        pooled = ops.concat([channel_pool("avg", xch), channel_pool("max", xch)], axis=1)
        return self.spatial(pooled)

    def spatial_mask(self, xch) -> Variable:
        mask, ignore = inverted_mask(self.inversion, self.spatial_logits(xch))
        self.last["spatial"] = mask.value
        self.last["spatial_ignore"] = ignore
        return mask

    def __call__(self, x) -> Variable:
        x = as_variable(x)
        self.last = {}
        xch = ops.mul(x, self.channel_mask(x))
        return ops.mul(xch, self.spatial_mask(xch))


def make_block(mode: AttentionMode, channels: int, reduction: int, name: str, seed: int,
               bias: bool = False) -> Module | None:
    if mode.family == "se":
        return SEBlock(channels, reduction, mode.inversion, name, seed, bias)
    if mode.family == "cbam":
        return CBAMBlock(channels, reduction, mode.inversion, name, seed, bias)
    return None
