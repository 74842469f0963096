"""Mini residual network with pluggable attention.

Layout: 3x3 stem conv, then stages of basic residual units, global average
pooling and a linear head. Each unit computes conv-bn-relu-conv-bn, applies
its attention block (if any), adds the shortcut and applies relu.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .attention import AttentionMode, make_block
from .autograd import Variable, as_variable
from .nn import BatchNorm2d, Conv2d, Linear, Module, global_pool


@dataclass(frozen=True)
class Stage:
    blocks: int
    channels: int
    stride: int = 1


DEFAULT_STAGES = (Stage(2, 16, 1), Stage(2, 32, 2), Stage(2, 64, 2))


@dataclass(frozen=True)
class ModelConfig:
    stages: tuple[Stage, ...] = DEFAULT_STAGES
    attention: AttentionMode = field(default_factory=AttentionMode)
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (3, 32, 32)
    stem_channels: int = 16
    reduction: int = 16
    attention_bias: bool = False

    def __post_init__(self):
        if not self.stages:
            raise ValueError("at least one stage is required")
        for st in self.stages:
            if st.blocks < 1 or st.channels < 1 or st.stride < 1:
                raise ValueError(f"invalid stage {st}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.input_shape) != 3:
            raise ValueError("input_shape is (C, H, W)")

    def to_dict(self) -> dict:
        return {
            "stages": [[s.blocks, s.channels, s.stride] for s in self.stages],
            "attention": str(self.attention),
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "stem_channels": self.stem_channels,
            "reduction": self.reduction,
            "attention_bias": self.attention_bias,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            stages=tuple(Stage(*s) for s in d["stages"]),
            attention=AttentionMode.parse(d["attention"]),
            num_classes=int(d["num_classes"]),
            input_shape=tuple(d["input_shape"]),
            stem_channels=int(d["stem_channels"]),
            reduction=int(d["reduction"]),
            attention_bias=bool(d["attention_bias"]),
        )


class ResidualUnit(Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int, cfg: ModelConfig, name: str, seed: int):
        self.name = name
        self.conv1 = Conv2d(in_ch, out_ch, 3, name + ".conv1", seed, stride=stride, padding=1)
        self.bn1 = BatchNorm2d(out_ch, name + ".bn1")
        self.conv2 = Conv2d(out_ch, out_ch, 3, name + ".conv2", seed, padding=1)
        self.bn2 = BatchNorm2d(out_ch, name + ".bn2")
        self.attention = make_block(cfg.attention, out_ch, cfg.reduction, name + "." + cfg.attention.family,
                                    seed, cfg.attention_bias)
        if stride != 1 or in_ch != out_ch:
            self.short_conv = Conv2d(in_ch, out_ch, 1, name + ".short.conv", seed, stride=stride)
            self.short_bn = BatchNorm2d(out_ch, name + ".short.bn")
        else:
            self.short_conv = self.short_bn = None

    def __call__(self, x: Variable, mode: str) -> Variable:
        out = ops.relu(self.bn1(self.conv1(x), mode))
        out = self.bn2(self.conv2(out), mode)
        if self.attention is not None:
            out = self.attention(out)
        short = x if self.short_conv is None else self.short_bn(self.short_conv(x), mode)
        return ops.relu(ops.add(out, short))


class Model(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        in_ch = config.input_shape[0]
        self.stem_conv = Conv2d(in_ch, config.stem_channels, 3, "stem.conv", seed, padding=1)
        self.stem_bn = BatchNorm2d(config.stem_channels, "stem.bn")
        units = []
        ch = config.stem_channels
        for si, stage in enumerate(config.stages, start=1):
            for bi in range(stage.blocks):
                stride = stage.stride if bi == 0 else 1
                units.append(ResidualUnit(ch, stage.channels, stride, config, f"stage{si}.unit{bi}", seed))
                ch = stage.channels
        self.units = units
        self.head = Linear(ch, config.num_classes, "head", seed, bias=True)
        self.masks: dict[str, dict] = {}
        self.activations: dict[str, Variable] = {}

    @property
    def layer_names(self) -> list[str]:
        return ["stem"] + [u.name for u in self.units]

    def attention_blocks(self) -> dict[str, Module]:
        return {u.name: u.attention for u in self.units if u.attention is not None}

    def batchnorms(self) -> list[BatchNorm2d]:
        return [m for m in self.modules() if isinstance(m, BatchNorm2d)]

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())

    # -- forward -------------------------------------------------------
    def forward(self, images, mode: str = "eval", capture=()) -> Variable:
        x = as_variable(images)
        expected = tuple(self.config.input_shape)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ValueError(f"expected images [N,{','.join(map(str, expected))}], got {x.shape}")
        x = ops.relu(self.stem_bn(self.stem_conv(x), mode))
        return self._from("stem", x, mode, set(capture))

    __call__ = forward

    def forward_from(self, layer: str, activation, mode: str = "eval") -> Variable:
        """Continue the forward pass from the output of ``layer``."""
        if layer not in self.layer_names:
            raise KeyError(f"unknown layer {layer!r}")
        return self._from(layer, as_variable(activation), mode, set())

    def _from(self, layer: str, x: Variable, mode: str, capture: set) -> Variable:
        self.masks = {}
        self.activations = {}
        if layer == "stem" and "stem" in capture:
            self.activations["stem"] = x.retain_grad()
        started = layer == "stem"
        for unit in self.units:
            if not started:
                started = unit.name == layer
                continue
            x = unit(x, mode)
            if unit.attention is not None:
                self.masks[unit.name] = dict(unit.attention.last)
            if unit.name in capture:
                self.activations[unit.name] = x.retain_grad()
        pooled = global_pool("avg", x)
        n, c = pooled.shape[:2]
        return self.head(ops.reshape(pooled, (n, c)))

    # -- state ---------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: np.array(p.value) for name, p in self.named_parameters()}
        for bn in self.batchnorms():
            state[bn.name + ".running_mean"] = np.array(bn.running_mean)
            state[bn.name + ".running_var"] = np.array(bn.running_var)
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        expected = set(params) | {bn.name + s for bn in self.batchnorms()
                                  for s in (".running_mean", ".running_var")}
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {state[name].shape} vs {p.shape}")
            p.value = np.array(state[name], dtype=np.float64)
        for bn in self.batchnorms():
            bn.running_mean = np.array(state[bn.name + ".running_mean"], dtype=np.float64)
            bn.running_var = np.array(state[bn.name + ".running_var"], dtype=np.float64)


def build(config: ModelConfig, seed: int = 0) -> Model:
    return Model(config, seed)
