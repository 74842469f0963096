"""Run configuration: a flat ``key = value`` text file plus ``--set`` overrides.

Lines starting with ``#`` or ``;`` are comments. Every key is optional;
unknown keys are rejected.
"""
from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field, fields

from .attention import AttentionMode
from .data import AugmentConfig, SyntheticSpec
from .errors import ConfigError
from .models import DEFAULT_STAGES, ModelConfig, Stage
from .train import TrainConfig

DATASETS = ("cifar10", "cifar100", "synth")


def _int_tuple(text: str) -> tuple[int, ...]:
    text = text.strip()
    return tuple(int(t) for t in text.split(",") if t.strip()) if text else ()


def _stages(text: str) -> tuple[Stage, ...]:
    out = []
    for part in text.split(","):
        bits = part.strip().split(":")
        if len(bits) != 3:
            raise ValueError(f"stage {part!r} is not blocks:channels:stride")
        out.append(Stage(*(int(b) for b in bits)))
    return tuple(out)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _paths(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _optional_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


@dataclass(frozen=True)
class RunConfig:
    dataset: str = "synth"
    train_files: tuple[str, ...] = ()
    test_files: tuple[str, ...] = ()
    n_train: int | None = None  # truncate the training pool (before the val split)
    n_val: int = 500
    split_seed: int = 0

    attention: AttentionMode = field(default_factory=AttentionMode)
    stem_channels: int = 16
    stages: tuple[Stage, ...] = DEFAULT_STAGES
    reduction: int = 16
    attention_bias: bool = False

    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 30
    milestones: tuple[int, ...] = (15, 23)
    decay_factor: float = 5.0
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "runs"

    aug_pad: int = 4
    aug_crop: int | None = None
    aug_hflip: float = 0.5

    synth_n: int = 2000
    synth_hw: int = 32
    synth_border: int = 4
    synth_amplitude: float = 0.5
    synth_noise: float = 0.05
    synth_distractor_amplitude: float = 0.5
    synth_distractors: int = 8
    synth_jitter: int = 2
    synth_seed: int = 0

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed")
        if self.n_val < 1:
            raise ConfigError("n_val must be >= 1")
        try:
            self.train_config(0)
            self.augment_config()
            if self.dataset == "synth":
                self.synth_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def num_classes(self) -> int:
        return {"cifar10": 10, "cifar100": 100, "synth": 2}[self.dataset]

    @property
    def input_shape(self) -> tuple[int, int, int]:
        side = self.synth_hw if self.dataset == "synth" else 32
        return (3, side, side)

    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig(stages=self.stages, attention=self.attention,
                               num_classes=self.num_classes, input_shape=self.input_shape,
                               stem_channels=self.stem_channels, reduction=self.reduction,
                               attention_bias=self.attention_bias)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(lr0=self.lr0, momentum=self.momentum, weight_decay=self.weight_decay,
                           batch_size=self.batch_size, epochs=self.epochs,
                           milestones=self.milestones, decay_factor=self.decay_factor, seed=seed)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(pad=self.aug_pad, crop=self.aug_crop, hflip_prob=self.aug_hflip)

    def synth_spec(self, seed: int | None = None) -> SyntheticSpec:
        return SyntheticSpec(n=self.synth_n, hw=self.synth_hw, border=self.synth_border,
                             amplitude=self.synth_amplitude, noise_sigma=self.synth_noise,
                             distractor_amplitude=self.synth_distractor_amplitude,
                             distractors=self.synth_distractors, jitter=self.synth_jitter,
                             seed=self.synth_seed if seed is None else seed)

    def to_text(self) -> dict[str, str]:
        """Values in the same textual form the parser accepts."""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "stages":
                v = ",".join(f"{s.blocks}:{s.channels}:{s.stride}" for s in v)
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            out[f.name] = "none" if v is None else str(v)
        return out


_PARSERS = {
    "dataset": str.strip,
    "train_files": _paths,
    "test_files": _paths,
    "n_train": _optional_int,
    "attention": AttentionMode.parse,
    "stages": _stages,
    "attention_bias": _bool,
    "milestones": _int_tuple,
    "seeds": _int_tuple,
    "out_dir": str.strip,
    "aug_crop": _optional_int,
}


def _parse_value(key: str, text: str):
    if key in _PARSERS:
        return _PARSERS[key](text)
    default = next(f.default for f in fields(RunConfig) if f.name == key)
    return type(default)(text.strip())


def from_mapping(values: dict[str, str]) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    kwargs = {}
    for key, text in values.items():
        try:
            kwargs[key] = _parse_value(key, text)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
    return RunConfig(**kwargs)


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override {item!r} is not key=value")
        out[key.strip()] = value
    return out


def parse_text(text: str) -> dict[str, str]:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",),
                                   comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    cp.optionxform = str  # keep keys case-sensitive
    try:
        cp.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    return dict(cp["run"])


def load(path: str | os.PathLike | None, overrides=()) -> RunConfig:
    values = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                values = parse_text(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    values.update(parse_overrides(overrides))
    return from_mapping(values)


def replace(cfg: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(cfg, **changes)
