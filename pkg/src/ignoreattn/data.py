"""Datasets: CIFAR binary records, augmentation, and a planted-distractor generator."""
from __future__ import annotations

import os
import queue
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DataError

CIFAR_SIDE = 32
CIFAR_PIXELS = 3 * CIFAR_SIDE * CIFAR_SIDE
CIFAR_VARIANTS = {
    # name: (label bytes per record, index of the label byte used, class count)
    "cifar10": (1, 0, 10),
    "cifar100": (2, 1, 100),
}


@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]


@dataclass
class LabeledImages:
    images: np.ndarray  # [N, C, H, W] floats in [0, 1]
    labels: np.ndarray  # [N] int64
    class_count: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if len(self.labels) == 0:
            raise DataError("empty dataset")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DataError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    def take(self, idx, split: str | None = None) -> "LabeledImages":
        return LabeledImages(self.images[idx], self.labels[idx], self.class_count, split or self.split)

    def norm_stats(self) -> NormStats:
        mean = self.images.mean(axis=(0, 2, 3))
        std = self.images.std(axis=(0, 2, 3))
        std = np.where(std > 0, std, 1.0)
        return NormStats(tuple(float(v) for v in mean), tuple(float(v) for v in std))


def normalize(images: np.ndarray, norm: NormStats | None) -> np.ndarray:
    if norm is None:
        return np.asarray(images, dtype=np.float64)
    mean = np.asarray(norm.mean).reshape(1, -1, 1, 1)
    std = np.asarray(norm.std).reshape(1, -1, 1, 1)
    return (images - mean) / std


def denormalize(images: np.ndarray, norm: NormStats | None) -> np.ndarray:
    if norm is None:
        return np.asarray(images, dtype=np.float64)
    mean = np.asarray(norm.mean).reshape(1, -1, 1, 1)
    std = np.asarray(norm.std).reshape(1, -1, 1, 1)
    return images * std + mean


# ------------------------------------------------------------ CIFAR binary

def load_cifar_binary(paths: Sequence[str | os.PathLike], variant: str = "cifar10",
                      split: str = "train") -> LabeledImages:
    """Read CIFAR binary record files, preserving record order.

    A record is the label byte(s) followed by 3072 pixel bytes: the red plane,
    then green, then blue, each 32x32 row-major.
    """
    if variant not in CIFAR_VARIANTS:
        raise DataError(f"unknown CIFAR variant {variant!r}")
    nlab, which, classes = CIFAR_VARIANTS[variant]
    size = nlab + CIFAR_PIXELS
    images, labels = [], []
    for path in paths:
        try:
            raw = np.fromfile(path, dtype=np.uint8)
        except OSError as exc:
            raise DataError(f"cannot read {path}: {exc}") from exc
        if raw.size == 0 or raw.size % size:
            raise DataError(f"{path}: {raw.size} bytes is not a whole number of {size}-byte records")
        recs = raw.reshape(-1, size)
        lab = recs[:, which].astype(np.int64)
        if lab.max() >= classes:
            raise DataError(f"{path}: label byte {lab.max()} out of range for {variant}")
        labels.append(lab)
        images.append(recs[:, nlab:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE))
    if not images:
        raise DataError("no input files")
    pixels = np.concatenate(images).astype(np.float64) / 255.0
    return LabeledImages(pixels, np.concatenate(labels), classes, split)


def load_cifar10_binary(paths, split: str = "train") -> LabeledImages:
    return load_cifar_binary(paths, "cifar10", split)


def load_cifar100_binary(paths, split: str = "train") -> LabeledImages:
    return load_cifar_binary(paths, "cifar100", split)


def to_bytes(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)


def write_cifar_binary(path: str | os.PathLike, data: LabeledImages, variant: str = "cifar10") -> None:
    nlab, which, classes = CIFAR_VARIANTS[variant]
    if data.images.shape[1:] != (3, CIFAR_SIDE, CIFAR_SIDE):
        raise DataError(f"CIFAR records hold 3x32x32 images, got {data.images.shape[1:]}")
    if data.class_count > classes:
        raise DataError(f"{variant} holds at most {classes} classes")
    recs = np.zeros((len(data), nlab + CIFAR_PIXELS), dtype=np.uint8)
    recs[:, which] = data.labels
    recs[:, nlab:] = to_bytes(data.images).reshape(len(data), -1)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    recs.tofile(path)


# ------------------------------------------------------------ splitting

def split_train_val(data: LabeledImages, n_val: int, seed: int = 0) -> tuple[LabeledImages, LabeledImages]:
    if not 0 < n_val < len(data):
        raise DataError(f"n_val must lie in (0, {len(data)}), got {n_val}")
    perm = np.random.default_rng([seed, 0x5917]).permutation(len(data))
    return data.take(np.sort(perm[n_val:]), "train"), data.take(np.sort(perm[:n_val]), "val")


def batches(data: LabeledImages, batch_size: int, rng: np.random.Generator | None = None,
            shuffle: bool = False) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    order = rng.permutation(len(data)) if shuffle else np.arange(len(data))
    for start in range(0, len(data), batch_size):
        idx = order[start : start + batch_size]
        yield data.images[idx], data.labels[idx]


def prefetch(it, depth: int = 2):
    """Run ``it`` on a worker thread with a bounded hand-off queue; order is preserved."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()
    stop = threading.Event()

    def work():
        try:
            for item in it:
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
            q.put(done)
        except BaseException as exc:  # handed to the consumer
            q.put(exc)

    t = threading.Thread(target=work, daemon=True)
    t.start()
    try:
        while True:
            item = q.get()
            if item is done:
                return
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()


# ------------------------------------------------------------ augmentation

@dataclass(frozen=True)
class AugmentConfig:
    pad: int = 4
    crop: int | None = None  # defaults to the image side
    hflip_prob: float = 0.5

    def __post_init__(self):
        if self.pad < 0:
            raise ValueError("pad must be >= 0")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must lie in [0, 1]")


def sample_crop_offsets(rng: np.random.Generator, n: int, pad: int, side: int, crop: int):
    span = side + 2 * pad - crop + 1
    if span < 1:
        raise ValueError(f"crop {crop} exceeds padded side {side + 2 * pad}")
    return rng.integers(0, span, size=n), rng.integers(0, span, size=n)


def hflip(images: np.ndarray) -> np.ndarray:
    return images[..., ::-1]


def augment(images: np.ndarray, config: AugmentConfig, rng: np.random.Generator,
            norm: NormStats | None = None) -> np.ndarray:
    """Pad-and-crop, random horizontal flip, then per-channel normalization."""
    n, c, h, w = images.shape
    crop = config.crop or h
    out = np.asarray(images, dtype=np.float64)
    if config.pad or crop != h:
        p = config.pad
        padded = np.pad(out, ((0, 0), (0, 0), (p, p), (p, p)))
        oy, ox = sample_crop_offsets(rng, n, p, h, crop)
        out = np.stack([padded[i, :, oy[i] : oy[i] + crop, ox[i] : ox[i] + crop] for i in range(n)])
    if config.hflip_prob > 0:
        flip = rng.random(n) < config.hflip_prob
        out = np.where(flip[:, None, None, None], out[..., ::-1], out)
    return normalize(out, norm)


def training_batches(data: LabeledImages, batch_size: int, rng: np.random.Generator,
                     config: AugmentConfig, norm: NormStats | None):
    for xb, yb in batches(data, batch_size, rng, shuffle=True):
        yield augment(xb, config, rng, norm), yb


# ------------------------------------------------------------ synthetic data

@dataclass(frozen=True)
class SyntheticSpec:
    """Two-class images: a disc or a cross in the interior, label-free clutter on the border band."""

    n: int = 2000
    hw: int = 32
    border: int = 4
    amplitude: float = 0.5
    noise_sigma: float = 0.05
    distractor_amplitude: float = 0.5
    distractors: int = 8
    jitter: int = 2
    seed: int = 0
    classes: int = field(default=2, init=False)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not 0 <= self.border < self.hw / 2:
            raise ValueError("border width must be < hw/2")
        inner = self.hw - 2 * self.border
        if inner < 5 + 2 * self.jitter:
            raise ValueError(f"interior of {inner}px is too small for the class shapes")
        if self.noise_sigma < 0 or self.amplitude < 0 or self.distractor_amplitude < 0:
            raise ValueError("amplitudes and noise must be non-negative")


def border_mask(hw: int, width: int) -> np.ndarray:
    m = np.zeros((hw, hw), dtype=bool)
    if width:
        m[:width, :] = m[-width:, :] = True
        m[:, :width] = m[:, -width:] = True
    return m


def _shape_plane(label: int, spec: SyntheticSpec, dy: int, dx: int) -> np.ndarray:
    inner = spec.hw - 2 * spec.border - 2 * spec.jitter
    radius = (inner - 1) / 2.0
    yy, xx = np.mgrid[0 : spec.hw, 0 : spec.hw].astype(np.float64)
    cy = (spec.hw - 1) / 2.0 + dy
    cx = (spec.hw - 1) / 2.0 + dx
    ay, ax = np.abs(yy - cy), np.abs(xx - cx)
    if label == 0:
        return ((ay ** 2 + ax ** 2) <= (0.75 * radius) ** 2).astype(np.float64)
    arm = max(1.0, radius / 4.0)
    return (((ay <= arm) & (ax <= radius)) | ((ax <= arm) & (ay <= radius))).astype(np.float64)


def _clutter_plane(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    plane = np.zeros((spec.hw, spec.hw))
    for _ in range(spec.distractors):
        y0, x0 = rng.integers(0, spec.hw, size=2)
        long, short = rng.integers(spec.border, 2 * spec.border + 3), rng.integers(1, max(2, spec.border))
        hgt, wid = (long, short) if rng.random() < 0.5 else (short, long)
        plane[y0 : y0 + hgt, x0 : x0 + wid] += rng.choice([-1.0, 1.0]) * spec.distractor_amplitude
    return plane


def render(label: int, spec: SyntheticSpec, signal_rng, clutter_rng, noise_rng) -> np.ndarray:
    """One [3, hw, hw] image; the border band only sees ``clutter_rng`` and ``noise_rng``."""
    dy, dx = signal_rng.integers(-spec.jitter, spec.jitter + 1, size=2)
    band = border_mask(spec.hw, spec.border)
    plane = np.full((spec.hw, spec.hw), 0.5)
    plane += np.where(band, 0.0, spec.amplitude * _shape_plane(label, spec, dy, dx))
    plane += np.where(band, _clutter_plane(spec, clutter_rng), 0.0)
    img = np.repeat(plane[None], 3, axis=0)
    if spec.noise_sigma:
        img = img + noise_rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def synth_generate(spec: SyntheticSpec, split: str = "train") -> LabeledImages:
    """Planted-distractor dataset, deterministic in ``spec.seed``.

    Labels, class-shape placement, border clutter and pixel noise each come
    from their own stream, so the border band is independent of the label.
    """
    base = np.random.SeedSequence([spec.seed, 0x51A7])
    label_ss, signal_ss, clutter_ss, noise_ss = base.spawn(4)
    labels = np.random.default_rng(label_ss).integers(0, spec.classes, size=spec.n)
    signal_rng = np.random.default_rng(signal_ss)
    clutter_rng = np.random.default_rng(clutter_ss)
    noise_rng = np.random.default_rng(noise_ss)
    images = np.stack([render(int(y), spec, signal_rng, clutter_rng, noise_rng) for y in labels])
    return LabeledImages(images, labels, spec.classes, split)


def with_seed(spec: SyntheticSpec, seed: int) -> SyntheticSpec:
    return replace(spec, seed=seed)
