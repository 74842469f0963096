"""Grad-CAM heatmaps, ignoring-mask region statistics, and PGM/PPM export."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .models import Model


@dataclass
class Heatmap:
    values: np.ndarray  # [H, W] in [0, 1]
    source_layer: str
    class_index: int


@dataclass(frozen=True)
class RegionStats:
    border_mean: float
    interior_mean: float
    border_width: int


def cam_weights(grad: np.ndarray) -> np.ndarray:
    """Per-channel weights: spatial mean of d(score)/d(activation), grad [C,h,w]."""
    return grad.mean(axis=(1, 2))


def weighted_cam(activation: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """ReLU of the weight-combined activation channels: [C,h,w] -> [h,w]."""
    return np.maximum(np.tensordot(weights, activation, axes=(0, 0)), 0.0)


def bilinear_resize(plane: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centres and edge clamping."""
    h, w = plane.shape

    def coords(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = coords(h, out_h)
    x0, x1, fx = coords(w, out_w)
    top = plane[y0][:, x0] * (1 - fx) + plane[y0][:, x1] * fx
    bot = plane[y1][:, x0] * (1 - fx) + plane[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def minmax_normalize(plane: np.ndarray) -> np.ndarray:
    lo, hi = plane.min(), plane.max()
    if hi - lo <= 0:
        return np.zeros_like(plane)
    return (plane - lo) / (hi - lo)


def default_layer(model: Model) -> str:
    return model.layer_names[-1]


def grad_cam(model: Model, image: np.ndarray, class_index: int, layer: str | None = None) -> Heatmap:
    """Grad-CAM for one (already normalized) image [C,H,W] in eval mode.

    Parameter gradients are left cleared afterwards.
    """
    layer = layer or default_layer(model)
    if layer not in model.layer_names:
        raise KeyError(f"layer {layer!r} not found; choose from {model.layer_names}")
    x = np.asarray(image, dtype=np.float64)[None]
    logits = model(x, "eval", capture=(layer,))
    if not 0 <= class_index < logits.shape[1]:
        raise ValueError(f"class index {class_index} out of range")
    act = model.activations[layer]
    seed = np.zeros(logits.shape)
    seed[0, class_index] = 1.0
    logits.backward(seed)
    for p in model.parameters():
        p.zero_grad()
    a, g = act.value[0], act.grad[0]
    cam = weighted_cam(a, cam_weights(g))
    cam = bilinear_resize(cam, x.shape[2], x.shape[3])
    return Heatmap(minmax_normalize(cam), layer, class_index)


def ignoring_response(model: Model, unit: str | None = None) -> np.ndarray:
    """Spatial ignoring response [N,1,H,W] recorded by the last forward pass.

    For ignoring modes this is the raw pre-inversion response; for plain
    CBAM it is one minus the spatial attention mask.
    """
    cbam = {k: v for k, v in model.masks.items() if "spatial" in v}
    if not cbam:
        raise ValueError("model has no spatial attention masks recorded")
    rec = cbam[unit] if unit is not None else next(iter(cbam.values()))
    if rec.get("spatial_ignore") is not None:
        return rec["spatial_ignore"]
    return 1.0 - rec["spatial"]


def ignore_mask_stats(mask: np.ndarray, border_width: int) -> RegionStats:
    """Mean response over the border frame of width ``border_width`` versus the interior."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 3:
        if mask.shape[0] != 1:
            raise ValueError("expected a single-plane mask [1,H,W]")
        mask = mask[0]
    h, w = mask.shape
    if not 1 <= border_width < min(h, w) / 2:
        raise ValueError(f"border width {border_width} invalid for a {h}x{w} mask")
    band = np.zeros((h, w), dtype=bool)
    b = border_width
    band[:b], band[-b:], band[:, :b], band[:, -b:] = True, True, True, True
    return RegionStats(float(T.reduce("mean", mask[band])), float(T.reduce("mean", mask[~band])), border_width)


# ------------------------------------------------------------------ export

def quantize(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if np.any(values < -1e-12) or np.any(values > 1 + 1e-12):
        raise ValueError("values must lie in [0, 1]")
    return np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path: str | os.PathLike, values: np.ndarray) -> None:
    px = quantize(values)
    h, w = px.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def write_ppm(path: str | os.PathLike, rgb: np.ndarray) -> None:
    """``rgb`` is [3,H,W] in [0, 1]."""
    px = quantize(rgb).transpose(1, 2, 0)
    h, w = px.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(px).tobytes())


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary P5/P6 file written by this module; returns raw bytes as uint8."""
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        fields.append(data[pos:end].decode("ascii"))
        pos = end
    pos += 1
    magic, w, h = fields[0], int(fields[1]), int(fields[2])
    px = np.frombuffer(data[pos:], dtype=np.uint8)
    if magic == "P5":
        return px.reshape(h, w)
    if magic == "P6":
        return px.reshape(h, w, 3)
    raise ValueError(f"unsupported PNM type {magic}")


def export_image(values: np.ndarray, path: str | os.PathLike, image: np.ndarray | None = None,
                 overlay_path: str | os.PathLike | None = None) -> list[Path]:
    """Write ``values`` as P5; with ``image`` ([3,H,W] in [0,1]) also a 50/50 overlay P6."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        write_pgm(path, values)
        written = [path]
        if image is not None:
            overlay_path = Path(overlay_path) if overlay_path else path.with_suffix(".ppm")
            heat = np.asarray(values, dtype=np.float64)
            if heat.shape != image.shape[1:]:
                heat = bilinear_resize(heat, *image.shape[1:])
            blend = 0.5 * np.clip(image, 0.0, 1.0) + 0.5 * heat[None]
            write_ppm(overlay_path, blend)
            written.append(overlay_path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return written
