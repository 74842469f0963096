"""Versioned binary checkpoints.

Byte layout (all integers little-endian)::

    magic    8 bytes   b"IGNATTCK"
    version  u32       currently 1
    hlen     u32       length of the JSON header
    header   hlen      UTF-8 JSON: model config, run config, seed, epoch, rng state, norm
    params   tensor section
    velocity tensor section

A tensor section is a u32 count followed by, per tensor: u16 name length,
the UTF-8 name, u8 ndim, ndim x u32 dims and prod(dims) x f8 values.
"""
from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import NormStats
from .errors import CheckpointError
from .models import Model, ModelConfig

MAGIC = b"IGNATTCK"
VERSION = 1


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    velocities: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    seed: int = 0
    rng_state: dict | None = None
    norm: NormStats | None = None
    run_config: dict[str, str] | None = None

    def build_model(self) -> Model:
        model = Model(self.model_config, self.seed)
        try:
            model.load_state_dict(self.params)
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"checkpoint does not fit its model config: {exc}") from exc
        return model


def _write_tensors(buf, tensors: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensors(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (nlen,) = self.unpack("<H")
            name = self.take(nlen).decode("utf-8")
            (ndim,) = self.unpack("<B")
            shape = self.unpack(f"<{ndim}I")
            size = int(np.prod(shape, dtype=np.int64))
            out[name] = np.frombuffer(self.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        return out


def _jsonable_rng(state):
    # PCG64 state holds ints beyond 2**53; keep them exact as strings
    if isinstance(state, dict):
        return {k: _jsonable_rng(v) for k, v in state.items()}
    if isinstance(state, int) and not isinstance(state, bool):
        return {"__int__": str(state)}
    return state


def _restore_rng(state):
    if isinstance(state, dict):
        if set(state) == {"__int__"}:
            return int(state["__int__"])
        return {k: _restore_rng(v) for k, v in state.items()}
    return state


def dumps(ckpt: Checkpoint) -> bytes:
    header = {
        "model_config": ckpt.model_config.to_dict(),
        "run_config": ckpt.run_config,
        "seed": ckpt.seed,
        "epoch": ckpt.epoch,
        "rng_state": _jsonable_rng(ckpt.rng_state),
        "norm": None if ckpt.norm is None else {"mean": list(ckpt.norm.mean), "std": list(ckpt.norm.std)},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<II", VERSION, len(hbytes)) + hbytes)
    _write_tensors(buf, ckpt.params)
    _write_tensors(buf, ckpt.velocities)
    return buf.getvalue()


def loads(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
        cfg = ModelConfig.from_dict(header["model_config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    params = r.tensors()
    velocities = r.tensors()
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    norm = header.get("norm")
    return Checkpoint(
        model_config=cfg, params=params, velocities=velocities,
        epoch=int(header["epoch"]), seed=int(header["seed"]),
        rng_state=_restore_rng(header.get("rng_state")),
        norm=None if norm is None else NormStats(tuple(norm["mean"]), tuple(norm["std"])),
        run_config=header.get("run_config"),
    )


def save(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    data = dumps(ckpt)
    tmp = f"{os.fspath(path)}.tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def load(path: str | os.PathLike) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(data)


def from_model(model: Model, seed: int = 0, epoch: int = 0, velocities=None, rng_state=None,
               norm: NormStats | None = None, run_config: dict | None = None,
               params: dict[str, np.ndarray] | None = None) -> Checkpoint:
    return Checkpoint(model.config, params if params is not None else model.state_dict(),
                      dict(velocities or {}), epoch, seed, rng_state, norm, run_config)
