"""Versioned binary checkpoint container.

Layout (little-endian)::

    8s magic b"SCANCKPT" | u32 version | u32 section_count
    section* : u16 name_len | name (utf-8) | u64 payload_len | payload | u32 crc32(payload)

Sections: ``header`` (JSON: configs, parameter order and shapes, epoch, RNG
state, loss history, Adam step counters), ``params`` and
``adam.<side>.m`` / ``adam.<side>.v`` (float64 arrays concatenated in header
order).
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import ModelConfig
from .trainer import SIDES, OptimizerState, TrainConfig

MAGIC = b"SCANCKPT"
VERSION = 1
_HEAD = struct.Struct("<8sII")


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: dict[str, np.ndarray]
    optimizer: dict[str, OptimizerState]
    epoch: int = 0
    batch_counter: int = 0
    rng_state: dict = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)


def _pack_arrays(order: list[str], arrays: dict[str, np.ndarray]) -> bytes:
    return b"".join(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes() for k in order)


def _unpack_arrays(buf: bytes, order: list[str], shapes: dict[str, list[int]]) -> dict[str, np.ndarray]:
    out, off = {}, 0
    for k in order:
        n = int(np.prod(shapes[k])) if shapes[k] else 1
        out[k] = np.frombuffer(buf, "<f8", n, off).astype(np.float64).reshape(shapes[k])
        off += 8 * n
    if off != len(buf):
        raise CheckpointError(f"array section size mismatch: {len(buf)} bytes, expected {off}")
    return out


def _section(name: str, payload: bytes) -> bytes:
    nb = name.encode()
    return (struct.pack("<H", len(nb)) + nb + struct.pack("<Q", len(payload)) + payload
            + struct.pack("<I", zlib.crc32(payload)))


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    order = list(ckpt.params)
    shapes = {k: list(np.shape(v)) for k, v in ckpt.params.items()}
    side_order = {s: list(ckpt.optimizer[s].m) for s in SIDES}
    header = {
        "format_version": VERSION,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "order": order,
        "shapes": shapes,
        "layer_norm_eps": ckpt.model_config.layer_norm_eps,
        "epoch": ckpt.epoch,
        "batch_counter": ckpt.batch_counter,
        "rng_state": ckpt.rng_state,
        "history": ckpt.history,
        "adam": {s: {"t": ckpt.optimizer[s].t, "beta1": ckpt.optimizer[s].beta1,
                     "beta2": ckpt.optimizer[s].beta2, "eps": ckpt.optimizer[s].eps,
                     "order": side_order[s]} for s in SIDES},
    }
    sections = [("header", json.dumps(header, sort_keys=True).encode()),
                ("params", _pack_arrays(order, ckpt.params))]
    for s in SIDES:
        sections.append((f"adam.{s}.m", _pack_arrays(side_order[s], ckpt.optimizer[s].m)))
        sections.append((f"adam.{s}.v", _pack_arrays(side_order[s], ckpt.optimizer[s].v)))
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_HEAD.pack(MAGIC, VERSION, len(sections)))
        for name, payload in sections:
            f.write(_section(name, payload))
    return path


def _read_sections(buf: bytes, path) -> dict[str, bytes]:
    if len(buf) < _HEAD.size:
        raise CheckpointError(f"{path}: file too short for a checkpoint header")
    magic, version, count = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} unsupported")
    off = _HEAD.size
    out = {}
    try:
        for _ in range(count):
            (nl,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nl].decode()
            off += nl
            (pl,) = struct.unpack_from("<Q", buf, off)
            off += 8
            payload = buf[off:off + pl]
            if len(payload) != pl:
                raise CheckpointError(f"{path}: section {name!r} truncated at byte offset {off}")
            off += pl
            (crc,) = struct.unpack_from("<I", buf, off)
            off += 4
            if zlib.crc32(payload) != crc:
                raise CheckpointError(f"{path}: CRC mismatch in section {name!r}")
            out[name] = payload
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated checkpoint at byte offset {off}") from e
    return out


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    sec = _read_sections(path.read_bytes(), path)
    h = json.loads(sec["header"])
    params = _unpack_arrays(sec["params"], h["order"], h["shapes"])
    opt = {}
    for s in SIDES:
        a = h["adam"][s]
        m = _unpack_arrays(sec[f"adam.{s}.m"], a["order"], h["shapes"])
        v = _unpack_arrays(sec[f"adam.{s}.v"], a["order"], h["shapes"])
        opt[s] = OptimizerState(m, v, a["t"], a["beta1"], a["beta2"], a["eps"])
    return Checkpoint(
        model_config=ModelConfig(**h["model_config"]),
        train_config=TrainConfig.from_dict(h["train_config"]),
        params=params, optimizer=opt, epoch=h["epoch"], batch_counter=h["batch_counter"],
        rng_state=h["rng_state"], history=h["history"])
