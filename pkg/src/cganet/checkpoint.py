"""Binary checkpoint container.

Layout (little-endian)::

    magic       8 bytes  b"CGACKPT\\0"
    version     u16
    epoch       u32
    seed        i64
    n_entries   u32
    entries     n_entries x entry

    entry:
    name_len    u16, then name (utf-8)
    dtype tag   u8   (0 f32, 1 f64, 2 i64, 3 u8)
    ndim        u8, then ndim x u32 extents
    payload     row-major little-endian data

Entry names are prefixed ``param/``, ``buffer/`` or ``optim/``.
A trailing ``meta`` JSON blob (u32 length + bytes) carries the run config.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"CGACKPT\0"
VERSION = 1
_HEAD = struct.Struct("<8sHIqI")
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2, np.dtype("uint8"): 3}
_DTYPES = {v: k.newbyteorder("<") for k, v in _TAGS.items()}


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint."""


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    entries = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    entries += [(f"buffer/{k}", v) for k, v in ckpt.buffers.items()]
    entries += [(f"optim/{k}", v) for k, v in ckpt.optimizer.items()]
    chunks = [_HEAD.pack(MAGIC, VERSION, ckpt.epoch, ckpt.seed, len(entries))]
    for name, arr in entries:
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        tag = _TAGS[arr.dtype]
        raw_name = name.encode()
        chunks.append(struct.pack("<H", len(raw_name)) + raw_name)
        chunks.append(struct.pack(f"<BB{arr.ndim}I", tag, arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    meta = json.dumps(ckpt.meta, sort_keys=True).encode()
    chunks.append(struct.pack("<I", len(meta)) + meta)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEAD.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, epoch, seed, n = _HEAD.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unknown version {version}")
    pos = _HEAD.size
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "buffer": {}, "optim": {}}

    def need(k):
        if pos + k > len(raw):
            raise CheckpointError(f"{path}: truncated at byte {pos}, needed {k} more")

    for _ in range(n):
        need(2)
        (ln,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        need(ln + 2)
        name = raw[pos:pos + ln].decode()
        pos += ln
        tag, ndim = struct.unpack_from("<BB", raw, pos)
        pos += 2
        if tag not in _DTYPES:
            raise CheckpointError(f"{path}: entry {name!r} has unknown dtype tag {tag}")
        need(4 * ndim)
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        dt = _DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        need(nbytes)
        arr = np.frombuffer(raw, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape)
        pos += nbytes
        group, _, key = name.partition("/")
        if group not in groups:
            raise CheckpointError(f"{path}: entry {name!r} has unknown group")
        groups[group][key] = arr.astype(dt.newbyteorder("="))
    need(4)
    (ml,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    need(ml)
    meta = json.loads(raw[pos:pos + ml].decode()) if ml else {}
    return Checkpoint(groups["param"], groups["buffer"], groups["optim"], epoch, seed, meta)


def model_state(model) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    params = {k: v.value.copy() for k, v in model.named_parameters().items()}
    buffers = {k: v.copy() for k, v in model.named_buffers().items()}
    return params, buffers


def load_model_state(model, ckpt: Checkpoint) -> None:
    """Copy checkpoint arrays into ``model``; raise on any name or shape mismatch."""
    params = model.named_parameters()
    buffers = model.named_buffers()
    problems = []
    for k in sorted(set(params) ^ set(ckpt.params)):
        problems.append(f"{k}: {'missing from checkpoint' if k in params else 'not in model'}")
    for k in sorted(set(params) & set(ckpt.params)):
        if params[k].shape != ckpt.params[k].shape:
            problems.append(f"{k}: model {params[k].shape} vs checkpoint {ckpt.params[k].shape}")
    for k in sorted(set(buffers) & set(ckpt.buffers)):
        if buffers[k].shape != ckpt.buffers[k].shape:
            problems.append(f"{k}: model {buffers[k].shape} vs checkpoint {ckpt.buffers[k].shape}")
    if problems:
        raise CheckpointError("checkpoint does not match model: " + "; ".join(problems))
    for k, p in params.items():
        p.value[...] = ckpt.params[k]
    for k, b in buffers.items():
        if k in ckpt.buffers:
            b[...] = ckpt.buffers[k]
