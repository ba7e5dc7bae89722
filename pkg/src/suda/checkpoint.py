"""Binary checkpoints for full training state.

Layout (little-endian throughout):

    magic "SUDACKPT" (8 bytes)
    u16 version = 1
    u64 iteration
    u32 tensor count
    per tensor:
        u16 name length, UTF-8 name
        u8 rank, rank x u64 dims
        float64 payload
    u32 CRC-32 of every preceding byte

The tensor list covers the four model parameter groups plus both
optimizers' velocity slots, so a reloaded state continues bit-exactly.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from . import train
from .errors import ConsistencyError, FormatError

MAGIC = b"SUDACKPT"
VERSION = 1

_HEAD = struct.Struct("<8sHQI")
_NAME_LEN = struct.Struct("<H")
_RANK = struct.Struct("<B")

#: Prefixes for optimizer velocity entries; the remainder of the name is
#: the parameter the slot belongs to.
_GEN_PREFIX = "opt_gen."
_DISC_PREFIX = "opt_disc."


def _model_tensors(state: train.TrainState):
    return train._named_with_prefix([
        ("st1", state.st1), ("st2", state.st2),
        ("g", state.g), ("cd", state.cd),
    ])


def state_tensors(state: train.TrainState) -> dict:
    """Name -> float64 array for everything a resume needs, in canonical
    order (model groups first, then velocity slots sorted by name)."""
    out = {name: np.asarray(t.data, dtype=np.float64)
           for name, t in _model_tensors(state)}
    for prefix, opt in ((_GEN_PREFIX, state.opt_gen),
                        (_DISC_PREFIX, state.opt_disc)):
        for name in sorted(opt.velocity):
            out[prefix + name] = np.asarray(opt.velocity[name],
                                            dtype=np.float64)
    return out


def save_checkpoint(path: str, state: train.TrainState) -> None:
    tensors = state_tensors(state)
    parts = [_HEAD.pack(MAGIC, VERSION, state.iteration, len(tensors))]
    for name, arr in tensors.items():
        encoded = name.encode("utf-8")
        parts.append(_NAME_LEN.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_RANK.pack(arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    blob = b"".join(parts)
    blob += struct.pack("<I", zlib.crc32(blob))
    with open(path, "wb") as fh:
        fh.write(blob)


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(
                f"{self.path}: truncated while reading {what}", self.pos)
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out


def load_checkpoint(path: str) -> tuple[int, dict]:
    """Returns (iteration, name -> float64 array); verifies the CRC."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEAD.size + 4:
        raise FormatError(f"{path}: too short for a checkpoint", len(blob))
    body, (stored_crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    actual_crc = zlib.crc32(body)
    if actual_crc != stored_crc:
        raise FormatError(
            f"{path}: CRC mismatch, stored {stored_crc:#010x} but content "
            f"hashes to {actual_crc:#010x}", len(body))

    r = _Reader(body, path)
    magic, version, iteration, count = _HEAD.unpack(r.take(_HEAD.size, "header"))
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}", 8)

    tensors = {}
    for index in range(count):
        (name_len,) = _NAME_LEN.unpack(r.take(2, f"tensor {index} name length"))
        name_at = r.pos
        try:
            name = r.take(name_len, f"tensor {index} name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{path}: tensor {index} name is not UTF-8",
                              name_at) from None
        if name in tensors:
            raise FormatError(f"{path}: duplicate tensor {name!r}", name_at)
        (rank,) = _RANK.unpack(r.take(1, f"{name} rank"))
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, f"{name} dims"))
        size = 1
        for d in dims:
            size *= d
        payload = r.take(8 * size, f"{name} payload")
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    if r.pos != len(body):
        raise FormatError(f"{path}: {len(body) - r.pos} trailing bytes "
                          f"after the last tensor", r.pos)
    return iteration, tensors


def restore_state(config: train.TrainConfig, path: str) -> train.TrainState:
    """Fresh state with every tensor and velocity slot loaded from disk."""
    iteration, tensors = load_checkpoint(path)
    state = train.init_state(config)
    remaining = dict(tensors)
    for name, tensor in _model_tensors(state):
        if name not in remaining:
            raise ConsistencyError(
                f"{path}: checkpoint is missing tensor {name!r}")
        arr = remaining.pop(name)
        if arr.shape != tensor.data.shape:
            raise ConsistencyError(
                f"{path}: tensor {name!r} has shape {arr.shape} but the "
                f"configuration expects {tensor.data.shape}")
        tensor.data[...] = arr
    for full_name in list(remaining):
        if full_name.startswith(_GEN_PREFIX):
            opt, slot = state.opt_gen, full_name[len(_GEN_PREFIX):]
        elif full_name.startswith(_DISC_PREFIX):
            opt, slot = state.opt_disc, full_name[len(_DISC_PREFIX):]
        else:
            raise ConsistencyError(
                f"{path}: unexpected tensor {full_name!r} in checkpoint")
        opt.velocity[slot] = remaining.pop(full_name)
    state.iteration = iteration
    return state
