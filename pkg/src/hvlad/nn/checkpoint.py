"""Binary checkpoint archive.

Layout (all integers little-endian)::

    b"HVCKPT1" u32 n_tensors  record*n_tensors      model tensors
    u32 step
    u32 n_tensors  record*n_tensors                 optimizer state

    record := u16 name_len, name (utf-8), u8 ndim, u32 dims[ndim], f32 payload

The optimizer block stores moments as ``adam.m/<param>`` and
``adam.v/<param>`` plus the 0-d scalars ``adam.t``, ``adam.lr``,
``adam.beta1``, ``adam.beta2`` and ``adam.eps``.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from ..errors import CheckpointFormatError
from .optim import AdamState

MAGIC = b"HVCKPT1"
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U8 = struct.Struct("<B")


def _write_records(f, tensors: dict):
    f.write(_U32.pack(len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        f.write(_U16.pack(len(raw)))
        f.write(raw)
        f.write(_U8.pack(arr.ndim))
        for d in arr.shape:
            f.write(_U32.pack(d))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(f"{self.path}: truncated checkpoint")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, s: struct.Struct):
        return s.unpack(self.take(s.size))[0]

    def records(self):
        out = {}
        for _ in range(self.unpack(_U32)):
            name = self.take(self.unpack(_U16)).decode("utf-8")
            ndim = self.unpack(_U8)
            shape = tuple(self.unpack(_U32) for _ in range(ndim))
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(self.take(4 * n), dtype="<f4").reshape(shape)
            out[name] = arr.astype(np.float32)
        return out


def save_checkpoint(path, tensors: dict, step: int, adam: AdamState | None = None) -> None:
    """Write atomically (temp file then rename)."""
    opt = {}
    if adam is not None:
        for k in ("t", "lr", "beta1", "beta2", "eps"):
            opt[f"adam.{k}"] = np.array(getattr(adam, k), dtype=np.float64)
        for name in adam.m:
            opt[f"adam.m/{name}"] = adam.m[name]
            opt[f"adam.v/{name}"] = adam.v[name]
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        _write_records(f, tensors)
        f.write(_U32.pack(step))
        _write_records(f, opt)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return ``(tensors, step, adam_state_or_None)``."""
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint archive")
    tensors = r.records()
    step = r.unpack(_U32)
    opt = r.records()
    if r.pos != len(data):
        raise CheckpointFormatError(f"{path}: trailing bytes after optimizer state")
    adam = None
    if opt:
        # hyperparameters round-trip through f32; callers resuming training
        # should take lr/betas from their own config and only t, m, v from here
        adam = AdamState(
            lr=float(np.float32(opt["adam.lr"])), beta1=float(np.float32(opt["adam.beta1"])),
            beta2=float(np.float32(opt["adam.beta2"])), eps=float(np.float32(opt["adam.eps"])),
            t=int(opt["adam.t"]))
        for key, arr in opt.items():
            if key.startswith("adam.m/"):
                adam.m[key[len("adam.m/"):]] = arr.copy()
            elif key.startswith("adam.v/"):
                adam.v[key[len("adam.v/"):]] = arr.copy()
    return tensors, step, adam
