"""ParameterStore snapshots and the binary checkpoint format.

File layout (all integers little-endian)::

    magic   b"PETAUGCK"
    u32     format version
    u32     record count
    record* u16 name length, utf-8 name, u8 ndim, u32 * ndim shape,
            u8 trainable flag, float32 * prod(shape) data

Adapters share the format under ``peft/prefix/...`` or ``peft/lora/...``
names, so a backbone file and per-task adapter files can be mixed freely.
"""
from __future__ import annotations

import io
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError, DataError

MAGIC = b"PETAUGCK"
FORMAT_VERSION = 1


@dataclass
class StoredTensor:
    values: np.ndarray
    trainable: bool

    @property
    def shape(self):
        return self.values.shape


class ParameterStore:
    """Named float32 tensors with trainable flags.

    Snapshots copy on read, so a store is safe to hand to another thread.
    """

    def __init__(self, tensors=None):
        self._tensors = OrderedDict()
        for name, entry in (tensors or {}).items():
            self.add(name, entry.values, entry.trainable)

    def add(self, name, values, trainable=True):
        if name in self._tensors:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        self._tensors[name] = StoredTensor(np.array(values, dtype=np.float32, copy=True), bool(trainable))

    @classmethod
    def from_module(cls, module, prefix=""):
        store = cls()
        for name, p in module.named_parameters():
            store.add(prefix + name, p.detach().cpu().float().numpy(), p.requires_grad)
        return store

    def load_into(self, module, prefix="", strict=True):
        """Copy values (and trainable flags) into a module's parameters."""
        params = dict(module.named_parameters())
        wanted = {n[len(prefix):]: t for n, t in self._tensors.items() if n.startswith(prefix)}
        missing = set(params) - set(wanted)
        extra = set(wanted) - set(params)
        if strict and (missing or extra):
            raise ConfigurationError(f"checkpoint mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        with torch.no_grad():
            for name, entry in wanted.items():
                if name not in params:
                    continue
                p = params[name]
                if tuple(p.shape) != entry.shape:
                    raise ConfigurationError(f"shape mismatch for {name}: {tuple(p.shape)} vs {entry.shape}")
                p.copy_(torch.from_numpy(entry.values.copy()).to(p.dtype))
                p.requires_grad_(entry.trainable)
        return module

    def __contains__(self, name):
        return name in self._tensors

    def __getitem__(self, name):
        entry = self._tensors[name]
        return StoredTensor(entry.values.copy(), entry.trainable)

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def items(self):
        for name in self._tensors:
            yield name, self[name]

    def trainable_count(self):
        return sum(e.values.size for e in self._tensors.values() if e.trainable)

    def total_count(self):
        return sum(e.values.size for e in self._tensors.values())

    def merged(self, other: "ParameterStore"):
        out = ParameterStore(dict(self.items()))
        for name, entry in other.items():
            out.add(name, entry.values, entry.trainable)
        return out

    def to_bytes(self):
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<II", FORMAT_VERSION, len(self._tensors)))
        for name, entry in self._tensors.items():
            raw = name.encode("utf-8")
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<B", entry.values.ndim))
            buf.write(struct.pack(f"<{entry.values.ndim}I", *entry.values.shape))
            buf.write(struct.pack("<B", int(entry.trainable)))
            buf.write(entry.values.astype("<f4", copy=False).tobytes(order="C"))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data):
        view = memoryview(data)
        if bytes(view[:8]) != MAGIC:
            raise DataError("not a checkpoint file (bad magic)")
        version, count = struct.unpack_from("<II", view, 8)
        if version != FORMAT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        offset = 16
        store = cls()
        try:
            for _ in range(count):
                (n,) = struct.unpack_from("<H", view, offset)
                offset += 2
                name = bytes(view[offset:offset + n]).decode("utf-8")
                offset += n
                (ndim,) = struct.unpack_from("<B", view, offset)
                offset += 1
                shape = struct.unpack_from(f"<{ndim}I", view, offset)
                offset += 4 * ndim
                (flag,) = struct.unpack_from("<B", view, offset)
                offset += 1
                size = int(np.prod(shape, dtype=np.int64))
                values = np.frombuffer(view, dtype="<f4", count=size, offset=offset).reshape(shape)
                offset += 4 * size
                store.add(name, values, bool(flag))
        except (struct.error, ValueError) as exc:
            raise DataError(f"truncated or corrupt checkpoint: {exc}") from exc
        return store

    def save(self, path):
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def atomic_write_bytes(path, data: bytes):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))
