"""Binary checkpoint format.

Layout (little-endian)::

    b"MGCKPT1\\0"
    u64 metadata length, UTF-8 JSON metadata
    u32 tensor count, then per tensor:
        u16 name length, name, u8 ndim, ndim x u64 extents, float64 data
    u64 Adam step count, f64 lr, beta1, beta2, eps
    first moments then second moments, one float64 block per tensor in order

Every float is written with its exact bits, so save/load is lossless.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam
from .errors import DataError

MAGIC = b"MGCKPT1\0"


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    adam_step: int = 0
    adam_hparams: tuple[float, float, float, float] = (1e-3, 0.9, 0.999, 1e-8)
    first_moments: dict[str, np.ndarray] = field(default_factory=dict)
    second_moments: dict[str, np.ndarray] = field(default_factory=dict)


def _block(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_checkpoint(path, named_params, optimizer: Adam | None = None, meta: dict | None = None) -> None:
    named_params = list(named_params)
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(named_params)))
        for name, p in named_params:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}Q", *p.data.shape))
            fh.write(_block(p.data))
        if optimizer is None:
            fh.write(struct.pack("<Q4d", 0, 1e-3, 0.9, 0.999, 1e-8))
            moments = [np.zeros_like(p.data) for _, p in named_params] * 2
        else:
            fh.write(struct.pack("<Q4d", optimizer.t, optimizer.lr, optimizer.beta1, optimizer.beta2, optimizer.eps))
            moments = list(optimizer.m) + list(optimizer.v)
        for m in moments:
            fh.write(_block(m))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataError("truncated checkpoint", path=self.path)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, shape) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.take(len(MAGIC)) != MAGIC:
        raise DataError("not a checkpoint (bad magic)", path=path)
    (meta_len,) = r.unpack("<Q")
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        params[name] = r.floats(shape)
    step, lr, b1, b2, eps = r.unpack("<Q4d")
    first = {name: r.floats(a.shape) for name, a in params.items()}
    second = {name: r.floats(a.shape) for name, a in params.items()}
    if r.pos != len(r.data):
        raise DataError("trailing bytes after checkpoint body", path=path)
    return Checkpoint(params, meta, step, (lr, b1, b2, eps), first, second)


def restore_optimizer(ckpt: Checkpoint, named_params, clip_norm: float | None = None) -> Adam:
    """Adam over ``named_params`` with the saved step count and moments."""
    named_params = list(named_params)
    lr, b1, b2, eps = ckpt.adam_hparams
    opt = Adam([p for _, p in named_params], lr=lr, beta1=b1, beta2=b2, eps=eps, clip_norm=clip_norm)
    opt.t = ckpt.adam_step
    opt.m = [ckpt.first_moments[name].copy() for name, _ in named_params]
    opt.v = [ckpt.second_moments[name].copy() for name, _ in named_params]
    return opt
