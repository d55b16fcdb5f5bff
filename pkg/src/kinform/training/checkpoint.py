"""Binary checkpoints: config digest, JSON metadata, named KTNS tensor table, rng state.

Layout (little-endian):

    b"KCHK" | u32 version | 64 ascii bytes config digest
    u32 n  | n bytes JSON metadata
    u32 count | count x (u16 name length, utf-8 name, KTNS blob)
    u32 n  | n bytes JSON rng state
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..autograd.serialize import FormatError, array_from_bytes, tensor_to_bytes

MAGIC = b"KCHK"
VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    epoch: int
    lr: float
    global_step: int
    tensors: dict  # name -> ndarray; model params plus "opt/<name>" velocities
    loss_history: list = field(default_factory=list)
    last_drop: int = 0
    thresholds: dict = field(default_factory=dict)  # class tag -> cosine threshold
    meta: dict = field(default_factory=dict)  # input mode, dims, identities
    rng_state: dict = field(default_factory=dict)

    @property
    def config_digest(self) -> str:
        from .config import TrainConfig

        return TrainConfig.from_dict(self.config).digest()

    def params(self) -> dict:
        return {k: v for k, v in self.tensors.items() if not k.startswith("opt/")}

    def velocities(self) -> dict:
        return {k[4:]: v for k, v in self.tensors.items() if k.startswith("opt/")}

    def to_bytes(self) -> bytes:
        meta = {
            "config": self.config,
            "epoch": self.epoch,
            "lr": self.lr,
            "global_step": self.global_step,
            "loss_history": self.loss_history,
            "last_drop": self.last_drop,
            "thresholds": self.thresholds,
            "meta": self.meta,
        }
        parts = [MAGIC, struct.pack("<I", VERSION), self.config_digest.encode("ascii")]
        parts.append(_blob(json.dumps(meta, sort_keys=True).encode()))
        parts.append(struct.pack("<I", len(self.tensors)))
        for name in sorted(self.tensors):
            raw = name.encode()
            parts.append(struct.pack("<H", len(raw)) + raw + tensor_to_bytes(self.tensors[name]))
        parts.append(_blob(json.dumps(self.rng_state, sort_keys=True).encode()))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:4] != MAGIC:
            raise FormatError("not a checkpoint (bad magic)")
        (version,) = struct.unpack_from("<I", buf, 4)
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        digest = buf[8:72].decode("ascii")
        meta, off = _read_blob(buf, 72)
        meta = json.loads(meta)
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            name = buf[off + 2:off + 2 + n].decode()
            arr, off = array_from_bytes(buf, off + 2 + n)
            tensors[name] = arr
        rng, off = _read_blob(buf, off)
        if off != len(buf):
            raise FormatError("trailing bytes after checkpoint")
        ck = cls(config=meta["config"], epoch=meta["epoch"], lr=meta["lr"], global_step=meta["global_step"],
                 tensors=tensors, loss_history=meta["loss_history"], last_drop=meta["last_drop"],
                 thresholds=meta["thresholds"], meta=meta["meta"], rng_state=json.loads(rng))
        if ck.config_digest != digest:
            raise FormatError("config digest does not match the stored config")
        return ck

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()


def _blob(data: bytes) -> bytes:
    return struct.pack("<I", len(data)) + data


def _read_blob(buf: bytes, off: int) -> tuple:
    if off + 4 > len(buf):
        raise FormatError("truncated checkpoint")
    (n,) = struct.unpack_from("<I", buf, off)
    if off + 4 + n > len(buf):
        raise FormatError("truncated checkpoint")
    return buf[off + 4:off + 4 + n], off + 4 + n


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


def save_checkpoint(ck: Checkpoint, path) -> Path:
    return ck.save(path)


def arrays_equal(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def latest(paths) -> Optional[Path]:
    paths = sorted(Path(p) for p in paths)
    return paths[-1] if paths else None
