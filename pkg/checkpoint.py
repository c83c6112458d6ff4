#!/usr/bin/env python3
"""
Binary checkpoint container.

Layout (little-endian throughout):
  "MLTN"             4-byte magic
  version            u32
  config             u32 byte length + UTF-8 INI text
  record count       u32
  per record         u16 name length, UTF-8 name, u8 rank, rank x u32 extents,
                     f64 payload in row-major order
  crc32              u32 over every preceding byte
"""

import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from errors import FormatError, IntegrityError
from optim import AdamState
from train_config import TrainConfig, config_from_ini_text, config_to_ini

MAGIC = b"MLTN"
VERSION = 1

PathLike = Union[str, Path]


@dataclass
class Checkpoint:
    config: TrainConfig
    params: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)
    adam: Optional[AdamState] = None
    epoch: int = 0
    best_metric: float = float("nan")
    input_shape: Tuple[int, int] = (0, 0)
    version: int = VERSION


def _records(ckpt: Checkpoint) -> List[Tuple[str, np.ndarray]]:
    records = [(f"param.{k}", v) for k, v in ckpt.params.items()]
    records += [(f"buffer.{k}", v) for k, v in ckpt.buffers.items()]
    if ckpt.adam is not None:
        records += [(f"adam.m.{k}", v) for k, v in ckpt.adam.m.items()]
        records += [(f"adam.v.{k}", v) for k, v in ckpt.adam.v.items()]
        records.append(("meta.adam_step", np.array([ckpt.adam.t], dtype=np.float64)))
    records.append(("meta.epoch", np.array([ckpt.epoch], dtype=np.float64)))
    records.append(("meta.best_metric", np.array([ckpt.best_metric], dtype=np.float64)))
    records.append(("meta.input_shape", np.array(ckpt.input_shape, dtype=np.float64)))
    return records


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    config_text = config_to_ini(ckpt.config).encode("utf-8")
    records = _records(ckpt)
    parts = [MAGIC, struct.pack("<I", ckpt.version), struct.pack("<I", len(config_text)), config_text]
    parts.append(struct.pack("<I", len(records)))
    for name, array in records:
        arr = np.asarray(array, dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise IntegrityError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 8:
        raise IntegrityError("checkpoint truncated before its header")
    if data[:4] != MAGIC:
        raise FormatError(f"not a checkpoint: magic {data[:4]!r}")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}, expected {VERSION}")
    if len(data) < 12:
        raise IntegrityError("checkpoint truncated before its checksum")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise IntegrityError("checkpoint checksum mismatch (truncated or corrupted file)")

    reader = _Reader(body)
    reader.take(8)
    (config_len,) = reader.unpack("<I")
    config = config_from_ini_text(reader.take(config_len).decode("utf-8"), source="checkpoint")
    (count,) = reader.unpack("<I")
    values: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<B")
        shape = reader.unpack(f"<{rank}I")
        size = int(np.prod(shape)) if rank else 1
        values[name] = np.frombuffer(reader.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if reader.pos != len(body):
        raise IntegrityError(f"{len(body) - reader.pos} trailing bytes after the last record")

    def group(prefix: str) -> Dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in values.items() if k.startswith(prefix)}

    adam = None
    if "meta.adam_step" in values:
        adam = AdamState(lr=config.resolved_lr, t=int(values["meta.adam_step"][0]), m=group("adam.m."), v=group("adam.v."))
    return Checkpoint(
        config=config,
        params=group("param."),
        buffers=group("buffer."),
        adam=adam,
        epoch=int(values["meta.epoch"][0]) if "meta.epoch" in values else 0,
        best_metric=float(values["meta.best_metric"][0]) if "meta.best_metric" in values else float("nan"),
        input_shape=tuple(int(v) for v in values["meta.input_shape"]) if "meta.input_shape" in values else (0, 0),
        version=version,
    )


def save_checkpoint(path: PathLike, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, path)
    return path


def load_checkpoint(path: PathLike) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())
