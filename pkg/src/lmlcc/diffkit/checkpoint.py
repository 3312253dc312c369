"""Versioned binary model checkpoints.

Layout (all little-endian):

    magic   b"LMLCCKPT"
    u32     format version (currently 1)
    32B     sha256 digest of the config text
    u32     config text length, then utf-8 config text
    3 named-tensor sections: parameters, auxiliary state (batch-norm
    running statistics), optimizer state. Each section is a u32 count
    followed by records:

    u16 name length, utf-8 name
    u8  dtype code (0 = <f4, 1 = <f8, 2 = <i8)
    u8  ndim, then u32 extents
    raw array bytes

Round trips are bit-exact, which the training contract relies on.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DataError

MAGIC = b"LMLCCKPT"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}


@dataclass
class Checkpoint:
    config_text: str
    params: dict[str, np.ndarray]
    aux: dict[str, np.ndarray] = field(default_factory=dict)
    optim: dict[str, np.ndarray] = field(default_factory=dict)


def _write_section(fh, tensors: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        if dtype not in _CODES:
            raise DataError(f"checkpoint tensor '{name}' has unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<H", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<BB", _CODES[dtype], arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype(dtype, copy=False).tobytes())


def _read_section(data: bytes, pos: int) -> tuple[dict[str, np.ndarray], int]:
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        code, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        if code not in _DTYPES:
            raise DataError(f"checkpoint tensor '{name}' has unknown dtype code {code}")
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        arr = np.frombuffer(data, dtype=dtype, count=max(nbytes // dtype.itemsize, 1), offset=pos)
        pos += nbytes
        tensors[name] = arr.reshape(shape).copy()
    return tensors, pos


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    config_bytes = ckpt.config_text.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(hashlib.sha256(config_bytes).digest())
        fh.write(struct.pack("<I", len(config_bytes)))
        fh.write(config_bytes)
        _write_section(fh, ckpt.params)
        _write_section(fh, ckpt.aux)
        _write_section(fh, ckpt.optim)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    digest = data[pos : pos + 32]
    pos += 32
    (config_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    config_bytes = data[pos : pos + config_len]
    pos += config_len
    if hashlib.sha256(config_bytes).digest() != digest:
        raise DataError(f"{path}: config digest mismatch (corrupt checkpoint)")
    params, pos = _read_section(data, pos)
    aux, pos = _read_section(data, pos)
    optim, pos = _read_section(data, pos)
    return Checkpoint(
        config_text=config_bytes.decode("utf-8"), params=params, aux=aux, optim=optim
    )
