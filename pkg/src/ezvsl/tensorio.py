"""Binary tensor file format shared by checkpoints, images and map dumps.

Layout (all little-endian)::

    b"EZVL"  u32 version (=1)  u32 entry_count
    per entry:
        u16 name_length  name (UTF-8)  u8 ndim  u32 dims[ndim]
        f32 payload, row-major, prod(dims) values
"""

from __future__ import annotations

import hashlib
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

MAGIC = b"EZVL"
VERSION = 1
CONFIG_HASH_KEY = "meta.config_hash"


class TensorFileError(ValueError):
    """Base class for malformed tensor files."""


class BadMagicError(TensorFileError):
    pass


class UnsupportedVersionError(TensorFileError):
    pass


class TruncatedFileError(TensorFileError):
    pass


class DuplicateNameError(TensorFileError):
    pass


def encode_tensors(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    seen = set()
    for name, arr in arrays.items():
        if name in seen:
            raise DuplicateNameError(f"duplicate entry name {name!r}")
        seen.add(name)
        a = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise TensorFileError(f"entry name too long: {name[:40]}...")
        if a.ndim > 0xFF:
            raise TensorFileError(f"{name}: too many dimensions")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a).tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    view = memoryview(buf)
    pos = 0

    def take(n: int, what: str):
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedFileError(
                f"truncated while reading {what}: need {n} bytes at offset {pos}, "
                f"file has {len(view)}"
            )
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise BadMagicError("not an EZVL tensor file (bad magic)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for i in range(count):
        (nlen,) = struct.unpack("<H", take(2, f"entry {i} name length"))
        try:
            name = bytes(take(nlen, f"entry {i} name")).decode("utf-8")
        except UnicodeDecodeError as e:
            raise TensorFileError(f"entry {i}: name is not UTF-8") from e
        if name in out:
            raise DuplicateNameError(f"duplicate entry name {name!r}")
        (ndim,) = struct.unpack("<B", take(1, f"{name} ndim"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name} dims"))
        size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        payload = take(4 * size, f"{name} payload")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if pos != len(view):
        raise TensorFileError(f"{len(view) - pos} trailing bytes after last entry")
    return out


def save_tensors(path, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_tensors(arrays))


def load_tensors(path) -> "OrderedDict[str, np.ndarray]":
    return decode_tensors(Path(path).read_bytes())


# -- config hashes ride along as byte-valued float entries ---------------------------------


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def hash_to_array(h: str) -> np.ndarray:
    return np.frombuffer(bytes.fromhex(h), dtype=np.uint8).astype(np.float32)


def array_to_hash(a: np.ndarray) -> str:
    return bytes(int(v) for v in np.asarray(a).ravel()).hex()


class Checkpoint:
    """Named float32 arrays plus the hash of the config that produced them."""

    def __init__(self, arrays: Mapping[str, np.ndarray], config_hash: str = ""):
        self.arrays: Dict[str, np.ndarray] = OrderedDict(
            (k, np.asarray(v, dtype=np.float32)) for k, v in arrays.items()
        )
        self.config_hash = config_hash

    def to_bytes(self) -> bytes:
        entries = OrderedDict(self.arrays)
        if self.config_hash:
            entries[CONFIG_HASH_KEY] = hash_to_array(self.config_hash)
        return encode_tensors(entries)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        arrays = decode_tensors(buf)
        h = arrays.pop(CONFIG_HASH_KEY, None)
        return cls(arrays, array_to_hash(h) if h is not None else "")


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())
