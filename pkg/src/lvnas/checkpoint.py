"""Binary checkpoints: config text plus named float64 tensors.

Layout (all integers little-endian)::

    b"LVSN"                      magic
    u32 version                  currently 1
    u32 len, bytes               UTF-8 config text
    u32 count                    number of tensors
    per tensor:
        u32 len, bytes           UTF-8 name
        u32 rank
        u64 * rank               extents
        f64 * prod(extents)      row-major payload
    u64 checksum                 CRC-64/WE of every preceding byte

CRC-64/WE: polynomial 0x42F0E1EBA9EA3693, init and xorout 0xFFFFFFFFFFFFFFFF,
no reflection; check value for b"123456789" is 0x62EC59E3F1A4F00A.
"""

from __future__ import annotations

import math
import os
import struct
from pathlib import Path
from typing import Mapping

import crcmod.predefined
import numpy as np

MAGIC = b"LVSN"
VERSION = 1
_crc64 = crcmod.predefined.mkCrcFun("crc-64-we")


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


def crc64(data: bytes) -> int:
    return _crc64(data)


def encode_checkpoint(config_text: str, tensors: Mapping[str, np.ndarray]) -> bytes:
    cfg = config_text.encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8", order="C")  # keeps rank 0, unlike ascontiguousarray
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", crc64(body))


def save_checkpoint(path: str | Path, config_text: str, tensors: Mapping[str, np.ndarray]) -> None:
    data = encode_checkpoint(config_text, tensors)
    tmp = Path(f"{path}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"checkpoint ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def _walk(data: bytes) -> tuple[str, dict[str, np.ndarray], int]:
    r = _Reader(data)
    r.take(8)
    config = r.take(r.u32()).decode("utf-8", errors="replace")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8", errors="replace")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        count = math.prod(shape)
        arr = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape)
        tensors[name] = arr.astype(np.float64)
    return config, tensors, r.pos


def decode_checkpoint(data: bytes) -> tuple[str, dict[str, np.ndarray]]:
    """Parse and verify a checkpoint.

    A file shorter than the layout its own header declares raises
    :class:`TruncatedError`; any other disagreement with the trailing CRC
    raises :class:`ChecksumError`.
    """
    if len(data) < 8:
        if data[: min(4, len(data))] != MAGIC[: min(4, len(data))]:
            raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
        raise TruncatedError("checkpoint shorter than its header")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    version = struct.unpack("<I", data[4:8])[0]
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this reader handles {VERSION}")
    try:
        config, tensors, end = _walk(data)
    except (struct.error, ValueError, MemoryError) as exc:
        raise ChecksumError(f"checkpoint layout is inconsistent: {exc}") from exc
    if end + 8 > len(data):
        raise TruncatedError(f"checkpoint holds {len(data)} bytes, layout needs {end + 8}")
    stored = struct.unpack("<Q", data[end : end + 8])[0]
    if crc64(data[:end]) != stored or end + 8 != len(data):
        raise ChecksumError("checkpoint checksum mismatch")
    return config, tensors


def load_checkpoint(path: str | Path) -> tuple[str, dict[str, np.ndarray]]:
    return decode_checkpoint(Path(path).read_bytes())
