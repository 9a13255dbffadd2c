"""Packed-weight container files (``.bsqw``).

Little-endian layout::

    magic    4s   b"BSQW"
    version  u16  1
    wordsize u8   32 | 64
    bits     u8
    signed   u8   0 | 1
    reserved u8   0
    rows     u32
    depth    u32
    planes   bits x rows x words_per_row words, plane 0 first
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .bitplane import WORD_DTYPES, BitMatrix, BitPlaneMatrix, words_for

MAGIC = b"BSQW"
VERSION = 1
HEADER = struct.Struct("<4sHBBBBII")


class ContainerError(ValueError):
    pass


def dumps(p: BitPlaneMatrix) -> bytes:
    head = HEADER.pack(MAGIC, VERSION, p.wordsize, p.bits, int(p.signed), 0, p.rows, p.depth)
    le = WORD_DTYPES[p.wordsize].newbyteorder("<")
    body = b"".join(plane.data.astype(le).tobytes() for plane in p.planes)
    return head + body


def loads(buf: bytes) -> BitPlaneMatrix:
    if len(buf) < HEADER.size:
        raise ContainerError("truncated header")
    magic, version, wordsize, bits, signed, _, rows, depth = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    if wordsize not in WORD_DTYPES:
        raise ContainerError(f"bad wordsize {wordsize}")
    if signed not in (0, 1) or bits < 1:
        raise ContainerError("corrupt header")
    dt = WORD_DTYPES[wordsize]
    wpr = words_for(depth, wordsize)
    n = rows * wpr
    expected = HEADER.size + bits * n * dt.itemsize
    if len(buf) != expected:
        raise ContainerError(f"expected {expected} bytes, got {len(buf)}")
    words = np.frombuffer(buf, dtype=dt.newbyteorder("<"), offset=HEADER.size)
    words = words.astype(dt).reshape(bits, rows, wpr)
    planes = tuple(BitMatrix(rows, depth, words[i].copy(), wordsize) for i in range(bits))
    for i, p in enumerate(planes):
        if p.padding_popcount():
            raise ContainerError(f"plane {i} has nonzero padding bits")
    return BitPlaneMatrix(planes, bool(signed))


def save(path, p: BitPlaneMatrix) -> None:
    Path(path).write_bytes(dumps(p))


def load(path) -> BitPlaneMatrix:
    return loads(Path(path).read_bytes())
