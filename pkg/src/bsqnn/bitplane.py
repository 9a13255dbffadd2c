"""Bit-plane packing for few-bit integer matrices.

Layout: each bit plane is a ``rows x words_per_row`` array of unsigned
machine words, packed along the reduction (depth) dimension LSB-first, so
element ``d`` of a row lives in word ``d // wordsize`` at bit
``d % wordsize``. Bits past ``depth`` are always zero.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

MAX_BITS = 8
WORD_DTYPES = {32: np.dtype(np.uint32), 64: np.dtype(np.uint64)}


class RangeError(ValueError):
    """An element does not fit the requested bit width."""


def default_wordsize() -> int:
    ws = int(os.environ.get("BSQNN_WORDSIZE", "64"))
    if ws not in WORD_DTYPES:
        raise ValueError(f"BSQNN_WORDSIZE must be 32 or 64, got {ws}")
    return ws


def _word_dtype(wordsize: int) -> np.dtype:
    try:
        return WORD_DTYPES[wordsize]
    except KeyError:
        raise ValueError(f"wordsize must be 32 or 64, got {wordsize}") from None


def words_for(nbits: int, wordsize: int) -> int:
    return -(-nbits // wordsize)


def value_range(bits: int, signed: bool) -> tuple[int, int]:
    if signed:
        return -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    return 0, (1 << bits) - 1


@dataclass(frozen=True, eq=False)
class BitMatrix:
    """One bit plane. ``data`` has shape ``(rows, words_per_row)``."""

    rows: int
    depth: int
    data: np.ndarray
    wordsize: int = 64

    def __post_init__(self):
        dt = _word_dtype(self.wordsize)
        if self.data.dtype != dt:
            raise TypeError(f"expected {dt} words, got {self.data.dtype}")
        if self.data.shape != (self.rows, self.words_per_row):
            raise ValueError(
                f"data shape {self.data.shape} != ({self.rows}, {self.words_per_row})"
            )
        self.data.flags.writeable = False

    @property
    def words_per_row(self) -> int:
        return words_for(self.depth, self.wordsize)

    def padding_popcount(self) -> int:
        """Number of set bits beyond ``depth``; zero for every valid matrix."""
        tail = self.depth % self.wordsize
        if tail == 0 or self.rows == 0:
            return 0
        mask = ~((1 << tail) - 1) & ((1 << self.wordsize) - 1)
        last = self.data[:, -1] & self.data.dtype.type(mask)
        return int(np.bitwise_count(last).sum())

    def to_bits(self) -> np.ndarray:
        """Unpack to a ``rows x depth`` uint8 array of 0/1."""
        as_bytes = self.data.astype(self.data.dtype.newbyteorder("<"), copy=False)
        flat = np.unpackbits(as_bytes.view(np.uint8).reshape(self.rows, -1),
                             axis=1, bitorder="little")
        return flat[:, : self.depth]

    def __eq__(self, other):
        if not isinstance(other, BitMatrix):
            return NotImplemented
        return (self.rows, self.depth, self.wordsize) == (
            other.rows, other.depth, other.wordsize
        ) and np.array_equal(self.data, other.data)

    @classmethod
    def from_bits(cls, bits: np.ndarray, wordsize: int | None = None) -> "BitMatrix":
        """Pack a 2-D array of 0/1 values along its last axis."""
        wordsize = wordsize or default_wordsize()
        dt = _word_dtype(wordsize)
        bits = np.asarray(bits)
        if bits.ndim != 2:
            raise ValueError("bit array must be 2-D")
        rows, depth = bits.shape
        wpr = words_for(depth, wordsize)
        padded = np.zeros((rows, wpr * wordsize), dtype=np.uint8)
        padded[:, :depth] = bits != 0
        packed = np.packbits(padded, axis=1, bitorder="little")
        words = packed.view(dt.newbyteorder("<")).astype(dt)
        return cls(rows, depth, words.reshape(rows, wpr), wordsize)


@dataclass(frozen=True, eq=False)
class BitPlaneMatrix:
    """A ``bits``-wide integer matrix held as ``bits`` BitMatrix planes.

    Plane ``i`` carries significance ``2**i``; when ``signed`` the top plane
    carries ``-2**(bits-1)`` (two's complement).
    """

    planes: tuple[BitMatrix, ...]
    signed: bool = False

    def __post_init__(self):
        if not 1 <= len(self.planes) <= MAX_BITS:
            raise ValueError(f"bits must be in 1..{MAX_BITS}, got {len(self.planes)}")
        p0 = self.planes[0]
        for p in self.planes[1:]:
            if (p.rows, p.depth, p.wordsize) != (p0.rows, p0.depth, p0.wordsize):
                raise ValueError("all planes must share rows, depth and wordsize")

    @property
    def bits(self) -> int:
        return len(self.planes)

    @property
    def rows(self) -> int:
        return self.planes[0].rows

    @property
    def depth(self) -> int:
        return self.planes[0].depth

    @property
    def wordsize(self) -> int:
        return self.planes[0].wordsize

    @property
    def words_per_row(self) -> int:
        return self.planes[0].words_per_row

    def plane_weight(self, i: int) -> int:
        w = 1 << i
        return -w if self.signed and i == self.bits - 1 else w

    def footprint_bits(self) -> int:
        return self.bits * self.rows * self.words_per_row * self.wordsize

    def __eq__(self, other):
        if not isinstance(other, BitPlaneMatrix):
            return NotImplemented
        return self.signed == other.signed and self.planes == other.planes


def pack(m, bits: int, signed: bool = False, wordsize: int | None = None) -> BitPlaneMatrix:
    """Split an integer matrix into bit planes packed along its columns."""
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    if not 1 <= bits <= MAX_BITS:
        raise ValueError(f"bits must be in 1..{MAX_BITS}, got {bits}")
    if m.size and not np.issubdtype(m.dtype, np.integer):
        if not np.all(m == np.round(m)):
            raise TypeError("pack expects integer-valued matrices")
    m = m.astype(np.int64)
    lo, hi = value_range(bits, signed)
    bad = np.argwhere((m < lo) | (m > hi))
    if len(bad):
        r, c = (int(v) for v in bad[0])
        raise RangeError(
            f"element {int(m[r, c])} at ({r}, {c}) outside [{lo}, {hi}] "
            f"for {bits}-bit {'signed' if signed else 'unsigned'}"
        )
    enc = m & ((1 << bits) - 1)
    planes = tuple(BitMatrix.from_bits((enc >> i) & 1, wordsize) for i in range(bits))
    return BitPlaneMatrix(planes, signed)


def unpack(p: BitPlaneMatrix) -> np.ndarray:
    out = np.zeros((p.rows, p.depth), dtype=np.int64)
    for i, plane in enumerate(p.planes):
        out += p.plane_weight(i) * plane.to_bits().astype(np.int64)
    return out


@dataclass(frozen=True, eq=False)
class InterleavedTensor:
    """Bit-serial, channel-interleaved activations.

    ``data`` has shape ``(bits, H, W, words_per_pixel)``: bit position major,
    then row-major pixels; each pixel holds bit ``j`` of every channel,
    channel ``c`` at word ``c // wordsize`` bit ``c % wordsize``.
    """

    data: np.ndarray
    channels: int
    wordsize: int = 64

    @property
    def bits(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def words_per_pixel(self) -> int:
        return self.data.shape[3]


def pack_interleaved(t, bits: int, wordsize: int | None = None) -> InterleavedTensor:
    """Pack an unsigned ``H x W x C`` activation tensor into interleaved form."""
    wordsize = wordsize or default_wordsize()
    t = np.asarray(t)
    if t.ndim != 3:
        raise ValueError(f"expected an H x W x C tensor, got shape {t.shape}")
    h, w, c = t.shape
    lo, hi = value_range(bits, False)
    bad = np.argwhere((t < lo) | (t > hi))
    if len(bad):
        pos = tuple(int(v) for v in bad[0])
        raise RangeError(f"activation {int(t[pos])} at {pos} outside [{lo}, {hi}]")
    dt = _word_dtype(wordsize)
    wpp = words_for(c, wordsize)
    t = t.astype(np.int64)
    padded = np.zeros((bits, h, w, wpp * wordsize), dtype=np.uint8)
    for j in range(bits):
        padded[j, :, :, :c] = (t >> j) & 1
    packed = np.packbits(padded, axis=-1, bitorder="little")
    words = packed.view(dt.newbyteorder("<")).astype(dt).reshape(bits, h, w, wpp)
    return InterleavedTensor(words, c, wordsize)


def unpack_interleaved(it: InterleavedTensor) -> np.ndarray:
    data = it.data.astype(it.data.dtype.newbyteorder("<"), copy=False)
    flat = np.unpackbits(data.view(np.uint8), axis=-1, bitorder="little")
    planes = flat[..., : it.channels].astype(np.int64)
    weights = (1 << np.arange(it.bits, dtype=np.int64)).reshape(-1, 1, 1, 1)
    return (planes * weights).sum(axis=0)
