"""Binary and bit-serial GEMM kernels, plus integer reference products.

Both operands of the binary kernels are packed along depth, so ``A`` is the
transposed activation matrix (``cols x depth``) and the result is
``res[r, c] += alpha * <W[r], A[c]>``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .bitplane import BitMatrix, BitPlaneMatrix

# Upper bound on the (rows x cols x words) temporary built per vectorized step.
_CHUNK_WORDS = 1 << 14
_TILE_ELEMS = 1 << 14  # rows x cols elements per temporary tile
_FLUSH_WORDS = (1 << 16) // 64 - 1  # uint16 tile cannot overflow within this many words
L1_BYTES = 32 * 1024


class ShapeError(ValueError):
    pass


class BlockingError(ValueError):
    pass


Kernel = Callable[[BitMatrix, BitMatrix, np.ndarray, int], None]


def _check_operands(W: BitMatrix, A: BitMatrix, res: np.ndarray) -> None:
    if W.depth != A.depth:
        raise ShapeError(f"depth mismatch: W has {W.depth}, A has {A.depth}")
    if W.wordsize != A.wordsize:
        raise ShapeError(f"wordsize mismatch: {W.wordsize} vs {A.wordsize}")
    if res.shape != (W.rows, A.rows):
        raise ShapeError(f"res shape {res.shape} != ({W.rows}, {A.rows})")
    if not np.issubdtype(res.dtype, np.signedinteger) or res.dtype.itemsize < 4:
        raise TypeError(f"accumulator must be a signed integer of >= 32 bits, got {res.dtype}")


def _row_ranges(n: int, parts: int) -> list[tuple[int, int]]:
    parts = max(1, min(parts, n))
    edges = np.linspace(0, n, parts + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _and_counts_into(w: np.ndarray, a: np.ndarray, out: np.ndarray, alpha: int) -> None:
    """out += alpha * popcount(w[r] & a[c]) summed over words.

    Loops over word positions so that every numpy call works on a full
    rows x cols tile; per-word counts (<= 64) collect in a uint16 tile that
    is flushed before it could overflow.
    """
    rows, cols, wpr = w.shape[0], a.shape[0], w.shape[1]
    step = max(1, min(rows, _TILE_ELEMS // max(1, cols)))
    if wpr == 1:
        # single word per row: count straight into the accumulator
        for r0 in range(0, rows, step):
            c = np.bitwise_count(np.bitwise_and(w[r0:r0 + step], a[:, 0]))
            out[r0:r0 + step] += c if alpha == 1 else alpha * c.astype(np.int64)
        return
    wt, at = np.ascontiguousarray(w.T), np.ascontiguousarray(a.T)
    buf = np.empty((step, cols), dtype=w.dtype)
    cnt = np.empty((step, cols), dtype=np.uint8)
    acc = np.empty((step, cols), dtype=np.uint16)
    for r0 in range(0, rows, step):
        n = min(step, rows - r0)
        b, c, s = buf[:n], cnt[:n], acc[:n]
        for j0 in range(0, wpr, _FLUSH_WORDS):
            j1 = min(wpr, j0 + _FLUSH_WORDS)
            for j in range(j0, j1):
                np.bitwise_and(wt[j, r0:r0 + n, None], at[j, None, :], out=b)
                np.bitwise_count(b, out=c)
                if j == j0:
                    s[...] = c
                else:
                    s += c
            if alpha == 1:
                out[r0:r0 + n] += s
            else:
                out[r0:r0 + n] += alpha * s.astype(np.int64)


def _run_row_parallel(fn, rows: int, threads: int) -> None:
    ranges = _row_ranges(rows, threads)
    if len(ranges) <= 1:
        for r0, r1 in ranges:
            fn(r0, r1)
        return
    with ThreadPoolExecutor(max_workers=len(ranges)) as pool:
        for f in [pool.submit(fn, r0, r1) for r0, r1 in ranges]:
            f.result()


def binary_gemm_and(W: BitMatrix, A: BitMatrix, res: np.ndarray, alpha: int = 1,
                    *, threads: int = 1) -> None:
    """AND-popcount GEMM over {0, 1} matrices; accumulates into ``res``.

    Relies on zero padding bits, so the last word is not masked. With
    ``threads > 1`` disjoint row ranges of ``res`` are filled concurrently.
    """
    _check_operands(W, A, res)
    alpha = int(alpha)
    if alpha == 0 or W.rows == 0 or A.rows == 0:
        return
    wd, ad = W.data, A.data

    def part(r0, r1):
        _and_counts_into(wd[r0:r1], ad, res[r0:r1], alpha)

    _run_row_parallel(part, W.rows, threads)


def binary_gemm_xnor(W: BitMatrix, A: BitMatrix, res: np.ndarray, alpha: int = 1) -> None:
    """XNOR-popcount GEMM over bipolar matrices (bit 1 is +1, bit 0 is -1)."""
    _check_operands(W, A, res)
    alpha = int(alpha)
    depth, ws = W.depth, W.wordsize
    dt = W.data.dtype.type
    mask = np.full(W.words_per_row, dt(np.iinfo(W.data.dtype).max), dtype=W.data.dtype)
    tail = depth % ws
    if tail:
        # padding bits agree (both zero) and must not count
        mask[-1] = dt((1 << tail) - 1)
    rows, cols, wpr = W.rows, A.rows, W.words_per_row
    step = max(1, min(rows, _CHUNK_WORDS // max(1, cols * wpr)))
    for r0 in range(0, rows, step):
        x = np.bitwise_xor(W.data[r0:r0 + step, None, :], A.data[None, :, :])
        agree = np.bitwise_and(np.invert(x), mask)
        cnt = np.bitwise_count(agree).sum(axis=2, dtype=np.int64)
        res[r0:r0 + step] += alpha * (2 * cnt - depth)


@dataclass(frozen=True)
class BlockingParams:
    """L1 tile sizes (rows, cols in elements; depth in words) and register tile."""

    row_block: int = 64
    col_block: int = 64
    depth_block: int = 16
    reg_rows: int = 4
    reg_cols: int = 4

    def validate(self, words_per_row: int) -> None:
        for name in ("row_block", "col_block", "depth_block", "reg_rows", "reg_cols"):
            if getattr(self, name) < 1:
                raise BlockingError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.depth_block > words_per_row:
            raise BlockingError(
                f"depth_block {self.depth_block} exceeds words_per_row {words_per_row}"
            )


def default_blocking(words_per_row: int, wordsize: int = 64, l1_bytes: int = L1_BYTES,
                     row_block: int = 64, col_block: int = 64) -> BlockingParams:
    """Give the depth tile half of L1, shared by the row_block + col_block rows."""
    half_l1_words = l1_bytes // (wordsize // 8) // 2
    depth_block = half_l1_words // (row_block + col_block)
    depth_block = max(1, min(words_per_row, depth_block))
    return BlockingParams(row_block, col_block, depth_block)


def binary_gemm_and_blocked(W: BitMatrix, A: BitMatrix, res: np.ndarray, alpha: int = 1,
                            params: BlockingParams | None = None) -> None:
    """Cache-blocked AND-popcount GEMM; bit-identical to :func:`binary_gemm_and`."""
    _check_operands(W, A, res)
    if params is None:
        params = default_blocking(W.words_per_row, W.wordsize)
    params.validate(W.words_per_row)
    alpha = int(alpha)
    M, N, wpr = W.rows, A.rows, W.words_per_row
    rb, cb, db = params.row_block, params.col_block, params.depth_block
    for r0 in range(0, M, rb):
        r1 = min(M, r0 + rb)
        for c0 in range(0, N, cb):
            c1 = min(N, c0 + cb)
            for d0 in range(0, wpr, db):
                d1 = min(wpr, d0 + db)
                # register tiles inside the L1 tile
                for rr in range(r0, r1, params.reg_rows):
                    rr1 = min(r1, rr + params.reg_rows)
                    for cc in range(c0, c1, params.reg_cols):
                        cc1 = min(c1, cc + params.reg_cols)
                        _and_counts_into(W.data[rr:rr1, d0:d1], A.data[cc:cc1, d0:d1],
                                         res[rr:rr1, cc:cc1], alpha)


def safe_depth(w_bits: int, a_bits: int) -> int:
    """Largest depth whose worst-case sum fits a signed 32-bit accumulator."""
    return (1 << 31) >> (w_bits + a_bits)


def bit_serial_gemm(W: BitPlaneMatrix, A: BitPlaneMatrix, res: np.ndarray, *,
                    kernel: Kernel | None = None, blocking: BlockingParams | None = None,
                    threads: int = 1) -> None:
    """Few-bit integer GEMM as a weighted sum of binary plane products.

    Accumulates ``unpack(W) @ unpack(A).T`` into ``res`` with exactly
    ``W.bits * A.bits`` binary kernel calls. Plane pairs run sequentially;
    ``threads`` only splits rows inside each call.
    """
    if W.depth != A.depth:
        raise ShapeError(f"depth mismatch: W has {W.depth}, A has {A.depth}")
    if res.shape != (W.rows, A.rows):
        raise ShapeError(f"res shape {res.shape} != ({W.rows}, {A.rows})")
    if __debug__ and W.depth > safe_depth(W.bits, A.bits):
        raise OverflowError(
            f"depth {W.depth} exceeds safe bound {safe_depth(W.bits, A.bits)} "
            f"for W{W.bits}A{A.bits} with a 32-bit accumulator"
        )
    if kernel is None:
        if blocking is not None:
            def kernel(w, a, r, alpha):
                binary_gemm_and_blocked(w, a, r, alpha, blocking)
        else:
            def kernel(w, a, r, alpha):
                binary_gemm_and(w, a, r, alpha, threads=threads)
    for i in range(W.bits):
        for j in range(A.bits):
            kernel(W.planes[i], A.planes[j], res, W.plane_weight(i) * A.plane_weight(j))


def reference_gemm(W, B) -> np.ndarray:
    """Exact integer product ``W @ B`` (``W`` is M x K, ``B`` is K x N)."""
    W = np.asarray(W)
    B = np.asarray(B)
    if W.ndim != 2 or B.ndim != 2 or W.shape[1] != B.shape[0]:
        raise ShapeError(f"cannot multiply {W.shape} by {B.shape}")
    return np.matmul(W.astype(np.int64), B.astype(np.int64))


def byte_gemm(W, B) -> np.ndarray:
    """8-bit engine: ``W @ B`` for operands that fit in int8/uint8.

    Uses float64 BLAS when every partial sum is exactly representable,
    otherwise falls back to the integer reference.
    """
    W = np.asarray(W)
    B = np.asarray(B)
    for name, m in (("W", W), ("A", B)):
        if m.size and (m.min() < -128 or m.max() > 255):
            raise ValueError(f"{name} operand outside 8-bit range [-128, 255]")
        if m.size and m.min() < 0 and m.max() > 127:
            raise ValueError(f"{name} operand mixes int8 and uint8 ranges")
    if W.ndim != 2 or B.ndim != 2 or W.shape[1] != B.shape[0]:
        raise ShapeError(f"cannot multiply {W.shape} by {B.shape}")
    if W.shape[1] * 128 * 255 < 2 ** 53:
        return np.rint(W.astype(np.float64) @ B.astype(np.float64)).astype(np.int64)
    return reference_gemm(W, B)
