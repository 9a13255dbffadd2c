"""Convolution lowering: im2col on element tensors and on interleaved bit tensors.

Lowered rows follow output pixels in row-major order; columns nest as
(k_h, k_w, C) with C innermost. Kernels must be flattened the same way.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .bitplane import BitMatrix, BitPlaneMatrix, InterleavedTensor, pack, words_for


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class ConvGeometry:
    in_h: int
    in_w: int
    in_c: int
    k_h: int
    k_w: int
    stride: int = 1
    pad: int = 0
    out_c: int = 1
    groups: int = 1

    def __post_init__(self):
        if min(self.in_h, self.in_w, self.in_c, self.k_h, self.k_w,
               self.stride, self.out_c, self.groups) < 1 or self.pad < 0:
            raise GeometryError(f"invalid geometry {self}")
        if self.in_c % self.groups or self.out_c % self.groups:
            raise GeometryError(f"channels not divisible by groups={self.groups}")
        if self.in_h + 2 * self.pad < self.k_h or self.in_w + 2 * self.pad < self.k_w:
            raise GeometryError(f"kernel larger than padded input in {self}")

    @property
    def out_h(self) -> int:
        return (self.in_h + 2 * self.pad - self.k_h) // self.stride + 1

    @property
    def out_w(self) -> int:
        return (self.in_w + 2 * self.pad - self.k_w) // self.stride + 1

    @property
    def pixels(self) -> int:
        return self.out_h * self.out_w

    @property
    def depth(self) -> int:
        """Lowered depth per group."""
        return self.k_h * self.k_w * self.in_c // self.groups

    def group_view(self) -> "ConvGeometry":
        """Geometry of one group as an ungrouped convolution."""
        return replace(self, in_c=self.in_c // self.groups,
                       out_c=self.out_c // self.groups, groups=1)


@dataclass
class LoweringTrace:
    """Records which code path the interleaved lowering took."""

    copy_passes: int = 0
    subword_ops: int = 0
    words_copied: int = 0
    notes: list = field(default_factory=list)


def _check_input(shape, g: ConvGeometry, channels: int) -> None:
    if tuple(shape[:2]) != (g.in_h, g.in_w) or channels != g.in_c:
        raise GeometryError(
            f"tensor {tuple(shape[:2]) + (channels,)} does not match geometry "
            f"({g.in_h}, {g.in_w}, {g.in_c})"
        )


def _windows(padded: np.ndarray, g: ConvGeometry) -> np.ndarray:
    # (H', W', X, k_h, k_w) -> (OH, OW, k_h, k_w, X)
    win = sliding_window_view(padded, (g.k_h, g.k_w), axis=(0, 1))
    win = win[:: g.stride, :: g.stride][: g.out_h, : g.out_w]
    return win.transpose(0, 1, 3, 4, 2)


def im2col_bytes(t, g: ConvGeometry) -> np.ndarray:
    """Sliding-window patch extraction of an ``H x W x C`` tensor (zero padding).

    Ignores ``groups``; use :meth:`ConvGeometry.group_view` on a channel slice.
    """
    t = np.asarray(t)
    if t.ndim != 3:
        raise GeometryError(f"expected H x W x C tensor, got shape {t.shape}")
    _check_input(t.shape, g, t.shape[2])
    p = g.pad
    padded = np.pad(t, ((p, p), (p, p), (0, 0)))
    cols = _windows(padded, g)
    return cols.reshape(g.pixels, g.k_h * g.k_w * t.shape[2])


def im2col_interleaved(it: InterleavedTensor, g: ConvGeometry,
                       trace: LoweringTrace | None = None) -> BitPlaneMatrix:
    """Lower an interleaved tensor with whole-word copies, one pass per bit.

    Each output row has ``k_h * k_w * words_per_pixel`` words; channel
    padding inside a pixel stays zero, so the result pairs with kernels
    packed by :func:`pack_kernels_interleaved`.
    """
    _check_input(it.data.shape[1:3], g, it.channels)
    p = g.pad
    wpp = it.words_per_pixel
    depth = g.k_h * g.k_w * wpp * it.wordsize
    planes = []
    for j in range(it.bits):
        padded = np.zeros((g.in_h + 2 * p, g.in_w + 2 * p, wpp), dtype=it.data.dtype)
        padded[p:p + g.in_h, p:p + g.in_w] = it.data[j]
        rows = np.ascontiguousarray(_windows(padded, g)).reshape(g.pixels, g.k_h * g.k_w * wpp)
        planes.append(BitMatrix(g.pixels, depth, rows, it.wordsize))
        if trace is not None:
            trace.copy_passes += 1
            trace.words_copied += rows.size
    return BitPlaneMatrix(tuple(planes), signed=False)


def pad_channels(lowered, k_h: int, k_w: int, channels: int, wordsize: int) -> np.ndarray:
    """Zero-pad the innermost channel axis of lowered rows to a word boundary."""
    lowered = np.asarray(lowered)
    n = lowered.shape[0]
    cpad = words_for(channels, wordsize) * wordsize
    out = np.zeros((n, k_h, k_w, cpad), dtype=lowered.dtype)
    out[..., :channels] = lowered.reshape(n, k_h, k_w, channels)
    return out.reshape(n, k_h * k_w * cpad)


def pack_kernels_interleaved(kernels, g: ConvGeometry, bits: int, signed: bool,
                             wordsize: int) -> BitPlaneMatrix:
    """Pack ``M x (k_h*k_w*C)`` kernels with the per-pixel channel padding."""
    padded = pad_channels(kernels, g.k_h, g.k_w, g.in_c, wordsize)
    return pack(padded, bits, signed, wordsize)


def unpad_channels(lowered, k_h: int, k_w: int, channels: int, wordsize: int) -> np.ndarray:
    lowered = np.asarray(lowered)
    n = lowered.shape[0]
    cpad = words_for(channels, wordsize) * wordsize
    return lowered.reshape(n, k_h, k_w, cpad)[..., :channels].reshape(n, -1)


def maxpool(t, window: int, stride: int) -> np.ndarray:
    """Per-channel maximum over ``window x window`` patches of an ``H x W x C`` tensor."""
    t = np.asarray(t)
    if t.ndim != 3:
        raise GeometryError(f"max-pool expects H x W x C, got shape {t.shape}")
    if window < 1 or stride < 1 or window > t.shape[0] or window > t.shape[1]:
        raise GeometryError(f"window {window} / stride {stride} invalid for {t.shape}")
    win = sliding_window_view(t, (window, window), axis=(0, 1))[::stride, ::stride]
    return win.max(axis=(3, 4))
