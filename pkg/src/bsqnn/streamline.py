"""Streamlining: rewrite float-bearing quantized layers into integer thresholding.

A layer sequence is a list of ops (:class:`QuantMatrixOp`, :class:`Linear`,
:class:`Quantize`, :class:`Threshold`, :class:`MaxPool`) acting on tensors
with channels on the last axis. :func:`streamline_graph` tracks the affine
map from the current integer tensor to the real value the float network
would hold, pushes it through matrix ops, and folds it into the next
quantizer's thresholds. Pass arithmetic runs on :class:`fractions.Fraction`
so the final integer thresholds are exact for the given parameters.

Successive thresholding counts thresholds *strictly* exceeded:
``T(x, t) = |{i : x > t_i}|``. Finalized integer thresholds use the
equivalent ``x >= T_i`` form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence, Union

import numpy as np

from .lowering import ConvGeometry, im2col_bytes, maxpool

ASCENDING_SLACK = 1e-9


class UnsupportedError(ValueError):
    """The sequence uses a structure streamlining cannot express."""


def _is_exact(a: np.ndarray) -> bool:
    return a.dtype == object


def to_exact(a) -> np.ndarray:
    a = np.asarray(a)
    if _is_exact(a):
        return a
    if np.issubdtype(a.dtype, np.integer):
        conv = [Fraction(int(v)) for v in a.ravel()]
    else:
        conv = [Fraction(float(v)) for v in a.ravel()]
    out = np.empty(a.shape, dtype=object)
    out.ravel()[:] = conv
    return out


def _check_ascending(t: np.ndarray, strict: bool) -> None:
    if t.shape[-1] < 2:
        return
    d = np.diff(t, axis=-1)
    if strict:
        ok = np.all(d > 0) if _is_exact(t) else np.all(d > -ASCENDING_SLACK)
    else:
        ok = np.all(d >= 0)
    if not ok:
        raise ValueError("thresholds must be ascending per channel")


def successive_threshold(x, thresholds, inclusive: bool = False) -> np.ndarray:
    """Count, per element, the thresholds of its channel that ``x`` exceeds.

    ``thresholds`` is ``channels x n`` (one row broadcasts to all channels)
    and matches the last axis of ``x``. ``inclusive`` counts ``x >= t``.
    """
    x = np.asarray(x)
    t = np.asarray(thresholds)
    if t.ndim == 1:
        t = t[None, :]
    if t.shape[0] not in (1, x.shape[-1] if x.ndim else 1):
        raise ValueError(f"{t.shape[0]} threshold channels vs {x.shape[-1]} data channels")
    cmp = np.greater_equal if inclusive else np.greater
    return cmp(x[..., None], t).sum(axis=-1).astype(np.int64)


@dataclass(frozen=True, eq=False)
class LinearTransform:
    """Per-channel affine map ``x -> scale * x + shift`` (length-1 broadcasts)."""

    scale: np.ndarray
    shift: np.ndarray

    def __post_init__(self):
        scale = np.atleast_1d(np.asarray(self.scale))
        shift = np.atleast_1d(np.asarray(self.shift))
        if scale.ndim != 1 or shift.ndim != 1:
            raise ValueError("scale and shift must be 1-D")
        if len(scale) != len(shift):
            if len(scale) == 1:
                scale = np.repeat(scale, len(shift))
            elif len(shift) == 1:
                shift = np.repeat(shift, len(scale))
            else:
                raise ValueError(f"scale has {len(scale)} channels, shift has {len(shift)}")
        if np.any(scale == 0):
            raise ValueError("linear transform scale must be nonzero")
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "shift", shift)

    @classmethod
    def identity(cls, channels: int = 1) -> "LinearTransform":
        return cls(np.ones(channels), np.zeros(channels))

    @property
    def channels(self) -> int:
        return len(self.scale)

    def exact(self) -> "LinearTransform":
        return LinearTransform(to_exact(self.scale), to_exact(self.shift))

    def to_float(self) -> "LinearTransform":
        return LinearTransform(self.scale.astype(np.float64), self.shift.astype(np.float64))

    def apply(self, x):
        return np.asarray(x) * self.scale + self.shift

    def is_identity(self) -> bool:
        return bool(np.all(self.scale == 1) and np.all(self.shift == 0))


def batchnorm(mu, sigma, gamma, beta) -> LinearTransform:
    """``(x - mu) / sigma * gamma + beta`` in affine form."""
    mu, sigma, gamma, beta = (np.asarray(v, dtype=np.float64) for v in (mu, sigma, gamma, beta))
    if np.any(sigma <= 0):
        raise ValueError("batch-norm sigma must be positive")
    scale = gamma / sigma
    return LinearTransform(scale, beta - mu * scale)


def alpha_scaling(alpha) -> LinearTransform:
    alpha = np.asarray(alpha, dtype=np.float64)
    return LinearTransform(alpha, np.zeros_like(alpha))


@dataclass(frozen=True, eq=False)
class Quantizer:
    """Maps ``x`` to ``levels[T(x, thresholds)]``."""

    levels: np.ndarray
    thresholds: np.ndarray

    def __post_init__(self):
        levels = np.asarray(self.levels, dtype=np.float64)
        thresholds = np.asarray(self.thresholds, dtype=np.float64)
        if levels.ndim != 1 or thresholds.ndim != 1 or len(levels) < 2:
            raise ValueError("quantizer needs >= 2 levels and a 1-D threshold list")
        if len(thresholds) != len(levels) - 1:
            raise ValueError(f"{len(levels)} levels need {len(levels) - 1} thresholds, "
                             f"got {len(thresholds)}")
        if np.any(np.diff(levels) <= 0) or np.any(np.diff(thresholds) <= 0):
            raise ValueError("levels and thresholds must be strictly ascending")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "thresholds", thresholds)

    @classmethod
    def uniform_bits(cls, bits: int, step: float, base: float = 0.0, thresholds=None):
        """``2**bits`` evenly spaced levels; thresholds default to midpoints."""
        n = (1 << bits) - 1
        levels = base + step * np.arange(n + 1)
        if thresholds is None:
            thresholds = base + step * (np.arange(n) + 0.5)
        return cls(levels, thresholds)

    @property
    def step(self) -> float:
        return float((self.levels[-1] - self.levels[0]) / (len(self.levels) - 1))

    @property
    def base(self) -> float:
        return float(self.levels[0])

    @property
    def uniform(self) -> bool:
        d = np.diff(self.levels)
        return bool(np.all(np.abs(d - self.step) <= 1e-9 * abs(self.step)))

    def __call__(self, x):
        return self.levels[successive_threshold(np.asarray(x)[..., None], self.thresholds)[..., 0]]


@dataclass(frozen=True, eq=False)
class ThresholdSet:
    """Per-channel ascending thresholds, ``channels x n``.

    Real-valued sets compare ``x > t``. ``finalized`` sets hold integers and
    compare ``x >= T``; rounding may make neighbours equal, which encodes a
    jump of more than one level between consecutive integers.
    """

    thresholds: np.ndarray
    finalized: bool = False

    def __post_init__(self):
        t = np.asarray(self.thresholds)
        if t.ndim == 1:
            t = t[None, :]
        if t.ndim != 2 or t.shape[1] < 1:
            raise ValueError(f"thresholds must be channels x n, got shape {t.shape}")
        if self.finalized:
            if not np.issubdtype(t.dtype, np.integer):
                raise TypeError("finalized thresholds must be integers")
            _check_ascending(t, strict=False)
        else:
            _check_ascending(t, strict=True)
        object.__setattr__(self, "thresholds", t)

    @property
    def channels(self) -> int:
        return self.thresholds.shape[0]

    @property
    def count(self) -> int:
        return self.thresholds.shape[1]

    def exact(self) -> "ThresholdSet":
        if self.finalized:
            return self
        return ThresholdSet(to_exact(self.thresholds))

    def apply(self, x) -> np.ndarray:
        return successive_threshold(x, self.thresholds, inclusive=self.finalized)


def quantizer_to_thresholds(q: Quantizer) -> tuple[ThresholdSet, LinearTransform]:
    """Split a uniform quantizer into ``Q(x) = a * T(x, t) + b``."""
    if not q.uniform:
        raise UnsupportedError("non-uniform quantizer levels cannot use a single affine map")
    return ThresholdSet(q.thresholds.copy()), LinearTransform([q.step], [q.base])


def _broadcast_channels(*lengths: int) -> int:
    n = {k for k in lengths if k != 1}
    if len(n) > 1:
        raise ValueError(f"channel-count mismatch: {sorted(n)}")
    return n.pop() if n else 1


def collapse_linear(transforms: Sequence[LinearTransform]) -> LinearTransform:
    """Compose affine maps given in application order into one."""
    if not transforms:
        raise ValueError("need at least one transform")
    _broadcast_channels(*(t.channels for t in transforms))
    scale, shift = transforms[0].scale, transforms[0].shift
    for t in transforms[1:]:
        scale, shift = t.scale * scale, t.scale * shift + t.shift
    return LinearTransform(scale, shift)


def move_linear_past_matrix(lt: LinearTransform, W, in_channels: int | None = None
                            ) -> tuple[LinearTransform, np.ndarray]:
    """Rewrite ``W @ (a*x + b)`` as ``a * (W @ x) + W @ b``.

    ``W`` is ``M x K``; per-channel shifts repeat every ``in_channels``
    columns (channel innermost). The scale must be uniform. Returns the
    output-side transform and its shift ``W @ b``.
    """
    W = np.asarray(W)
    M, K = W.shape
    scale = lt.scale
    if np.any(scale != scale[0]):
        raise UnsupportedError("input-side scale must be uniform to move past a dense matrix")
    shift = lt.shift
    if lt.channels == 1:
        c = 1
    else:
        c = in_channels or lt.channels
        if lt.channels != c or K % c:
            raise ValueError(f"transform has {lt.channels} channels, matrix depth {K} "
                             f"is not a multiple of {c}")
    if np.all(shift == 0):
        bias = np.full(M, shift[0] * 0, dtype=shift.dtype)
    elif c == 1:
        bias = W.sum(axis=1).astype(shift.dtype) * shift[0]
    else:
        per_channel = W.reshape(M, K // c, c).sum(axis=1)
        bias = np.dot(per_channel.astype(shift.dtype), shift)
    return LinearTransform(np.repeat(scale[:1], M), bias), bias


def absorb_into_thresholds(ts: ThresholdSet, lt: LinearTransform) -> ThresholdSet:
    """Thresholds ``t'`` with ``T(a*x + b, t) == T(x, t')``, i.e. ``(t - b) / a``."""
    if ts.finalized:
        raise ValueError("cannot absorb into finalized thresholds")
    if np.any(lt.scale <= 0):
        raise ValueError("absorption needs a positive scale; a negative one flips comparisons")
    _broadcast_channels(ts.channels, lt.channels)
    t = (ts.thresholds - lt.shift[:, None]) / lt.scale[:, None]
    return ThresholdSet(t)


def round_thresholds_integer(ts: ThresholdSet) -> ThresholdSet:
    """Integer thresholds for integer inputs: ``x > t`` becomes ``x >= floor(t) + 1``."""
    if ts.finalized:
        return ts
    t = ts.thresholds
    if _is_exact(t):
        out = np.array([[math.floor(v) + 1 for v in row] for row in t], dtype=np.int64)
    else:
        out = np.floor(t).astype(np.int64) + 1
    return ThresholdSet(out, finalized=True)


@dataclass(frozen=True, eq=False)
class QuantMatrixOp:
    """Integer matrix layer: fully connected or convolution.

    ``weights`` is ``M x K`` for FC or ``M x k_h x k_w x C/groups`` for conv.
    Bipolar layers store ``{0, -1}`` (signed 1-bit) and mean ``2*w + 1``.
    """

    weights: np.ndarray
    bits: int
    signed: bool = True
    bipolar: bool = False
    geometry: ConvGeometry | None = None
    name: str = ""

    def __post_init__(self):
        w = np.asarray(self.weights)
        if not np.issubdtype(w.dtype, np.integer):
            raise TypeError(f"{self.name or 'matrix op'}: weights must be integers")
        if self.bipolar and (self.bits != 1 or not self.signed or np.any((w != 0) & (w != -1))):
            raise ValueError("bipolar weights are stored as signed 1-bit values {0, -1}")
        g = self.geometry
        if g is not None:
            expect = (g.out_c, g.k_h, g.k_w, g.in_c // g.groups)
            if w.shape != expect:
                raise ValueError(f"conv weights {w.shape} != {expect}")
        elif w.ndim != 2:
            raise ValueError(f"FC weights must be 2-D, got {w.shape}")
        object.__setattr__(self, "weights", w.astype(np.int64))

    @classmethod
    def from_bipolar(cls, w_pm1, **kw) -> "QuantMatrixOp":
        w = np.asarray(w_pm1)
        if np.any(np.abs(w) != 1):
            raise ValueError("bipolar weights must be +-1")
        return cls((w - 1) // 2, bits=1, signed=True, bipolar=True, **kw)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def groups(self) -> int:
        return self.geometry.groups if self.geometry else 1

    def stored_lowered(self) -> np.ndarray:
        """Stored weights as ``M x depth`` (per-group depth for conv)."""
        return self.weights.reshape(self.out_channels, -1)

    def effective_lowered(self) -> np.ndarray:
        w = self.stored_lowered()
        return 2 * w + 1 if self.bipolar else w

    def apply(self, x) -> np.ndarray:
        """Reference semantics on an activation tensor (dtype preserved)."""
        x = np.asarray(x)
        W = self.effective_lowered().astype(x.dtype if x.dtype.kind == "f" else np.int64)
        g = self.geometry
        if g is None:
            flat = x.reshape(-1)
            if flat.shape[0] != W.shape[1]:
                raise ValueError(f"FC expects {W.shape[1]} inputs, got {flat.shape[0]}")
            return W @ flat
        gv = g.group_view()
        mg, cg = gv.out_c, gv.in_c
        outs = [im2col_bytes(x[..., k * cg:(k + 1) * cg], gv) @ W[k * mg:(k + 1) * mg].T
                for k in range(g.groups)]
        return np.concatenate(outs, axis=1).reshape(g.out_h, g.out_w, g.out_c)


@dataclass(frozen=True, eq=False)
class Linear:
    transform: LinearTransform
    name: str = ""


@dataclass(frozen=True, eq=False)
class Quantize:
    quantizer: Quantizer
    name: str = ""


@dataclass(frozen=True, eq=False)
class Threshold:
    thresholds: ThresholdSet
    name: str = ""


@dataclass(frozen=True, eq=False)
class MaxPool:
    window: int
    stride: int
    name: str = ""


Op = Union[QuantMatrixOp, Linear, Quantize, Threshold, MaxPool]


@dataclass(frozen=True, eq=False)
class StreamlinedSeq:
    """Integer-only ops plus the affine map from final integers to real outputs."""

    ops: tuple
    output_transform: LinearTransform = field(default_factory=LinearTransform.identity)


def evaluate(ops: Sequence[Op], x) -> np.ndarray:
    """Run a layer sequence directly; float in, float out for unstreamlined ops."""
    for op in ops:
        if isinstance(op, QuantMatrixOp):
            x = op.apply(x)
        elif isinstance(op, Linear):
            x = op.transform.to_float().apply(x)
        elif isinstance(op, Quantize):
            x = op.quantizer(x)
        elif isinstance(op, Threshold):
            x = op.thresholds.apply(x)
        elif isinstance(op, MaxPool):
            x = maxpool(x, op.window, op.stride)
        else:
            raise TypeError(f"unknown op {op!r}")
    return np.asarray(x)


def streamline_graph(seq: Sequence[Op]) -> StreamlinedSeq:
    """Remove all floating-point parameters from the integer path of ``seq``.

    Input to the sequence is assumed integer-valued.
    """
    out: list = []
    acc = LinearTransform.identity().exact()
    for idx, op in enumerate(seq):
        label = f"layer {idx}" + (f" ({op.name})" if getattr(op, "name", "") else "")
        try:
            if isinstance(op, Linear):
                acc = collapse_linear([acc, op.transform.exact()])
            elif isinstance(op, QuantMatrixOp):
                acc = _move_past(acc, op)
                out.append(op)
            elif isinstance(op, MaxPool):
                if np.any(acc.scale <= 0):
                    raise UnsupportedError("max-pool only commutes with positive scales")
                out.append(op)
            elif isinstance(op, Quantize):
                ts, q_affine = quantizer_to_thresholds(op.quantizer)
                ts = absorb_into_thresholds(ts.exact(), acc)
                out.append(Threshold(round_thresholds_integer(ts), name=op.name))
                acc = q_affine.exact()
            elif isinstance(op, Threshold):
                ts = op.thresholds
                if ts.finalized:
                    if not acc.is_identity():
                        raise UnsupportedError("finalized thresholds after a pending affine map")
                    out.append(op)
                else:
                    ts = absorb_into_thresholds(ts.exact(), acc)
                    out.append(Threshold(round_thresholds_integer(ts), name=op.name))
                acc = LinearTransform.identity().exact()
            else:
                raise UnsupportedError(f"unknown op {type(op).__name__}")
        except ValueError as e:
            raise UnsupportedError(f"{label}: {e}") from e
    return StreamlinedSeq(tuple(out), acc)


def _move_past(acc: LinearTransform, op: QuantMatrixOp) -> LinearTransform:
    g = op.geometry
    W = op.effective_lowered()
    if g is None:
        return move_linear_past_matrix(acc, W)[0]
    if g.pad and np.any(acc.shift != 0):
        raise UnsupportedError("zero padding with a nonzero input offset is not position-invariant")
    if acc.channels not in (1, g.in_c):
        raise ValueError(f"transform has {acc.channels} channels, conv input has {g.in_c}")
    if acc.channels == 1 or g.groups == 1:
        return move_linear_past_matrix(acc, W, None if acc.channels == 1 else g.in_c)[0]
    gv = g.group_view()
    parts = []
    for k in range(g.groups):
        sl = slice(k * gv.in_c, (k + 1) * gv.in_c)
        sub = LinearTransform(acc.scale[sl], acc.shift[sl])
        parts.append(move_linear_past_matrix(sub, W[k * gv.out_c:(k + 1) * gv.out_c], gv.in_c)[0])
    return LinearTransform(np.concatenate([p.scale for p in parts]),
                           np.concatenate([p.shift for p in parts]))


def integer_only(s: StreamlinedSeq) -> bool:
    """True when every parameter on the streamlined path is an integer."""
    for op in s.ops:
        if isinstance(op, QuantMatrixOp):
            if not np.issubdtype(op.weights.dtype, np.integer):
                return False
        elif isinstance(op, Threshold):
            t = op.thresholds
            if not (t.finalized and np.issubdtype(t.thresholds.dtype, np.integer)):
                return False
        elif not isinstance(op, MaxPool):
            return False
    return True
