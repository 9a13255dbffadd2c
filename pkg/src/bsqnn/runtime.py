"""Layer-graph executor with per-layer engine selection and timing breakdown.

Three configurations mirror the usual comparison:

``baseline``     unstreamlined graph, every matrix layer on the 8-bit engine,
                 float affine ops and float thresholds at run time.
``bsgemm``       streamlined graph; inner matrix layers bit-serial over
                 byte-form im2col followed by packing.
``bsgemm-intl``  streamlined graph; inner matrix layers bit-serial over
                 interleaved packing and word-level lowering.

First and last matrix layers stay on the 8-bit engine in both bit-serial
configurations.
"""

from __future__ import annotations

import csv
import hashlib
import io
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .bitplane import BitPlaneMatrix, pack, pack_interleaved
from .gemm import bit_serial_gemm, byte_gemm
from .lowering import (
    ConvGeometry,
    im2col_bytes,
    im2col_interleaved,
    maxpool as _maxpool,
    pack_kernels_interleaved,
)
from .streamline import (
    Linear,
    LinearTransform,
    MaxPool,
    QuantMatrixOp,
    Quantize,
    Threshold,
    ThresholdSet,
    collapse_linear,
    move_linear_past_matrix,
    streamline_graph,
)

CONFIGS = ("baseline", "bsgemm", "bsgemm-intl")
CSV_COLUMNS = ("layer", "kind", "rows", "depth", "cols",
               "t_lower_ns", "t_pack_ns", "t_matmul_ns", "t_other_ns", "gops")


class Kind(str, Enum):
    QUANT_CONV = "QuantConv"
    QUANT_FC = "QuantFC"
    THRESHOLD = "Threshold"
    MAXPOOL = "MaxPool"
    LINEAR = "Linear"


class Engine(str, Enum):
    BIT_SERIAL = "BitSerial"
    BYTE = "Byte"


class EngineError(ValueError):
    pass


maxpool = _maxpool


def apply_thresholds(t, ts: ThresholdSet) -> np.ndarray:
    """Deployed successive thresholding: ``|{i : x >= T_i}|`` per channel."""
    if not ts.finalized:
        raise ValueError("apply_thresholds needs finalized integer thresholds")
    t = np.asarray(t)
    if ts.channels not in (1, t.shape[-1]):
        raise ValueError(f"{ts.channels} threshold channels vs {t.shape[-1]} data channels")
    return ts.apply(t)


def bipolar_colsum_correction(activations) -> np.ndarray:
    """Per-column activation sums for ``W_bipolar @ x = 2 * (W_stored @ x) + colsum(x)``.

    Accepts an integer ``depth x cols`` matrix, or a packed activation
    operand (``cols x depth`` bit planes, as fed to the kernels).
    """
    if isinstance(activations, BitPlaneMatrix):
        out = np.zeros(activations.rows, dtype=np.int64)
        for i, plane in enumerate(activations.planes):
            counts = np.bitwise_count(plane.data).sum(axis=1, dtype=np.int64)
            out += activations.plane_weight(i) * counts
        return out
    return np.asarray(activations).sum(axis=0, dtype=np.int64)


@dataclass
class LayerDescriptor:
    name: str
    kind: Kind
    op: object
    engine: Engine | None = None
    interleaved: bool = False
    w_bits: int = 0
    a_bits: int = 0
    a_signed: bool = False
    # prepared once at load: per-group packed weights or integer matrices
    weights: list = field(default_factory=list)

    @property
    def geometry(self) -> ConvGeometry | None:
        return getattr(self.op, "geometry", None)

    @property
    def groups(self) -> int:
        g = self.geometry
        return g.groups if g else 1

    def dims(self, in_shape) -> tuple[int, int, int]:
        """(rows, depth, cols) of the layer's GEMM."""
        if self.kind is Kind.QUANT_CONV:
            g = self.geometry
            return g.out_c, g.depth, g.pixels
        if self.kind is Kind.QUANT_FC:
            return self.op.weights.shape[0], self.op.weights.shape[1], 1
        return 0, 0, 0


@dataclass
class LayerTiming:
    layer: str
    kind: str
    rows: int = 0
    depth: int = 0
    cols: int = 0
    t_lower_ns: int = 0
    t_pack_ns: int = 0
    t_matmul_ns: int = 0
    t_other_ns: int = 0

    @property
    def is_matmul(self) -> bool:
        return self.kind in (Kind.QUANT_CONV.value, Kind.QUANT_FC.value)

    @property
    def gops(self) -> float | None:
        if not self.is_matmul or self.t_matmul_ns <= 0:
            return None
        return gops(self.rows, self.depth, self.cols, self.t_matmul_ns)

    @property
    def component_ns(self) -> int:
        return self.t_lower_ns + self.t_pack_ns + self.t_matmul_ns + self.t_other_ns


def gops(rows: int, depth: int, cols: int, ns: float) -> float:
    """Integer giga-operations per second for a GEMM taking ``ns`` nanoseconds."""
    return 2 * rows * depth * cols / ns


@dataclass
class ExecutionReport:
    layers: list[LayerTiming]
    total_ns: int
    config: str = ""

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for lt in self.layers:
            g = lt.gops
            w.writerow([lt.layer, lt.kind,
                        lt.rows if lt.is_matmul else "", lt.depth if lt.is_matmul else "",
                        lt.cols if lt.is_matmul else "",
                        lt.t_lower_ns, lt.t_pack_ns, lt.t_matmul_ns, lt.t_other_ns,
                        "" if g is None else f"{g:.6f}"])
        return buf.getvalue()


@dataclass
class Network:
    layers: list[LayerDescriptor]
    input_bits: int
    input_signed: bool
    config: str
    output_transform: LinearTransform
    wordsize: int = 64
    threads: int = 1


def output_hash(out) -> str:
    out = np.ascontiguousarray(np.asarray(out, dtype=np.int64))
    h = hashlib.sha256(repr(out.shape).encode())
    h.update(out.tobytes())
    return h.hexdigest()


def _bits_for_levels(n_thresholds: int) -> int:
    return max(1, int(n_thresholds).bit_length())


def _baseline_ops(seq: Sequence) -> tuple[list, LinearTransform]:
    """Unstreamlined graph: float affine ops and float thresholds at run time.

    The previous quantizer's level map ``a*k + b`` is applied after each
    integer GEMM on codes, the way an 8-bit engine handles zero points.
    """
    out: list = []
    carry = None  # level map of the codes feeding the next matrix op
    trailing: list[LinearTransform] = []
    for op in seq:
        if isinstance(op, QuantMatrixOp):
            out.append(op)
            trailing = []
            if carry is not None and not carry.is_identity():
                if op.geometry is not None and op.geometry.pad and np.any(carry.shift != 0):
                    raise EngineError(f"{op.name}: zero padding with a nonzero level offset")
                moved = move_linear_past_matrix(carry, op.effective_lowered())[0]
                out.append(Linear(moved.to_float(), name=f"{op.name}-zp"))
                trailing.append(moved)
            carry = None
        elif isinstance(op, Linear):
            out.append(op)
            trailing.append(op.transform)
        elif isinstance(op, Quantize):
            q = op.quantizer
            out.append(Threshold(ThresholdSet(q.thresholds.copy()), name=op.name))
            carry = LinearTransform([q.step], [q.base])
            trailing = []
        elif isinstance(op, Threshold):
            out.append(op)
            carry = None
            trailing = []
        else:
            out.append(op)
            trailing = []
    if trailing:
        # float ops after the last integer-producing layer form the output map
        out = out[: len(out) - len(trailing)]
        tail = collapse_linear(trailing)
    else:
        tail = LinearTransform.identity()
    if carry is not None:
        tail = carry
    return out, tail


def build_network(seq: Sequence, config: str = "bsgemm", *, input_bits: int = 8,
                  input_signed: bool = False, wordsize: int = 64, threads: int = 1,
                  engines: Sequence[Engine] | None = None) -> Network:
    """Prepare a network for one of :data:`CONFIGS`; packs weights once.

    ``engines`` optionally overrides the engine of each matrix layer in order.
    """
    if config not in CONFIGS:
        raise EngineError(f"unknown configuration {config!r}; expected one of {CONFIGS}")
    if config == "baseline":
        ops, tail = _baseline_ops(seq)
    else:
        s = streamline_graph(seq)
        ops, tail = list(s.ops), s.output_transform
    matrix_idx = [i for i, op in enumerate(ops) if isinstance(op, QuantMatrixOp)]
    if engines is not None and len(engines) != len(matrix_idx):
        raise EngineError(f"{len(engines)} engines given for {len(matrix_idx)} matrix layers")
    layers: list[LayerDescriptor] = []
    a_bits, a_signed = input_bits, input_signed
    for i, op in enumerate(ops):
        name = op.name or f"{type(op).__name__.lower()}{i}"
        if isinstance(op, QuantMatrixOp):
            k = matrix_idx.index(i)
            if engines is not None:
                engine = Engine(engines[k])
            elif config == "baseline" or k in (0, len(matrix_idx) - 1):
                engine = Engine.BYTE
            else:
                engine = Engine.BIT_SERIAL
            kind = Kind.QUANT_CONV if op.geometry is not None else Kind.QUANT_FC
            d = LayerDescriptor(name, kind, op, engine, config == "bsgemm-intl" and kind is Kind.QUANT_CONV,
                                op.bits, a_bits, a_signed)
            _prepare(d, wordsize)
            layers.append(d)
            a_bits, a_signed = None, True  # raw accumulators until thresholded
        elif isinstance(op, Threshold):
            layers.append(LayerDescriptor(name, Kind.THRESHOLD, op))
            a_bits, a_signed = _bits_for_levels(op.thresholds.count), False
        elif isinstance(op, MaxPool):
            layers.append(LayerDescriptor(name, Kind.MAXPOOL, op))
        elif isinstance(op, Linear):
            layers.append(LayerDescriptor(name, Kind.LINEAR, op))
            a_bits = None
        else:
            raise EngineError(f"unsupported op {type(op).__name__} in {config} graph")
    return Network(layers, input_bits, input_signed, config, tail, wordsize, threads)


def _prepare(d: LayerDescriptor, wordsize: int) -> None:
    op: QuantMatrixOp = d.op
    if d.a_bits is None:
        raise EngineError(f"{d.name}: input is not a quantized integer tensor")
    if d.w_bits > 8 or d.a_bits > 8:
        raise EngineError(f"{d.name}: W{d.w_bits}A{d.a_bits} exceeds 8-bit operands")
    if d.engine is Engine.BIT_SERIAL and d.w_bits * d.a_bits > 64:
        raise EngineError(f"{d.name}: bit-serial needs w*a <= 64")
    W = op.stored_lowered() if d.engine is Engine.BIT_SERIAL else op.effective_lowered()
    g = d.geometry
    groups = d.groups
    mg = W.shape[0] // groups
    parts = [W[k * mg:(k + 1) * mg] for k in range(groups)]
    if d.engine is Engine.BYTE:
        d.weights = parts
    elif d.interleaved:
        gv = g.group_view()
        d.weights = [pack_kernels_interleaved(p, gv, op.bits, op.signed, wordsize) for p in parts]
    else:
        d.weights = [pack(p, op.bits, op.signed, wordsize) for p in parts]


def _now() -> int:
    return time.perf_counter_ns()


def _run_matrix(d: LayerDescriptor, x: np.ndarray, net: Network, t: LayerTiming) -> np.ndarray:
    op: QuantMatrixOp = d.op
    g = d.geometry
    gv = g.group_view() if g is not None else None
    outs = []
    for k in range(d.groups):
        t0 = _now()
        xg = x.reshape(-1) if g is None else x[..., k * gv.in_c:(k + 1) * gv.in_c]
        if d.engine is Engine.BYTE:
            lowered = xg[None, :] if gv is None else im2col_bytes(xg, gv)
            t1 = _now()
            B = np.ascontiguousarray(lowered.T)  # operand layout, like 8-bit GEMM packing
            t2 = _now()
            res = byte_gemm(d.weights[k], B)
            t3 = _now()
            t.t_lower_ns += t1 - t0
            t.t_pack_ns += t2 - t1
            t.t_matmul_ns += t3 - t2
        else:
            if d.interleaved:
                it = pack_interleaved(xg, d.a_bits, net.wordsize)
                t1 = _now()
                A = im2col_interleaved(it, gv)
                t2 = _now()
                t.t_pack_ns += t1 - t0
                t.t_lower_ns += t2 - t1
            else:
                lowered = xg[None, :] if gv is None else im2col_bytes(xg, gv)
                t1 = _now()
                A = pack(lowered, d.a_bits, d.a_signed, net.wordsize)
                t2 = _now()
                t.t_lower_ns += t1 - t0
                t.t_pack_ns += t2 - t1
            res = np.zeros((d.weights[k].rows, A.rows), dtype=np.int64)
            bit_serial_gemm(d.weights[k], A, res, threads=net.threads)
            t2b = _now()
            t.t_matmul_ns += t2b - t2
            if op.bipolar:
                res = 2 * res + bipolar_colsum_correction(A)[None, :]
            t.t_other_ns += _now() - t2b
        outs.append(res)
    t3 = _now()
    res = outs[0] if len(outs) == 1 else np.concatenate(outs, axis=0)
    out = res[:, 0] if g is None else res.T.reshape(g.out_h, g.out_w, g.out_c)
    out = np.ascontiguousarray(out)
    t.t_other_ns += _now() - t3
    return out


def _check_input_range(x: np.ndarray, bits: int | None, signed: bool, name: str) -> None:
    if bits is None:
        return
    lo, hi = (-(1 << (bits - 1)), (1 << (bits - 1)) - 1) if signed else (0, (1 << bits) - 1)
    if x.size and (x.min() < lo or x.max() > hi):
        raise EngineError(f"{name}: activations outside {bits}-bit range [{lo}, {hi}]")


def _run_once(net: Network, x: np.ndarray) -> tuple[np.ndarray, list[LayerTiming], int]:
    timings = []
    start = _now()
    for d in net.layers:
        t = LayerTiming(d.name, d.kind.value)
        if d.kind in (Kind.QUANT_CONV, Kind.QUANT_FC):
            t.rows, t.depth, t.cols = d.dims(x.shape)
            _check_input_range(x, d.a_bits, d.a_signed, d.name)
            x = _run_matrix(d, x, net, t)
        else:
            t0 = _now()
            if d.kind is Kind.THRESHOLD:
                ts = d.op.thresholds
                x = apply_thresholds(x, ts) if ts.finalized else ts.apply(x)
            elif d.kind is Kind.MAXPOOL:
                x = maxpool(x, d.op.window, d.op.stride)
            elif d.kind is Kind.LINEAR:
                x = d.op.transform.to_float().apply(x)
            t.t_other_ns = _now() - t0
        timings.append(t)
    return x, timings, _now() - start


def run_network(net: Network, x, repeats: int = 10) -> tuple[np.ndarray, ExecutionReport]:
    """Run one frame (batch 1) ``repeats`` times; timings are per-field medians."""
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.integer):
        raise EngineError("input must be an integer tensor")
    _check_input_range(x, net.input_bits, net.input_signed, "input")
    runs = []
    out = None
    for _ in range(max(1, repeats)):
        y, timings, total = _run_once(net, x)
        if out is None:
            out = y
        elif not np.array_equal(out, y):
            raise RuntimeError("non-deterministic network output")
        runs.append((timings, total))
    layers = []
    for i, t in enumerate(runs[0][0]):
        med = {f: int(np.median([r[0][i].__dict__[f] for r in runs]))
               for f in ("t_lower_ns", "t_pack_ns", "t_matmul_ns", "t_other_ns")}
        layers.append(LayerTiming(t.layer, t.kind, t.rows, t.depth, t.cols, **med))
    total = int(np.median([r[1] for r in runs]))
    return out, ExecutionReport(layers, total, net.config)
