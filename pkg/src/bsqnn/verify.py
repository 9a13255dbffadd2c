"""End-to-end oracle suites: each kernel against an independent reference.

Every suite returns a :class:`SuiteResult`; the first mismatch is kept with
its operands so that a failure is reproducible from the printout alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .bitplane import BitMatrix, pack, pack_interleaved, unpack
from .gemm import binary_gemm_and, binary_gemm_xnor, bit_serial_gemm
from .lowering import ConvGeometry, im2col_bytes, im2col_interleaved, pad_channels
from .runtime import CONFIGS, build_network, output_hash, run_network
from .streamline import (
    Linear,
    QuantMatrixOp,
    Quantize,
    Quantizer,
    alpha_scaling,
    batchnorm,
    evaluate,
    streamline_graph,
)

FAULTS = ("sign-flip",)


@dataclass
class SuiteResult:
    name: str
    cases: int = 0
    failure: str | None = None

    @property
    def passed(self) -> bool:
        return self.failure is None and self.cases > 0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.cases} cases" + (f"\n  {self.failure}" if self.failure else "")


@dataclass
class VerifyConfig:
    seed: int = 0
    wordsize: int = 64
    gemm_cases: int = 300
    streamline_cases: int = 100
    lowering_cases: int = 60
    packing_cases: int = 2000
    fault: str | None = None
    suites: tuple = field(default=("packing", "gemm", "duality", "lowering", "streamline", "engines"))


def _fmt(name: str, **operands) -> str:
    with np.printoptions(threshold=64, linewidth=120):
        parts = [f"{k}={np.asarray(v).tolist() if np.size(v) <= 64 else np.asarray(v)!r}"
                 for k, v in operands.items()]
    return f"{name}: " + "; ".join(parts)


def faulty_kernel(fault: str | None) -> Callable | None:
    """A binary kernel with a deliberate bug, for mutation testing."""
    if fault is None:
        return None
    if fault == "sign-flip":
        # loses the negative weight of two's-complement MSB planes
        return lambda w, a, r, alpha: binary_gemm_and(w, a, r, abs(alpha))
    raise ValueError(f"unknown fault {fault!r}; expected one of {FAULTS}")


def operand(rng, shape, bits: int, signed: bool) -> np.ndarray:
    lo, hi = (-(1 << (bits - 1)), (1 << (bits - 1)) - 1) if signed else (0, (1 << bits) - 1)
    return rng.integers(lo, hi + 1, size=shape)


def elementwise_gemm(W, B) -> np.ndarray:
    """Integer GEMM as explicit broadcast products and sums (no BLAS)."""
    W = np.asarray(W, dtype=np.int64)
    B = np.asarray(B, dtype=np.int64)
    return (W[:, :, None] * B[None, :, :]).sum(axis=1)


def random_gemm_case(rng, max_mn: int = 64, max_k: int = 256, max_bits: int = 4):
    m, n = (int(v) for v in rng.integers(1, max_mn + 1, 2))
    k = int(rng.integers(1, max_k + 1))
    w, a = (int(v) for v in rng.integers(1, max_bits + 1, 2))
    ws, as_ = (bool(v) for v in rng.integers(0, 2, 2))
    return operand(rng, (m, k), w, ws), operand(rng, (k, n), a, as_), (w, a, ws, as_)


def check_gemm_case(Wm, Bm, flags, wordsize: int, kernel=None):
    """Run bit-serial GEMM; returns (result, invocation count)."""
    w, a, ws, as_ = flags
    W = pack(Wm, w, ws, wordsize)
    A = pack(Bm.T, a, as_, wordsize)
    calls = []

    def counted(wp, ap, r, alpha):
        calls.append(alpha)
        (kernel or binary_gemm_and)(wp, ap, r, alpha)

    res = np.zeros((Wm.shape[0], Bm.shape[1]), dtype=np.int64)
    bit_serial_gemm(W, A, res, kernel=counted)
    return res, len(calls)


def suite_gemm(cfg: VerifyConfig) -> SuiteResult:
    rng = np.random.default_rng(cfg.seed)
    out = SuiteResult(f"gemm[ws={cfg.wordsize}]")
    kernel = faulty_kernel(cfg.fault)
    for _ in range(cfg.gemm_cases):
        Wm, Bm, flags = random_gemm_case(rng)
        got, calls = check_gemm_case(Wm, Bm, flags, cfg.wordsize, kernel)
        out.cases += 1
        expect = elementwise_gemm(Wm, Bm)
        if calls != flags[0] * flags[1] or not np.array_equal(got, expect):
            w, a, ws, as_ = flags
            out.failure = _fmt(f"W{w}A{a} signed=({ws},{as_}) calls={calls}", W=Wm, B=Bm,
                               got=got, expected=expect)
            break
    return out


def suite_duality(cfg: VerifyConfig) -> SuiteResult:
    """XNOR count from AND counts and row popcounts, on bipolar matrices."""
    rng = np.random.default_rng(cfg.seed + 1)
    out = SuiteResult(f"xnor-and duality[ws={cfg.wordsize}]")
    for _ in range(max(20, cfg.gemm_cases // 5)):
        m, n = (int(v) for v in rng.integers(1, 40, 2))
        k = int(rng.integers(1, 300))
        wb, ab = rng.integers(0, 2, (m, k)), rng.integers(0, 2, (n, k))
        W, A = BitMatrix.from_bits(wb, cfg.wordsize), BitMatrix.from_bits(ab, cfg.wordsize)
        x = np.zeros((m, n), dtype=np.int64)
        binary_gemm_xnor(W, A, x)
        both = np.zeros((m, n), dtype=np.int64)
        binary_gemm_and(W, A, both)
        pw, pa = wb.sum(axis=1)[:, None], ab.sum(axis=1)[None, :]
        agree = k - pw - pa + 2 * both
        expect = elementwise_gemm(2 * wb - 1, (2 * ab - 1).T)
        out.cases += 1
        if not (np.array_equal(x, 2 * agree - k) and np.array_equal(x, expect)):
            out.failure = _fmt("xnor", W=wb, A=ab, got=x, expected=expect)
            break
    return out


def random_geometry(rng, channels=None) -> ConvGeometry:
    k = int(rng.choice([1, 2, 3, 5, 7]))
    s = int(rng.integers(1, 5))
    p = int(rng.integers(0, 4))
    c = int(channels or rng.choice([1, 3, 8, 33, 64, 100]))
    h = int(rng.integers(max(1, k - 2 * p), 12))
    w = int(rng.integers(max(1, k - 2 * p), 12))
    return ConvGeometry(h, w, c, k, k, stride=s, pad=p)


def check_lowering(x: np.ndarray, g: ConvGeometry, bits: int, wordsize: int) -> str | None:
    """Plane-by-plane comparison of interleaved lowering against packed im2col."""
    got = im2col_interleaved(pack_interleaved(x, bits, wordsize), g)
    padded = pad_channels(im2col_bytes(x, g), g.k_h, g.k_w, g.in_c, wordsize)
    for j, plane in enumerate(got.planes):
        if plane != BitMatrix.from_bits((padded >> j) & 1, wordsize):
            return f"bit plane {j} differs"
    return None


def suite_lowering(cfg: VerifyConfig) -> SuiteResult:
    rng = np.random.default_rng(cfg.seed + 2)
    out = SuiteResult(f"lowering[ws={cfg.wordsize}]")
    for _ in range(cfg.lowering_cases):
        g = random_geometry(rng)
        bits = int(rng.integers(1, 5))
        x = operand(rng, (g.in_h, g.in_w, g.in_c), bits, False)
        out.cases += 1
        msg = check_lowering(x, g, bits, cfg.wordsize)
        if msg:
            out.failure = f"{msg}: {g} bits={bits}"
            break
    return out


@dataclass
class StreamlineCase:
    ops: list
    inputs: np.ndarray  # every integer input in the bounding grid, one per row
    description: str


def random_streamline_case(rng) -> StreamlineCase:
    """Alpha, batch-norm and a uniform quantizer, optionally behind a matrix layer.

    With a matrix, depth and activation bits are small enough to enumerate
    every input; without one, every integer accumulator in a range that
    spans all quantizer levels is fed to each channel.
    """
    c = int(rng.integers(1, 6))
    q_bits = int(rng.integers(1, 4))
    alpha = alpha_scaling(rng.uniform(0.05, 2.0, c))
    bn = batchnorm(rng.normal(0, 2, c), rng.uniform(0.2, 3, c), rng.uniform(0.2, 2, c),
                   rng.normal(0, 1, c))
    step = float(rng.uniform(0.1, 1.5))
    base = float(rng.choice([0.0, -step * ((1 << q_bits) - 1) / 2, rng.normal()]))
    q = Quantizer.uniform_bits(q_bits, step, base)
    tail = [Linear(alpha, "alpha"), Linear(bn, "bn"), Quantize(q, "q")]
    qdesc = f"C={c} Q{q_bits} step={step:.4g} base={base:.4g}"
    if rng.random() < 0.4:
        grid = np.repeat(np.arange(-64, 65)[:, None], c, axis=1)
        return StreamlineCase(tail, grid, f"accumulators {qdesc}")
    k = int(rng.integers(1, 4))
    a_bits = int(rng.integers(1, 3))
    if rng.random() < 0.3:
        mat = QuantMatrixOp.from_bipolar(rng.choice([-1, 1], (c, k)), name="m")
    else:
        w_bits = int(rng.integers(1, 5))
        mat = QuantMatrixOp(operand(rng, (c, k), w_bits, True), w_bits, True, name="m")
    grid = np.stack(np.meshgrid(*[np.arange(1 << a_bits)] * k, indexing="ij"), -1).reshape(-1, k)
    desc = f"K={k} A{a_bits} W{mat.bits}{' bipolar' if mat.bipolar else ''} {qdesc}"
    return StreamlineCase([mat] + tail, grid, desc)


def check_streamline(ops: list, inputs: np.ndarray) -> str | None:
    """Streamlined integer output must select the same quantizer level as the float graph."""
    s = streamline_graph(ops)
    q = ops[-1].quantizer
    for x in inputs:
        ref = evaluate(ops, x.astype(np.float64))
        codes = evaluate(s.ops, x)
        if not np.array_equal(q.levels[codes], ref):
            return _fmt("streamline", x=x, codes=codes, levels=q.levels[codes], expected=ref)
    return None


def hwgq_case() -> StreamlineCase:
    q = Quantizer(np.array([0.0, 0.538, 1.076, 1.614]), np.array([0.0, 0.807, 1.345]))
    ops = [Linear(alpha_scaling([0.538]), "scale"), Quantize(q, "q")]
    return StreamlineCase(ops, np.arange(-4, 8)[:, None], "HWGQ")


def suite_streamline(cfg: VerifyConfig) -> SuiteResult:
    rng = np.random.default_rng(cfg.seed + 3)
    out = SuiteResult("streamline")
    cases = [hwgq_case()] + [random_streamline_case(rng) for _ in range(cfg.streamline_cases)]
    for case in cases:
        out.cases += 1
        msg = check_streamline(case.ops, case.inputs)
        if msg:
            out.failure = f"{case.description}: {msg}"
            break
    return out


def suite_packing(cfg: VerifyConfig) -> SuiteResult:
    rng = np.random.default_rng(cfg.seed + 4)
    out = SuiteResult(f"packing[ws={cfg.wordsize}]")
    for _ in range(cfg.packing_cases):
        bits = int(rng.integers(1, 5))
        signed = bool(rng.integers(0, 2))
        shape = (int(rng.integers(1, 9)), int(rng.integers(1, 200)))
        m = operand(rng, shape, bits, signed)
        p = pack(m, bits, signed, cfg.wordsize)
        out.cases += 1
        pad = sum(plane.padding_popcount() for plane in p.planes)
        if pad or not np.array_equal(unpack(p), m):
            out.failure = _fmt(f"pack bits={bits} signed={signed} padding={pad}", m=m)
            break
    return out


def suite_engines(cfg: VerifyConfig) -> SuiteResult:
    from .toy import ToyConfig, make_toy_network, random_input

    rng = np.random.default_rng(cfg.seed + 5)
    out = SuiteResult(f"engines[ws={cfg.wordsize}]")
    spec = make_toy_network()
    for _ in range(3):
        x = random_input(ToyConfig(), rng)
        hashes = {}
        for name in CONFIGS:
            y, _ = run_network(build_network(spec.ops, name, wordsize=cfg.wordsize), x, repeats=1)
            hashes[name] = output_hash(y)
        out.cases += 1
        if len(set(hashes.values())) != 1:
            out.failure = f"output hashes differ: {hashes}"
            break
    return out


SUITES = {
    "packing": suite_packing,
    "gemm": suite_gemm,
    "duality": suite_duality,
    "lowering": suite_lowering,
    "streamline": suite_streamline,
    "engines": suite_engines,
}


def run_all(cfg: VerifyConfig) -> list[SuiteResult]:
    results = []
    for name in cfg.suites:
        if name not in SUITES:
            raise ValueError(f"unknown suite {name!r}")
        results.append(SUITES[name](cfg))
    return results
