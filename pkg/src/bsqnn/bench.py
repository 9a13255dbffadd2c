"""Command-line harness: GEMM sweeps, network runs and the oracle suites.

    bench gemm [--spec FILE.json] [--m ..] [--k ..] [--n ..] [--wa 1x1,2x2] ...
    bench net --model FILE --engine baseline|bsgemm|bsgemm-intl
    bench verify [--wordsize 32|64|both] [--inject-fault sign-flip]

CSV goes to stdout, diagnostics to stderr. Exit codes: 0 success,
1 verification suite failure, 2 usage or input error, 3 a timed kernel
disagreed with the reference (no numbers are reported for it).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bitplane import default_wordsize, pack
from .gemm import bit_serial_gemm, byte_gemm, reference_gemm
from .runtime import CONFIGS, EngineError, build_network, gops, output_hash, run_network

GEMM_COLUMNS = ("M", "K", "N", "w", "a", "engine", "ns", "gops")
ENGINES = ("bsgemm", "byte")
WARMUP = 3
DEFAULT_DIMS = tuple(1 << e for e in range(6, 13))

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(ValueError):
    pass


class VerificationError(RuntimeError):
    pass


def parse_dims(text: str) -> tuple[int, ...]:
    """``64,128`` or a power-of-two range ``64..4096`` (both ends included)."""
    out: list[int] = []
    for part in str(text).split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = (int(v) for v in part.split(".."))
            if lo < 1 or hi < lo or lo & (lo - 1) or hi & (hi - 1):
                raise UsageError(f"range {part!r} needs powers of two with lo <= hi")
            out.extend(1 << e for e in range(lo.bit_length() - 1, hi.bit_length()))
        elif part:
            out.append(int(part))
    if not out:
        raise UsageError(f"empty dimension list {text!r}")
    return tuple(out)


def parse_wa(text: str) -> tuple[tuple[int, int], ...]:
    """``1x1,2x2`` -> ((1, 1), (2, 2))."""
    pairs = []
    for part in str(text).split(","):
        try:
            w, a = (int(v) for v in part.strip().lower().split("x"))
        except ValueError:
            raise UsageError(f"bad precision pair {part!r}; expected WxA such as 2x2") from None
        pairs.append((w, a))
    return tuple(pairs)


@dataclass
class SweepSpec:
    m: tuple = DEFAULT_DIMS
    k: tuple = DEFAULT_DIMS
    n: tuple = DEFAULT_DIMS
    wa: tuple = ((1, 1),)
    engines: tuple = ENGINES
    repeat_seconds: float = 1.0
    seed: int = 42
    threads: int = 1
    wordsize: int = field(default_factory=default_wordsize)
    signed: bool = False

    def validate(self) -> "SweepSpec":
        for name in ("m", "k", "n", "wa", "engines"):
            if not getattr(self, name):
                raise UsageError(f"{name} must be nonempty")
        if min(self.m + self.k + self.n) < 1:
            raise UsageError("dimensions must be positive")
        for w, a in self.wa:
            if not (1 <= w <= 8 and 1 <= a <= 8):
                raise UsageError(f"precision W{w}A{a} outside 1..8")
        bad = set(self.engines) - set(ENGINES)
        if bad:
            raise UsageError(f"unknown engine(s) {sorted(bad)}; expected {ENGINES}")
        if self.wordsize not in (32, 64):
            raise UsageError("wordsize must be 32 or 64")
        if "bsgemm" in self.engines and any(k % self.wordsize for k in self.k):
            raise UsageError(f"K must be a multiple of the {self.wordsize}-bit word for packed runs")
        if self.repeat_seconds < 0 or self.threads < 1:
            raise UsageError("repeat_seconds must be >= 0 and threads >= 1")
        return self

    @classmethod
    def from_json(cls, path) -> "SweepSpec":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read sweep spec {path}: {e}") from e
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise UsageError(f"unknown sweep spec keys {sorted(unknown)}")
        kw = dict(raw)
        for d in ("m", "k", "n"):
            if d in kw:
                kw[d] = parse_dims(kw[d]) if isinstance(kw[d], str) else tuple(int(v) for v in kw[d])
        if "wa" in kw:
            kw["wa"] = parse_wa(kw["wa"]) if isinstance(kw["wa"], str) else tuple(tuple(p) for p in kw["wa"])
        if "engines" in kw:
            kw["engines"] = tuple(kw["engines"].split(",") if isinstance(kw["engines"], str) else kw["engines"])
        return cls(**kw)


def time_call(fn, repeat_seconds: float, warmup: int = WARMUP) -> float:
    """Mean nanoseconds per call, repeating until ``repeat_seconds`` have elapsed."""
    for _ in range(warmup):
        fn()
    calls, start = 0, time.perf_counter_ns()
    budget = int(repeat_seconds * 1e9)
    while True:
        fn()
        calls += 1
        elapsed = time.perf_counter_ns() - start
        if elapsed >= budget:
            return elapsed / calls


def _operand(rng, shape, bits: int, signed: bool) -> np.ndarray:
    lo, hi = (-(1 << (bits - 1)), (1 << (bits - 1)) - 1) if signed else (0, (1 << bits) - 1)
    return rng.integers(lo, hi + 1, size=shape)


def _spot_check(full: np.ndarray, Wm: np.ndarray, Bm: np.ndarray, rng, samples: int = 16) -> bool:
    rows = rng.choice(Wm.shape[0], min(samples, Wm.shape[0]), replace=False)
    cols = rng.choice(Bm.shape[1], min(samples, Bm.shape[1]), replace=False)
    return np.array_equal(full[np.ix_(rows, cols)], reference_gemm(Wm[rows], Bm[:, cols]))


def gemm_runner(engine: str, Wm, Bm, w: int, a: int, signed: bool, wordsize: int,
                threads: int = 1, kernel=None):
    """A zero-argument callable computing ``Wm @ Bm`` on ``engine``; operands prepacked."""
    if engine == "byte":
        W8, B8 = Wm.astype(np.int16), np.ascontiguousarray(Bm.astype(np.int16))
        return lambda: byte_gemm(W8, B8)
    W = pack(Wm, w, signed, wordsize)
    A = pack(Bm.T, a, signed, wordsize)

    def run():
        res = np.zeros((W.rows, A.rows), dtype=np.int64)
        bit_serial_gemm(W, A, res, kernel=kernel, threads=threads)
        return res
    return run


def run_sweep(spec: SweepSpec, out=None, log=None, kernel=None) -> list[dict]:
    """Verify then time every configuration; rows go to ``out`` as CSV when given."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    writer = None
    if out is not None:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(GEMM_COLUMNS)
        out.flush()
    rows = []
    for M in spec.m:
        for K in spec.k:
            for N in spec.n:
                for w, a in spec.wa:
                    Wm = _operand(rng, (M, K), w, spec.signed)
                    Bm = _operand(rng, (K, N), a, spec.signed)
                    for engine in spec.engines:
                        fn = gemm_runner(engine, Wm, Bm, w, a, spec.signed, spec.wordsize,
                                         spec.threads, kernel if engine == "bsgemm" else None)
                        if not _spot_check(fn(), Wm, Bm, rng):
                            raise VerificationError(
                                f"{engine} W{w}A{a} {M}x{K}x{N} disagrees with the reference")
                        ns = round(time_call(fn, spec.repeat_seconds))
                        row = dict(M=M, K=K, N=N, w=w, a=a, engine=engine, ns=ns,
                                   gops=gops(M, K, N, ns))
                        rows.append(row)
                        if writer:
                            writer.writerow([*(row[c] for c in GEMM_COLUMNS[:-1]), f"{row['gops']:.6f}"])
                            out.flush()
                        if log:
                            print(f"{engine} W{w}A{a} {M}x{K}x{N}: {row['gops']:.3f} GOPS", file=log)
    return rows


def _cmd_gemm(args) -> int:
    if args.spec:
        spec = SweepSpec.from_json(args.spec)
    else:
        spec = SweepSpec()
    for name in ("m", "k", "n"):
        v = getattr(args, name)
        if v is not None:
            setattr(spec, name, parse_dims(v))
    if args.wa is not None:
        spec.wa = parse_wa(args.wa)
    if args.engines is not None:
        spec.engines = tuple(e.strip() for e in args.engines.split(","))
    for name in ("repeat_seconds", "seed", "threads", "wordsize"):
        v = getattr(args, name)
        if v is not None:
            setattr(spec, name, v)
    if args.signed:
        spec.signed = True
    spec.validate()
    print(f"sweep: {json.dumps(asdict(spec))}", file=sys.stderr)
    from .verify import faulty_kernel
    try:
        run_sweep(spec, sys.stdout, sys.stderr if args.verbose else None, faulty_kernel(args.inject_fault))
    except VerificationError as e:
        print(f"verification failed: {e}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def _cmd_net(args) -> int:
    from .modelfile import ModelFileError, load

    path = Path(args.model)
    if not path.is_file():
        print(f"model not found: {path}", file=sys.stderr)
        return EXIT_USAGE
    try:
        spec = load(path)
        net = build_network(spec.ops, args.engine, input_bits=spec.input_bits,
                            input_signed=spec.input_signed,
                            wordsize=args.wordsize or default_wordsize(), threads=args.threads)
    except (ModelFileError, EngineError, ValueError) as e:
        print(f"cannot load {path}: {e}", file=sys.stderr)
        return EXIT_USAGE
    rng = np.random.default_rng(args.seed)
    x = _operand(rng, spec.input_shape, spec.input_bits, spec.input_signed)
    out, report = run_network(net, x, repeats=args.repeats)
    sys.stdout.write(report.to_csv())
    print(f"config: {args.engine}", file=sys.stderr)
    print(f"total_ns: {report.total_ns}", file=sys.stderr)
    print(f"output: {np.asarray(out).reshape(-1).tolist()}", file=sys.stderr)
    print(f"output_hash: {output_hash(out)}", file=sys.stderr)
    return EXIT_OK


def _cmd_verify(args) -> int:
    from .verify import SuiteResult, VerifyConfig, run_all

    sizes = (32, 64) if args.wordsize == "both" else (int(args.wordsize),)
    scale = 0.2 if args.quick else 1.0
    summaries = {}
    ok = True
    for ws in sizes:
        cfg = VerifyConfig(seed=args.seed, wordsize=ws, fault=args.inject_fault)
        if args.quick:
            cfg.gemm_cases = int(cfg.gemm_cases * scale)
            cfg.packing_cases = int(cfg.packing_cases * scale)
        results: list[SuiteResult] = run_all(cfg)
        for r in results:
            print(r.line())
            ok &= r.passed
        summaries[ws] = [(r.name.split("[")[0], r.cases, r.passed) for r in results]
    if len(sizes) == 2:
        same = summaries[32] == summaries[64]
        print(f"{'PASS' if same else 'FAIL'} wordsize 32 vs 64: identical verification results")
        ok &= same
    print("all suites passed" if ok else "verification FAILED", file=sys.stderr)
    return EXIT_OK if ok else EXIT_FAIL


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit with 2, like argparse, but via our path
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bench", description="bit-serial QNN benchmarks and verification")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    g = sub.add_parser("gemm", help="GEMM sweep, CSV rows M,K,N,w,a,engine,ns,gops")
    g.add_argument("--spec", help="JSON sweep spec; flags override its fields")
    g.add_argument("--m", help="dims, e.g. 64,256 or 64..4096 (powers of two)")
    g.add_argument("--k")
    g.add_argument("--n")
    g.add_argument("--wa", help="precision pairs, e.g. 1x1,2x2")
    g.add_argument("--engines", help=f"comma list from {','.join(ENGINES)}")
    g.add_argument("--repeat-seconds", type=float, dest="repeat_seconds")
    g.add_argument("--seed", type=int)
    g.add_argument("--threads", type=int)
    g.add_argument("--wordsize", type=int, choices=(32, 64))
    g.add_argument("--signed", action="store_true", help="two's-complement operands")
    g.add_argument("--inject-fault", choices=("sign-flip",), help=argparse.SUPPRESS)
    g.add_argument("-v", "--verbose", action="store_true")
    g.set_defaults(func=_cmd_gemm)

    n = sub.add_parser("net", help="run a model file; per-layer CSV on stdout")
    n.add_argument("--model", required=True)
    n.add_argument("--engine", required=True, choices=CONFIGS)
    n.add_argument("--repeats", type=int, default=10)
    n.add_argument("--seed", type=int, default=42)
    n.add_argument("--threads", type=int, default=1)
    n.add_argument("--wordsize", type=int, choices=(32, 64))
    n.set_defaults(func=_cmd_net)

    v = sub.add_parser("verify", help="run the oracle suites; exit 0 iff all pass")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--wordsize", choices=("32", "64", "both"), default="both")
    v.add_argument("--quick", action="store_true", help="fewer random cases")
    v.add_argument("--inject-fault", choices=("sign-flip",),
                   help="deliberately break MSB sign handling; verification must fail")
    v.set_defaults(func=_cmd_verify)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"bench: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
