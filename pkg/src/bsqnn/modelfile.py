"""Human-readable model description files.

Grammar (one item per line, ``#`` starts a comment)::

    file     := input-section layer-section*
    section  := "[" kind [name] "]" NEWLINE (key "=" values NEWLINE)*
    values   := whitespace-separated numbers or words; ";" separates rows

Sections, in layer order:

``[input]``            shape = H W C (or K for a vector), bits, signed
``[conv NAME]``        weights (container path), kernel = kh kw, stride, pad,
                       groups, bipolar
``[fc NAME]``          weights, bipolar
``[batchnorm NAME]``   mu, sigma, gamma, beta (per channel)
``[alpha NAME]``       alpha (per channel)
``[linear NAME]``      scale, shift
``[quantize NAME]``    levels, thresholds
``[threshold NAME]``   thresholds (rows per channel, ``;``-separated), integer
``[maxpool NAME]``     window, stride

Weight paths are relative to the model file. Conv containers hold the
``M x (kh*kw*C/groups)`` kernel matrix with C innermost. Bipolar layers
store ``{0, -1}`` as signed 1-bit planes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .bitplane import pack, unpack
from .lowering import ConvGeometry
from .streamline import (
    Linear,
    LinearTransform,
    MaxPool,
    QuantMatrixOp,
    Quantize,
    Quantizer,
    Threshold,
    ThresholdSet,
    alpha_scaling,
    batchnorm,
)

LAYER_KINDS = ("conv", "fc", "batchnorm", "alpha", "linear", "quantize", "threshold", "maxpool")


class ModelFileError(ValueError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


@dataclass
class ModelSpec:
    input_shape: tuple
    input_bits: int = 8
    input_signed: bool = False
    ops: list = field(default_factory=list)


@dataclass
class _Section:
    kind: str
    name: str
    line: int
    values: dict = field(default_factory=dict)  # key -> (line, raw string)


def _parse_sections(text: str, path) -> list[_Section]:
    sections: list[_Section] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ModelFileError(path, lineno, "unterminated section header")
            parts = line[1:-1].split()
            if not parts or len(parts) > 2:
                raise ModelFileError(path, lineno, "section header must be [kind] or [kind name]")
            kind = parts[0].lower()
            if kind != "input" and kind not in LAYER_KINDS:
                raise ModelFileError(path, lineno, f"unknown section kind {kind!r}")
            sections.append(_Section(kind, parts[1] if len(parts) > 1 else "", lineno))
            continue
        if "=" not in line:
            raise ModelFileError(path, lineno, "expected key = value")
        if not sections:
            raise ModelFileError(path, lineno, "key outside of any section")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ModelFileError(path, lineno, "empty key")
        if key in sections[-1].values:
            raise ModelFileError(path, lineno, f"duplicate key {key!r}")
        sections[-1].values[key] = (lineno, value)
    return sections


class _Reader:
    def __init__(self, sec: _Section, path):
        self.sec, self.path = sec, path
        self.used: set = set()

    def _get(self, key, default):
        if key not in self.sec.values:
            if default is _REQUIRED:
                raise ModelFileError(self.path, self.sec.line,
                                     f"[{self.sec.kind} {self.sec.name}] missing key {key!r}")
            return None, default
        self.used.add(key)
        return self.sec.values[key]

    def floats(self, key, default=None):
        return self._conv(key, default, float)

    def ints(self, key, default=None):
        return self._conv(key, default, int)

    def _conv(self, key, default, typ):
        line, raw = self._get(key, _REQUIRED if default is None else default)
        if line is None:
            return default
        try:
            return np.array([typ(v) for v in raw.split()])
        except ValueError:
            raise ModelFileError(self.path, line, f"bad {typ.__name__} list for {key!r}: {raw!r}") from None

    def int(self, key, default=None):
        v = self.ints(key, default if default is None else [default])
        if len(v) != 1:
            raise ModelFileError(self.path, self.sec.values[key][0], f"{key!r} takes one value")
        return int(v[0])

    def flag(self, key, default=False):
        line, raw = self._get(key, default)
        if line is None:
            return default
        if raw.lower() in ("true", "yes", "1"):
            return True
        if raw.lower() in ("false", "no", "0"):
            return False
        raise ModelFileError(self.path, line, f"{key!r} must be true or false")

    def text(self, key):
        return self._get(key, _REQUIRED)[1]

    def rows(self, key):
        line, raw = self._get(key, _REQUIRED)
        try:
            out = [[float(v) for v in r.split()] for r in raw.split(";")]
        except ValueError:
            raise ModelFileError(self.path, line, f"bad number in {key!r}") from None
        if len({len(r) for r in out}) != 1:
            raise ModelFileError(self.path, line, f"ragged rows in {key!r}")
        return np.array(out), line

    def line_of(self, key):
        return self.sec.values.get(key, (self.sec.line, ""))[0]

    def finish(self):
        extra = set(self.sec.values) - self.used
        if extra:
            key = sorted(extra, key=lambda k: self.sec.values[k][0])[0]
            raise ModelFileError(self.path, self.sec.values[key][0], f"unknown key {key!r}")


_REQUIRED = object()


def loads(text: str, base_dir=".", path="<model>") -> ModelSpec:
    sections = _parse_sections(text, path)
    if not sections or sections[0].kind != "input":
        raise ModelFileError(path, sections[0].line if sections else 1, "file must start with [input]")
    r = _Reader(sections[0], path)
    shape = tuple(int(v) for v in r.ints("shape"))
    spec = ModelSpec(shape, r.int("bits", 8), r.flag("signed", False))
    r.finish()
    if len(shape) not in (1, 3) or min(shape) < 1:
        raise ModelFileError(path, sections[0].line, f"bad input shape {shape}")
    cur = shape
    base_dir = Path(base_dir)
    for sec in sections[1:]:
        r = _Reader(sec, path)
        try:
            op, cur = _build(sec, r, cur, base_dir)
        except ModelFileError:
            raise
        except (ValueError, OSError) as e:
            raise ModelFileError(path, sec.line, f"[{sec.kind} {sec.name}]: {e}") from e
        r.finish()
        spec.ops.append(op)
    return spec


def _channels(shape) -> int:
    return shape[-1]


def _build(sec: _Section, r: _Reader, cur: tuple, base_dir: Path):
    kind, name = sec.kind, sec.name
    if kind in ("conv", "fc"):
        wpath = base_dir / r.text("weights")
        try:
            packed = container.load(wpath)
        except (OSError, container.ContainerError) as e:
            raise ModelFileError(r.path, r.line_of("weights"), f"cannot load weights: {e}") from e
        W = unpack(packed)
        bipolar = r.flag("bipolar", False)
        if kind == "fc":
            k = int(np.prod(cur))
            if W.shape[1] != k:
                raise ModelFileError(r.path, r.line_of("weights"),
                                     f"fc weights have depth {W.shape[1]}, input has {k} values")
            op = QuantMatrixOp(W, packed.bits, packed.signed, bipolar, None, name)
            return op, (W.shape[0],)
        if len(cur) != 3:
            raise ModelFileError(r.path, sec.line, "conv needs an H x W x C input")
        kh, kw = (int(v) for v in r.ints("kernel"))
        g = ConvGeometry(cur[0], cur[1], cur[2], kh, kw, r.int("stride", 1), r.int("pad", 0),
                         W.shape[0], r.int("groups", 1))
        if W.shape[1] != g.depth:
            raise ModelFileError(r.path, r.line_of("weights"),
                                 f"conv weights have depth {W.shape[1]}, geometry needs {g.depth}")
        w4 = W.reshape(g.out_c, kh, kw, g.in_c // g.groups)
        return QuantMatrixOp(w4, packed.bits, packed.signed, bipolar, g, name), (g.out_h, g.out_w, g.out_c)
    if kind == "batchnorm":
        lt = batchnorm(r.floats("mu"), r.floats("sigma"), r.floats("gamma"), r.floats("beta"))
        _check_channels(r, lt.channels, cur, "mu")
        return Linear(lt, name), cur
    if kind == "alpha":
        lt = alpha_scaling(r.floats("alpha"))
        _check_channels(r, lt.channels, cur, "alpha")
        return Linear(lt, name), cur
    if kind == "linear":
        lt = LinearTransform(r.floats("scale"), r.floats("shift"))
        _check_channels(r, lt.channels, cur, "scale")
        return Linear(lt, name), cur
    if kind == "quantize":
        return Quantize(Quantizer(r.floats("levels"), r.floats("thresholds")), name), cur
    if kind == "threshold":
        t, line = r.rows("thresholds")
        integer = r.flag("integer", False)
        if integer:
            if np.any(t != np.round(t)):
                raise ModelFileError(r.path, line, "integer thresholds must be whole numbers")
            ts = ThresholdSet(t.astype(np.int64), finalized=True)
        else:
            ts = ThresholdSet(t)
        _check_channels(r, ts.channels, cur, "thresholds")
        return Threshold(ts, name), cur
    if kind == "maxpool":
        window = r.int("window")
        stride = r.int("stride", window)
        if len(cur) != 3:
            raise ModelFileError(r.path, sec.line, "maxpool needs an H x W x C input")
        oh, ow = (cur[0] - window) // stride + 1, (cur[1] - window) // stride + 1
        if min(oh, ow) < 1:
            raise ModelFileError(r.path, r.line_of("window"), f"window {window} too large for {cur}")
        return MaxPool(window, stride, name), (oh, ow, cur[2])
    raise ModelFileError(r.path, sec.line, f"unknown kind {kind!r}")


def _check_channels(r: _Reader, n: int, cur: tuple, key: str) -> None:
    if n not in (1, _channels(cur)):
        raise ModelFileError(r.path, r.line_of(key), f"{n} channels, tensor has {_channels(cur)}")


def load(path) -> ModelSpec:
    path = Path(path)
    return loads(path.read_text(), path.parent, path)


def _fmt(values) -> str:
    # repr round-trips float64 exactly; integral values print without ".0"
    return " ".join(str(int(v)) if float(v).is_integer() else repr(float(v))
                    for v in np.ravel(values))


def dump(spec: ModelSpec, path, wordsize: int = 64) -> None:
    """Write ``spec`` to ``path`` with one ``.bsqw`` container per matrix layer."""
    path = Path(path)
    lines = ["# bsqnn model", "[input]",
             f"shape = {' '.join(str(v) for v in spec.input_shape)}",
             f"bits = {spec.input_bits}", f"signed = {str(spec.input_signed).lower()}", ""]
    for i, op in enumerate(spec.ops):
        name = op.name or f"l{i}"
        if isinstance(op, QuantMatrixOp):
            wfile = f"{path.stem}.{name}.bsqw"
            container.save(path.parent / wfile, pack(op.stored_lowered(), op.bits, op.signed, wordsize))
            g = op.geometry
            if g is None:
                lines += [f"[fc {name}]", f"weights = {wfile}"]
            else:
                lines += [f"[conv {name}]", f"weights = {wfile}", f"kernel = {g.k_h} {g.k_w}",
                          f"stride = {g.stride}", f"pad = {g.pad}", f"groups = {g.groups}"]
            lines.append(f"bipolar = {str(op.bipolar).lower()}")
        elif isinstance(op, Linear):
            lt = op.transform.to_float()
            lines += [f"[linear {name}]", f"scale = {_fmt(lt.scale)}", f"shift = {_fmt(lt.shift)}"]
        elif isinstance(op, Quantize):
            q = op.quantizer
            lines += [f"[quantize {name}]", f"levels = {_fmt(q.levels)}",
                      f"thresholds = {_fmt(q.thresholds)}"]
        elif isinstance(op, Threshold):
            ts = op.thresholds
            rows = " ; ".join(_fmt(row) for row in ts.thresholds)
            lines += [f"[threshold {name}]", f"thresholds = {rows}",
                      f"integer = {str(ts.finalized).lower()}"]
        elif isinstance(op, MaxPool):
            lines += [f"[maxpool {name}]", f"window = {op.window}", f"stride = {op.stride}"]
        else:
            raise TypeError(f"cannot serialize {op!r}")
        lines.append("")
    path.write_text("\n".join(lines))
