import numpy as np
import pytest

from bsqnn import container
from bsqnn.bitplane import pack
from bsqnn.modelfile import ModelFileError, dump, load, loads
from bsqnn.streamline import Linear, MaxPool, QuantMatrixOp, Quantize, Threshold, evaluate
from bsqnn.toy import ToyConfig, make_toy_network, random_input, write_toy_model


def write_weights(tmp_path, name, w, bits, signed=True):
    container.save(tmp_path / name, pack(w, bits, signed))


MODEL = """\
# comment line
[input]
shape = 4 4 2
bits = 2

[conv c1]
weights = c1.bsqw   # trailing comment
kernel = 3 3
pad = 1
[batchnorm bn]
mu = 0 1 2
sigma = 1 1 1
gamma = 1 1 1
beta = 0 0 0
[quantize q]
levels = 0 1
thresholds = 0.5
[maxpool p]
window = 2
[fc f]
weights = f.bsqw
[threshold t]
thresholds = 1 2 ; 0 5
integer = true
"""


@pytest.fixture
def model_dir(tmp_path, rng):
    write_weights(tmp_path, "c1.bsqw", rng.integers(-2, 2, (3, 18)), 2)
    write_weights(tmp_path, "f.bsqw", rng.integers(-2, 2, (2, 12)), 2)
    return tmp_path


def test_parse_and_shapes(model_dir):
    spec = loads(MODEL, model_dir)
    assert spec.input_shape == (4, 4, 2) and spec.input_bits == 2 and not spec.input_signed
    kinds = [type(op) for op in spec.ops]
    assert kinds == [QuantMatrixOp, Linear, Quantize, MaxPool, QuantMatrixOp, Threshold]
    conv = spec.ops[0]
    assert conv.geometry.out_c == 3 and conv.weights.shape == (3, 3, 3, 2)
    assert spec.ops[3].stride == 2
    assert spec.ops[-1].thresholds.finalized
    assert spec.ops[-1].thresholds.thresholds.tolist() == [[1, 2], [0, 5]]


@pytest.mark.parametrize("old,new,line", [
    ("kernel = 3 3", "kernel = 3 x", 8),
    ("pad = 1", "padding = 1", 9),
    ("[maxpool p]", "[avgpool p]", 18),
    ("weights = f.bsqw", "weights = missing.bsqw", 21),
    ("thresholds = 1 2 ; 0 5", "thresholds = 1 2 ; 0", 23),
    ("mu = 0 1 2", "mu = 0 1", 10),
    ("bits = 2", "bits 2", 4),
    ("window = 2", "window = 9", 19),
])
def test_errors_report_line_numbers(model_dir, old, new, line):
    with pytest.raises(ModelFileError) as exc:
        loads(MODEL.replace(old, new), model_dir)
    assert exc.value.line == line, str(exc.value)


def test_depth_mismatch_is_reported(model_dir, rng):
    write_weights(model_dir, "f.bsqw", rng.integers(-2, 2, (2, 13)), 2)
    with pytest.raises(ModelFileError, match="depth 13"):
        loads(MODEL, model_dir)


def test_must_start_with_input(model_dir):
    with pytest.raises(ModelFileError):
        loads("[fc f]\nweights = f.bsqw\n", model_dir)


def test_toy_roundtrip_preserves_semantics(tmp_path, wordsize):
    path = write_toy_model(tmp_path, wordsize=wordsize)
    spec, loaded = make_toy_network(), load(path)
    x = random_input(ToyConfig(), np.random.default_rng(5))
    assert np.array_equal(evaluate(loaded.ops, x), evaluate(spec.ops, x))
    assert loaded.input_shape == spec.input_shape
    assert [op.name for op in loaded.ops] == [op.name for op in spec.ops]
    assert loaded.ops[4].bipolar


def test_dump_then_load_threshold_and_linear(model_dir, rng):
    spec = loads(MODEL, model_dir)
    dump(spec, model_dir / "copy.model")
    again = load(model_dir / "copy.model")
    x = rng.integers(0, 4, (4, 4, 2))
    assert np.array_equal(evaluate(again.ops, x), evaluate(spec.ops, x))
