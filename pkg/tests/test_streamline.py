import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bsqnn.lowering import ConvGeometry
from bsqnn.streamline import (
    Linear,
    LinearTransform,
    MaxPool,
    QuantMatrixOp,
    Quantize,
    Quantizer,
    Threshold,
    ThresholdSet,
    UnsupportedError,
    absorb_into_thresholds,
    alpha_scaling,
    batchnorm,
    collapse_linear,
    evaluate,
    integer_only,
    move_linear_past_matrix,
    quantizer_to_thresholds,
    round_thresholds_integer,
    streamline_graph,
    successive_threshold,
)

HWGQ_LEVELS = [0.0, 0.538, 1.076, 1.614]
HWGQ_THRESHOLDS = [0.0, 0.807, 1.345]


def count_exceeded(x, ts):
    """Brute-force T(x, t): thresholds strictly below x."""
    return sum(1 for t in ts if x > t)


def test_successive_threshold_boundary_maps_down():
    t = [0.0, 1.0, 2.0]
    assert list(successive_threshold(np.array([0.0, 0.5, 1.0, 1.5, 2.0, 2.5]), t)) == [0, 1, 1, 2, 2, 3]


def test_hwgq_quantizer_splits():
    q = Quantizer(HWGQ_LEVELS, HWGQ_THRESHOLDS)
    ts, lt = quantizer_to_thresholds(q)
    assert lt.scale[0] == pytest.approx(0.538, rel=1e-12)
    assert lt.shift[0] == 0
    assert np.allclose(ts.thresholds, [HWGQ_THRESHOLDS])
    xs = np.linspace(-1, 3, 4001)
    assert np.allclose(q(xs), lt.apply(ts.apply(xs[:, None]))[:, 0], atol=1e-12)


def test_binary_quantizer():
    ts, lt = quantizer_to_thresholds(Quantizer([0, 1], [0.5]))
    assert (lt.scale[0], lt.shift[0]) == (1, 0)


def test_bipolar_levels_quantizer():
    q = Quantizer([-1, 1], [0])
    ts, lt = quantizer_to_thresholds(q)
    assert (lt.scale[0], lt.shift[0]) == (2, -1)
    xs = np.linspace(-2, 2, 401)
    assert np.array_equal(q(xs), lt.apply(ts.apply(xs[:, None]))[:, 0])


def test_nonuniform_quantizer_rejected():
    with pytest.raises(UnsupportedError):
        quantizer_to_thresholds(Quantizer([0, 1, 3], [0.5, 2]))


@pytest.mark.parametrize("bits", [1, 2, 3, 4])
def test_threshold_count_grows_exponentially(bits):
    ts, _ = quantizer_to_thresholds(Quantizer.uniform_bits(bits, 0.3, -0.1))
    assert ts.count == 2 ** bits - 1


def test_collapse_identity():
    lt = collapse_linear([LinearTransform.identity(), LinearTransform.identity()])
    assert lt.is_identity()


def test_collapse_example():
    lt = collapse_linear([LinearTransform([2], [1]), LinearTransform([3], [-1])])
    assert (lt.scale[0], lt.shift[0]) == (6, 2)
    for x in (-3.0, 0.0, 0.25, 7.0):
        assert lt.apply(x)[0] == 3 * (2 * x + 1) - 1


def test_collapse_batchnorm_and_alpha(rng):
    c = 6
    mu, sigma = rng.normal(size=c), rng.uniform(0.5, 2, c)
    gamma, beta = rng.uniform(0.5, 2, c), rng.normal(size=c)
    alpha = rng.uniform(0.1, 1, c)
    lt = collapse_linear([alpha_scaling(alpha), batchnorm(mu, sigma, gamma, beta)])
    x = rng.normal(size=(100, c)) * 10
    ref = (x * alpha - mu) / sigma * gamma + beta
    assert np.allclose(lt.apply(x), ref, rtol=1e-12, atol=1e-12)


def test_collapse_channel_mismatch():
    with pytest.raises(ValueError):
        collapse_linear([LinearTransform(np.ones(3), np.zeros(3)), LinearTransform(np.ones(4), np.zeros(4))])


def test_move_zero_shift_is_pure_scale(rng):
    W = rng.integers(-3, 3, (4, 5))
    out, bias = move_linear_past_matrix(LinearTransform([0.7], [0.0]), W)
    assert np.all(out.scale == 0.7) and np.all(bias == 0)


def test_move_constant_shift_uses_row_sums(rng):
    W = rng.integers(-3, 3, (4, 5))
    out, bias = move_linear_past_matrix(LinearTransform([1.0], [0.25]), W)
    assert np.allclose(bias, W.sum(axis=1) * 0.25)


def test_move_random_pointwise(rng):
    W = rng.integers(-4, 4, (8, 8))
    a = rng.uniform(0.1, 3)
    b = rng.normal(size=8)
    out, _ = move_linear_past_matrix(LinearTransform([a], b), W)
    for _ in range(20):
        x = rng.normal(size=8) * 5
        before = W @ (a * x + b)
        after = out.apply(W @ x)
        assert np.max(np.abs(before - after)) <= 1e-6 * max(1.0, np.max(np.abs(before)))


def test_move_rejects_nonuniform_scale():
    with pytest.raises(UnsupportedError):
        move_linear_past_matrix(LinearTransform([1.0, 2.0], [0.0, 0.0]), np.ones((3, 2), int))


def test_absorb_identity_keeps_thresholds():
    ts = ThresholdSet([0.1, 0.5, 2.0])
    assert np.array_equal(absorb_into_thresholds(ts, LinearTransform.identity()).thresholds, ts.thresholds)


def test_absorb_hwgq():
    ts = ThresholdSet(HWGQ_THRESHOLDS)
    out = absorb_into_thresholds(ts, LinearTransform([0.538], [0.0]))
    assert np.allclose(out.thresholds, [[0, 1.5, 2.5]], atol=1e-12)
    xs = np.linspace(-1, 4, 2001)
    xs = xs[np.min(np.abs(xs[:, None] - [0, 1.5, 2.5]), axis=1) > 1e-9]  # skip exact ties
    assert np.array_equal(ts.apply((0.538 * xs)[:, None]), out.apply(xs[:, None]))


@given(st.floats(0.01, 10), st.floats(-10, 10), st.lists(st.floats(-50, 50), min_size=1, max_size=7, unique=True),
       st.integers(0, 2**32 - 1))
def test_absorb_random_pointwise(a, b, thresholds, seed):
    ts = ThresholdSet(sorted(thresholds))
    out = absorb_into_thresholds(ts, LinearTransform([a], [b]))
    xs = np.random.default_rng(seed).uniform(-100, 100, 10_000)
    lhs = ts.apply((a * xs + b)[:, None])[:, 0]
    rhs = out.apply(xs[:, None])[:, 0]
    # only values within rounding distance of a threshold may disagree
    near = np.min(np.abs(xs[:, None] - out.thresholds[0][None, :]), axis=1) < 1e-9 * (1 + abs(xs))
    assert np.array_equal(lhs[~near], rhs[~near])


def test_absorb_rejects_nonpositive_scale():
    with pytest.raises(ValueError):
        absorb_into_thresholds(ThresholdSet([0.0, 1.0]), LinearTransform([-1.0], [0.0]))


def test_round_hwgq_absorbed():
    ts = round_thresholds_integer(ThresholdSet([0, 1.5, 2.5]))
    assert ts.finalized
    assert ts.thresholds.tolist() == [[1, 2, 3]]
    for x in range(0, 4):
        assert ts.apply(np.array([x]))[0] == count_exceeded(x, [0, 1.5, 2.5]) == x


def test_round_integer_threshold_becomes_next():
    ts = round_thresholds_integer(ThresholdSet([2.0]))
    assert ts.thresholds.tolist() == [[3]]
    assert [ts.apply(np.array([x]))[0] for x in (2, 3)] == [0, 1]


@given(st.lists(st.floats(-900, 900), min_size=1, max_size=9, unique=True))
def test_round_preserves_integer_grid(thresholds):
    real = ThresholdSet(sorted(thresholds))
    rounded = round_thresholds_integer(real)
    xs = np.arange(-1000, 1001)[:, None]
    assert np.array_equal(real.apply(xs), rounded.apply(xs))


def test_round_exact_fraction_thresholds():
    ts = ThresholdSet([0.538 * 1.5]).exact()
    out = round_thresholds_integer(absorb_into_thresholds(ts, LinearTransform([0.538], [0]).exact()))
    assert out.thresholds.dtype == np.int64


def hwgq():
    return Quantizer(HWGQ_LEVELS, HWGQ_THRESHOLDS)


def test_streamline_hwgq_constants_give_1_2_3():
    seq = [Linear(LinearTransform([0.538], [0.0])), Quantize(hwgq())]
    s = streamline_graph(seq)
    (th,) = s.ops
    assert th.thresholds.thresholds.tolist() == [[1, 2, 3]]
    xs = np.arange(-3, 10)[:, None]
    assert np.array_equal(evaluate(s.ops, xs), np.searchsorted(HWGQ_LEVELS, evaluate(seq, xs)))


def test_streamline_bipolar_alpha_bn_layer(rng):
    w = rng.choice([-1, 1], size=(6, 5))
    mm = QuantMatrixOp.from_bipolar(w)
    alpha = alpha_scaling(rng.uniform(0.2, 1.0, 6))
    bn = batchnorm(rng.normal(size=6), rng.uniform(0.5, 2, 6), rng.uniform(0.5, 2, 6), rng.normal(size=6))
    seq = [mm, Linear(alpha), Linear(bn), Quantize(hwgq())]
    s = streamline_graph(seq)
    assert [type(op) for op in s.ops] == [QuantMatrixOp, Threshold]
    assert integer_only(s)
    for x in itertools.product(range(4), repeat=5):
        x = np.array(x)
        assert np.array_equal(hwgq().levels[evaluate(s.ops, x)], evaluate(seq, x))


def test_streamline_without_linear_ops_only_rescales():
    q = Quantizer.uniform_bits(2, 0.5)
    s = streamline_graph([Quantize(q)])
    # midpoints 0.25, 0.75, 1.25 -> floor(t) + 1
    assert s.ops[0].thresholds.thresholds.tolist() == [[1, 1, 2]]
    xs = np.arange(-2, 4)[:, None]
    assert np.array_equal(evaluate(s.ops, xs), [[count_exceeded(x, q.thresholds)] for x in xs[:, 0]])
    assert float(s.output_transform.scale[0]) == 0.5


def test_streamline_two_stacked_layers(rng):
    q1 = Quantizer.uniform_bits(2, 0.4, 0.1)
    q2 = Quantizer.uniform_bits(2, 0.3, -0.2)
    seq = [
        QuantMatrixOp(rng.integers(-2, 2, (4, 3)), bits=2),
        Linear(batchnorm(rng.normal(size=4), rng.uniform(1, 3, 4), rng.uniform(0.5, 1.5, 4), rng.normal(size=4))),
        Quantize(q1),
        QuantMatrixOp.from_bipolar(rng.choice([-1, 1], size=(5, 4))),
        Linear(alpha_scaling(rng.uniform(0.2, 1, 5))),
        Quantize(q2),
    ]
    s = streamline_graph(seq)
    assert integer_only(s)
    for x in itertools.product(range(4), repeat=3):
        x = np.array(x)
        assert np.array_equal(q2.levels[evaluate(s.ops, x)], evaluate(seq, x))


def test_streamline_conv_pool(rng):
    g = ConvGeometry(6, 6, 3, 3, 3, stride=1, pad=1, out_c=4)
    q = Quantizer.uniform_bits(2, 0.25)
    seq = [
        QuantMatrixOp(rng.integers(-4, 4, (4, 3, 3, 3)), bits=3, geometry=g),
        Linear(batchnorm(rng.normal(size=4), rng.uniform(1, 3, 4), rng.uniform(0.5, 1.5, 4), rng.normal(size=4))),
        MaxPool(2, 2),
        Quantize(q),
    ]
    s = streamline_graph(seq)
    assert integer_only(s)
    for _ in range(20):
        x = rng.integers(0, 4, (6, 6, 3))
        assert np.array_equal(q.levels[evaluate(s.ops, x)], evaluate(seq, x))


def test_streamline_rejects_pad_with_offset(rng):
    g = ConvGeometry(4, 4, 2, 3, 3, pad=1, out_c=2)
    seq = [Quantize(Quantizer.uniform_bits(1, 1.0, -0.5)),
           QuantMatrixOp(rng.integers(-1, 1, (2, 3, 3, 2)), bits=1, geometry=g)]
    with pytest.raises(UnsupportedError, match="layer 1"):
        streamline_graph(seq)


def test_streamline_rejects_negative_scale():
    seq = [Linear(LinearTransform([-1.0], [0.0])), Quantize(Quantizer([0, 1], [0.5]))]
    with pytest.raises(UnsupportedError, match="layer 1"):
        streamline_graph(seq)


def test_quantizer_validation():
    with pytest.raises(ValueError):
        Quantizer([0, 1, 2], [0.5])
    with pytest.raises(ValueError):
        Quantizer([0, 2, 1], [0.5, 1.5])
    assert not Quantizer([0, 1, 3], [0.5, 2]).uniform


def test_threshold_set_monotonic():
    with pytest.raises(ValueError):
        ThresholdSet([1.0, 0.5])
    ThresholdSet(np.array([[1, 1, 2]]), finalized=True)  # collapsed neighbours are legal
