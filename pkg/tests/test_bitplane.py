import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from bsqnn import container
from bsqnn.bitplane import (
    BitMatrix,
    RangeError,
    pack,
    pack_interleaved,
    unpack,
    unpack_interleaved,
    value_range,
)


def plane_bit(p, plane, r, d):
    bm = p.planes[plane]
    word = int(bm.data[r, d // bm.wordsize])
    return (word >> (d % bm.wordsize)) & 1


def test_pack_unsigned_three():
    p = pack(np.array([[3]]), bits=2, signed=False)
    assert plane_bit(p, 0, 0, 0) == 1
    assert plane_bit(p, 1, 0, 0) == 1


def test_pack_signed_minus_two():
    p = pack(np.array([[-2]]), bits=2, signed=True)
    assert plane_bit(p, 0, 0, 0) == 0
    assert plane_bit(p, 1, 0, 0) == 1
    assert unpack(p)[0, 0] == -2


def test_unpack_zero_planes():
    p = pack(np.zeros((3, 70), dtype=int), bits=3)
    assert not unpack(p).any()


def test_unpack_single_signed_plane():
    m = np.array([[0, -1, -1, 0]])
    p = pack(m, bits=1, signed=True)
    out = unpack(p)
    assert set(np.unique(out)) <= {-1, 0}
    assert np.array_equal(out, m)


def test_unpack_three_bit_weighted_sum():
    p = pack(np.array([[3]]), bits=3)
    assert [plane_bit(p, i, 0, 0) for i in range(3)] == [1, 1, 0]
    assert unpack(p)[0, 0] == 3


def test_packing_runs_along_depth(wordsize):
    m = np.zeros((2, wordsize + 5), dtype=int)
    m[1, wordsize + 2] = 1
    p = pack(m, bits=1, wordsize=wordsize)
    assert p.words_per_row == 2
    assert int(p.planes[0].data[1, 1]) == 1 << 2
    assert not p.planes[0].data[0].any()


@pytest.mark.parametrize("bits,signed,bad", [(2, False, 4), (2, False, -1), (3, True, 4), (3, True, -5)])
def test_pack_range_error_names_position(bits, signed, bad):
    m = np.zeros((3, 4), dtype=int)
    m[2, 1] = bad
    with pytest.raises(RangeError, match=r"\(2, 1\)"):
        pack(m, bits, signed)


def test_pack_rejects_bits_out_of_library_limit():
    with pytest.raises(ValueError):
        pack(np.zeros((1, 1), dtype=int), bits=9)


@st.composite
def int_matrices(draw, max_rows=8, max_depth=150):
    bits = draw(st.integers(1, 4))
    signed = draw(st.booleans())
    lo, hi = value_range(bits, signed)
    shape = (draw(st.integers(1, max_rows)), draw(st.integers(1, max_depth)))
    m = draw(hnp.arrays(np.int64, shape, elements=st.integers(lo, hi)))
    return m, bits, signed


@given(int_matrices(), st.sampled_from([32, 64]))
def test_roundtrip_and_padding(case, wordsize):
    m, bits, signed = case
    p = pack(m, bits, signed, wordsize)
    assert np.array_equal(unpack(p), m)
    assert all(pl.padding_popcount() == 0 for pl in p.planes)


def test_roundtrip_random_8x8(rng):
    for bits in range(1, 5):
        for signed in (False, True):
            lo, hi = value_range(bits, signed)
            m = rng.integers(lo, hi + 1, size=(8, 8))
            assert np.array_equal(unpack(pack(m, bits, signed)), m)


def test_footprint_two_bits_is_quarter_of_bytes():
    m = np.ones((16, 1024), dtype=int)
    p = pack(m, bits=2, wordsize=64)
    byte_layout = 16 * 1024 * 8
    assert p.footprint_bits() == 16 * 1024 * 2
    assert p.footprint_bits() * 4 == byte_layout


def test_footprint_includes_word_padding():
    p = pack(np.ones((1, 65), dtype=int), bits=2, wordsize=64)
    assert p.footprint_bits() == 2 * 128


def test_bitmatrix_from_bits_matches_definition(wordsize, rng):
    bits = rng.integers(0, 2, size=(5, 3 * wordsize - 7))
    bm = BitMatrix.from_bits(bits, wordsize)
    for r in range(5):
        for d in range(bits.shape[1]):
            assert (int(bm.data[r, d // wordsize]) >> (d % wordsize)) & 1 == bits[r, d]
    assert bm.padding_popcount() == 0
    assert np.array_equal(bm.to_bits(), bits)


def test_interleaved_three_channels():
    it = pack_interleaved(np.array([[[1, 0, 1]]]), bits=1, wordsize=64)
    assert it.data.shape == (1, 1, 1, 1)
    assert int(it.data[0, 0, 0, 0]) == 0b101


def test_interleaved_bit_planes_single_channel():
    it = pack_interleaved(np.array([[[2]]]), bits=2)
    assert int(it.data[0, 0, 0, 0]) == 0
    assert int(it.data[1, 0, 0, 0]) == 1


def test_interleaved_roundtrip(rng, wordsize):
    t = rng.integers(0, 4, size=(4, 4, 8))
    it = pack_interleaved(t, bits=2, wordsize=wordsize)
    assert np.array_equal(unpack_interleaved(it), t)


def test_interleaved_pads_pixels_to_words(rng, wordsize):
    t = rng.integers(0, 8, size=(3, 2, wordsize + 3))
    it = pack_interleaved(t, bits=3, wordsize=wordsize)
    assert it.words_per_pixel == 2
    tail_mask = ~((1 << 3) - 1) & ((1 << wordsize) - 1)
    assert not np.any(it.data[..., 1] & it.data.dtype.type(tail_mask))
    assert np.array_equal(unpack_interleaved(it), t)


def test_interleaved_range_error():
    with pytest.raises(RangeError):
        pack_interleaved(np.full((1, 1, 2), 4), bits=2)


def test_container_header_layout(wordsize, rng):
    m = rng.integers(-2, 2, size=(3, 70))
    p = pack(m, bits=2, signed=True, wordsize=wordsize)
    buf = container.dumps(p)
    assert buf[:4] == b"BSQW"
    version, ws, bits, signed, reserved, rows, depth = struct.unpack_from("<HBBBBII", buf, 4)
    assert (version, ws, bits, signed, reserved, rows, depth) == (1, wordsize, 2, 1, 0, 3, 70)
    wpr = -(-70 // wordsize)
    assert len(buf) == 18 + 2 * 3 * wpr * wordsize // 8
    first_word = int.from_bytes(buf[18:18 + wordsize // 8], "little")
    assert first_word == int(p.planes[0].data[0, 0])


def test_container_roundtrip(tmp_path, wordsize, rng):
    m = rng.integers(0, 16, size=(5, 200))
    p = pack(m, bits=4, wordsize=wordsize)
    path = tmp_path / "w.bsqw"
    container.save(path, p)
    q = container.load(path)
    assert q == p
    assert np.array_equal(unpack(q), m)


def test_container_rejects_corruption():
    p = pack(np.ones((1, 3), dtype=int), bits=1)
    buf = bytearray(container.dumps(p))
    with pytest.raises(container.ContainerError):
        container.loads(b"XXXX" + bytes(buf[4:]))
    with pytest.raises(container.ContainerError):
        container.loads(bytes(buf[:-1]))
    buf[-1] = 0xFF  # sets padding bits in the last word
    with pytest.raises(container.ContainerError, match="padding"):
        container.loads(bytes(buf))
