import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from binet import bitpack
from binet.bitpack import (
    PackedBitTensor,
    PackedConv,
    PackedLinear,
    apply_shift,
    backends,
    float_sign_conv_reference,
    im2row_pack,
    naive_conv2d_loops,
    pack,
    packed_conv2d,
    packed_conv2d_int,
    packed_linear_int,
    popcount_native,
    popcount_swar,
    unpack,
    xnor_dot,
    xnor_gemm,
)

signs_strategy = arrays(np.int8, st.integers(1, 300), elements=st.sampled_from([-1, 1]))


def _rand_signs(rng, shape):
    return np.where(rng.random(shape) < 0.5, 1, -1).astype(np.int8)


# -- packing -----------------------------------------------------------------
def test_pack_examples():
    p = pack([1, -1, 1])
    assert p.logical_len == 3 and p.words.tolist() == [0b101]
    assert pack(np.ones(64)).words.tolist() == [2**64 - 1]
    x = _rand_signs(np.random.default_rng(0), 1000)
    assert np.array_equal(unpack(pack(x)), x)


def test_pack_rejects_non_binary():
    with pytest.raises(ValueError):
        pack([1, 0, -1])


@settings(max_examples=200, deadline=None)
@given(signs_strategy)
def test_round_trip_and_tail_zero(x):
    p = pack(x)
    assert p.words.shape == ((x.size + 63) // 64,)
    assert np.array_equal(unpack(p), x)
    assert pack(unpack(p)) == p
    tail = p.words[-1] & ~bitpack.tail_mask(x.size)[-1]
    assert tail == 0


def test_words_are_little_endian_lsb_first():
    x = -np.ones(130, np.int8)
    x[[0, 65, 129]] = 1
    p = pack(x)
    assert p.words.tolist() == [1, 2, 2]
    assert p.words.astype("<u8").tobytes()[:1] == b"\x01"


# -- popcount and dot ----------------------------------------------------------
@settings(max_examples=100, deadline=None)
@given(arrays(np.uint64, st.integers(1, 64), elements=st.integers(0, 2**64 - 1)))
def test_popcount_native_equals_swar(words):
    ref = np.array([bin(int(w)).count("1") for w in words])
    assert np.array_equal(popcount_swar(words), ref)
    assert np.array_equal(popcount_native(words), ref)


def test_xnor_dot_examples():
    a = pack(np.ones(8))
    assert xnor_dot(a, a) == 8
    assert xnor_dot(a, pack(-np.ones(8))) == -8
    assert xnor_dot(pack([1, 1, -1, -1]), pack([1, -1, 1, -1])) == 0
    with pytest.raises(ValueError):
        xnor_dot(pack([1, 1]), pack([1, 1, 1]))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 500), st.integers(0, 2**32 - 1))
def test_xnor_dot_matches_integer_dot_and_ignores_tail_garbage(n, seed):
    rng = np.random.default_rng(seed)
    a, b = _rand_signs(rng, n), _rand_signs(rng, n)
    ref = int(np.dot(a.astype(np.int64), b.astype(np.int64)))
    pa, pb = pack(a), pack(b)
    assert xnor_dot(pa, pb) == ref
    assert xnor_dot(pa, pb, popcount_swar) == ref
    outside = ~bitpack.tail_mask(n)
    ga = rng.integers(0, 2**63, pa.words.shape, dtype=np.uint64) & outside
    gb = rng.integers(0, 2**63, pb.words.shape, dtype=np.uint64) & outside
    dirty_a = PackedBitTensor(pa.words | ga, n, pa.shape)
    dirty_b = PackedBitTensor(pb.words | gb, n, pb.shape)
    assert xnor_dot(dirty_a, dirty_b) == ref


# -- convolution -----------------------------------------------------------------
def test_packed_conv_examples():
    layer = PackedConv.from_signs(np.ones((1, 1, 2, 2), np.int8), 0)
    x = np.ones((1, 1, 2, 2), np.int8)
    assert packed_conv2d(x, layer).tolist() == [[[[4]]]]
    layer_neg = PackedConv.from_signs(np.ones((1, 1, 2, 2), np.int8), -1)
    assert packed_conv2d(x, layer_neg).tolist() == [[[[2.0]]]]


def test_packed_conv_geometry_errors():
    layer = PackedConv.from_signs(np.ones((2, 3, 3, 3), np.int8), 0)
    with pytest.raises(ValueError):
        packed_conv2d(np.ones((1, 4, 5, 5), np.int8), layer)
    with pytest.raises(ValueError):
        packed_conv2d(np.ones((1, 3, 1, 1), np.int8), layer)


def _random_case(rng, max_c=150):
    n = int(rng.integers(1, 3))
    c = int(rng.integers(1, max_c))
    o = int(rng.integers(1, 9))
    k = int(rng.integers(1, 4))
    s = int(rng.integers(1, 3))
    p = int(rng.integers(0, 3))
    h = int(rng.integers(max(k - 2 * p, 1), 8))
    w = int(rng.integers(max(k - 2 * p, 1), 8))
    shift = int(rng.integers(-20, 21))
    return _rand_signs(rng, (n, c, h, w)), _rand_signs(rng, (o, c, k, k)), shift, s, p


@pytest.mark.parametrize("backend", backends())
def test_packed_conv_exact_on_100_random_cases(backend):
    rng = np.random.default_rng(99)
    for _ in range(100):
        x, w, shift, s, p = _random_case(rng)
        got = packed_conv2d(x, PackedConv.from_signs(w, shift, s, p), backend)
        ref = float_sign_conv_reference(x, w, shift, s, p)
        assert got.shape == ref.shape
        assert np.array_equal(got.astype(np.float64), ref)


def test_packed_conv_matches_loop_oracle():
    rng = np.random.default_rng(3)
    for _ in range(5):
        x, w, shift, s, p = _random_case(rng, max_c=20)
        ints = packed_conv2d_int(x, PackedConv.from_signs(w, 0, s, p))
        assert np.array_equal(ints, naive_conv2d_loops(x, w, s, p).astype(np.int64))


def test_backends_and_popcounts_agree():
    rng = np.random.default_rng(5)
    x, w, _, s, p = _random_case(rng)
    layer = PackedConv.from_signs(w, 0, s, p)
    rows = im2row_pack(x, layer.kernel, s, p)
    ref = xnor_gemm(rows.rows, layer.weights.words, rows.masks, rows.counts, "numpy", popcount_swar)
    for b in backends():
        assert np.array_equal(xnor_gemm(rows.rows, layer.weights.words, rows.masks, rows.counts, b), ref)
    with pytest.raises(ValueError):
        xnor_gemm(rows.rows, layer.weights.words, rows.masks, rows.counts, "gpu")


def test_gemm_ignores_garbage_in_masked_bits():
    rng = np.random.default_rng(6)
    for _ in range(20):
        x, w, _, s, p = _random_case(rng)
        layer = PackedConv.from_signs(w, 0, s, p)
        rows = im2row_pack(x, layer.kernel, s, p)
        ref = xnor_gemm(rows.rows, layer.weights.words, rows.masks, rows.counts, "numpy")
        q = rows.masks.shape[0]
        inv = ~rows.masks[np.arange(rows.rows.shape[0]) % q]
        garbage = rng.integers(0, 2**63, rows.rows.shape, dtype=np.uint64) & inv
        wgarb = rng.integers(0, 2**63, layer.weights.words.shape, dtype=np.uint64) & ~bitpack.tail_mask(rows.field)
        for b in backends():
            got = xnor_gemm(rows.rows | garbage, layer.weights.words | wgarb, rows.masks, rows.counts, b)
            assert np.array_equal(got, ref)


def test_packed_linear_exact():
    rng = np.random.default_rng(8)
    for n_in in (1, 63, 64, 65, 200):
        x = rng.standard_normal((5, n_in))
        x[0, 0] = 0.0  # sign(0) = +1
        w = _rand_signs(rng, (7, n_in))
        got = packed_linear_int(x, PackedLinear(pack(w), 0))
        assert np.array_equal(got, np.where(x >= 0, 1, -1) @ w.T.astype(np.int64))


@pytest.mark.parametrize("shift", range(-20, 21))
def test_shift_exactness(shift):
    acc = np.arange(-300, 301, 7, dtype=np.int64)
    got = apply_shift(acc, shift)
    assert np.array_equal(np.asarray(got, np.float64), acc.astype(np.float64) * 2.0**shift)
    if shift >= 0:
        assert got.dtype == np.int64
