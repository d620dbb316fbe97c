import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from binrobust import bitkernel as K

from conftest import pm1


@given(st.integers(1, 300), st.integers(0, 2 ** 31 - 1))
@settings(max_examples=60, deadline=None)
def test_pack_roundtrip(n, seed):
    t = pm1(np.random.default_rng(seed), (n,))
    p = K.pack_signs(t)
    back = K.unpack_signs(p)
    assert np.array_equal(back.ravel(), t)


@pytest.mark.parametrize("n", [1, 63, 64, 65, 128, 200])
def test_pack_roundtrip_word_boundaries(n):
    t = pm1(np.random.default_rng(n), (n,))
    assert np.array_equal(K.unpack_signs(K.pack_signs(t)).ravel(), t)


def test_pack_rejects_nonpm1():
    with pytest.raises(K.DomainError):
        K.pack_signs(np.array([1.0, 0.5, -1.0]))
    with pytest.raises(K.DomainError):
        K.pack_signs(np.array([1.0, 0.0]))


def test_packed_dot_hand_cases():
    # identical vectors: dot = n
    a = np.array([1.0, -1.0, 1.0, -1.0])
    assert K.packed_dot(K.pack_signs(a), K.pack_signs(a)) == 4
    # opposite vectors: dot = -n
    assert K.packed_dot(K.pack_signs(a), K.pack_signs(-a)) == -4
    # one disagreement out of 3: 3 - 2*1 = 1
    b = np.array([1.0, 1.0, -1.0])
    c = np.array([1.0, -1.0, -1.0])
    assert K.packed_dot(K.pack_signs(b), K.pack_signs(c)) == 1


@given(st.integers(1, 200), st.integers(0, 2 ** 31 - 1))
@settings(max_examples=60, deadline=None)
def test_packed_dot_matches_float(n, seed):
    rng = np.random.default_rng(seed)
    a, b = pm1(rng, (n,)), pm1(rng, (n,))
    assert K.packed_dot(K.pack_signs(a), K.pack_signs(b)) == int(a @ b)


@given(st.integers(1, 200), st.integers(0, 2 ** 31 - 1))
@settings(max_examples=30, deadline=None)
def test_packed_dot_symmetric(n, seed):
    rng = np.random.default_rng(seed)
    a, b = pm1(rng, (n,)), pm1(rng, (n,))
    pa, pb = K.pack_signs(a), K.pack_signs(b)
    assert K.packed_dot(pa, pb) == K.packed_dot(pb, pa)


@pytest.mark.parametrize("m,n,o", [(1, 1, 1), (3, 64, 5), (4, 65, 4),
                                   (8, 300, 16), (2, 4096, 3)])
def test_packed_gemm_exact(m, n, o):
    rng = np.random.default_rng(n)
    a, w = pm1(rng, (m, n)), pm1(rng, (o, n))
    got = K.packed_gemm(K.pack_signs(a), K.pack_signs(w))
    assert np.array_equal(got, K.float_sign_gemm(a, w))


def test_packed_gemm_scale():
    rng = np.random.default_rng(0)
    a, w = pm1(rng, (4, 70)), pm1(rng, (3, 70))
    ref = K.float_sign_gemm(a, w) * 0.25
    got = K.packed_gemm(K.pack_signs(a), K.pack_signs(w), scale=0.25)
    assert np.allclose(got, ref)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_packed_conv_matches_float(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    a = pm1(rng, (2, 3, 8, 8))
    w = pm1(rng, (5, 3, 3, 3))
    got = K.packed_conv2d(a, w, stride=stride, pad=pad)
    ref = K.float_conv2d(a, w, stride=stride, pad=pad)
    assert np.array_equal(got, ref)


def test_packed_conv_padding_contributes_zero():
    # all-ones input and kernel: corner output counts only valid taps
    a = np.ones((1, 1, 4, 4), dtype=np.float32)
    w = np.ones((1, 1, 3, 3), dtype=np.float32)
    out = K.packed_conv2d(a, w, stride=1, pad=1)
    assert out[0, 0, 0, 0] == 4          # 2x2 valid window at the corner
    assert out[0, 0, 0, 1] == 6          # 2x3 along the edge
    assert out[0, 0, 1, 1] == 9          # full window inside


def test_conv_non_pm1_rejected():
    a = np.full((1, 1, 4, 4), 0.5, dtype=np.float32)
    w = np.ones((1, 1, 3, 3), dtype=np.float32)
    with pytest.raises(K.DomainError):
        K.packed_conv2d(a, w, pad=1)


def test_bit_convention_plus_one_is_set():
    p = K.pack_signs(np.array([1.0, -1.0, 1.0]))
    # element i -> bit i of the little-endian word; +1 <=> bit set
    assert int(p.words.reshape(-1)[0]) & 0b111 == 0b101


def test_bench_report_shape():
    report = K.bench_throughput(sizes=(64,), m=16, o=16, repeats=2)
    assert len(report) == 1
    r = report[0]
    assert r["inner_dim"] == 64
    assert r["packed_ops_per_s"] > 0 and r["float_ops_per_s"] > 0
    assert np.isclose(r["speedup"],
                      r["packed_ops_per_s"] / r["float_ops_per_s"])
