import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from octlatent import coder
from octlatent.coder import (
    TOTAL,
    AdaptiveDecoder,
    CdfTable,
    adaptive_code_length,
    adaptive_decode,
    adaptive_encode,
    cross_entropy_bits,
    decode_with_rows,
    encode_with_rows,
    quantize_pmf,
    quantize_pmf_rows,
    range_decode,
    range_encode,
    rows_cross_entropy,
)
from octlatent.errors import CorruptStreamError


def _random_tables(r, n, k):
    p = r.dirichlet(np.full(k, 0.5), size=n)
    return [CdfTable(tuple(row)) for row in quantize_pmf_rows(p).tolist()]


def test_quantize_half_half():
    assert quantize_pmf([0.5, 0.5]).freqs.tolist() == [32768, 32768]


def test_quantize_tiny_probability():
    t = quantize_pmf([1e-12, 1 - 1e-12])
    assert t.freqs.tolist() == [1, 65535]


def test_quantize_tie_break_prefers_smaller_index():
    t = quantize_pmf([1 / 3, 1 / 3, 1 / 3])
    # 65533 spare units, 21844.33 each: one leftover goes to symbol 0
    assert t.freqs.tolist() == [21846, 21845, 21845]


def test_quantize_rejects_huge_alphabet():
    with pytest.raises(ValueError):
        quantize_pmf(np.full(TOTAL + 1, 1.0 / (TOTAL + 1)))


@given(st.integers(0, 2**31), st.integers(2, 300))
def test_quantize_sums_and_floor(seed, k):
    r = np.random.default_rng(seed)
    p = r.dirichlet(np.full(k, 0.3))
    rows = quantize_pmf_rows(p[None])
    f = np.diff(rows[0])
    assert f.sum() == TOTAL and f.min() >= 1
    # largest remainder: each frequency within one unit of 1 + p * (65536 - k)
    assert np.all(np.abs(f - 1 - p * (TOTAL - k)) < 1.0 + 1e-9)


def test_half_probability_stream_bound():
    t = quantize_pmf([0.5, 0.5])
    r = np.random.default_rng(0)
    sym = r.integers(0, 2, 1000)
    data = range_encode(sym, [t] * 1000)
    assert 1000 <= 8 * len(data) <= 1008
    assert range_decode(data, [t] * 1000) == sym.tolist()


def test_near_certain_symbol():
    t = CdfTable((0, 65535, 65536))
    data = range_encode([0], [t])
    assert 8 * len(data) <= 65
    assert range_decode(data, [t]) == [0]


def test_exhaustive_small_streams():
    tables = [CdfTable((0, 1, 2, TOTAL)), CdfTable((0, 30000, 60000, TOTAL)), CdfTable((0, 21845, 43690, TOTAL))]
    for n in range(1, 6):
        for sym in itertools.product(range(3), repeat=n):
            ts = [tables[i % 3] for i in range(n)]
            data = range_encode(sym, ts)
            assert range_decode(data, ts) == list(sym)
            assert 8 * len(data) <= cross_entropy_bits(sym, ts) + 64


@given(st.integers(0, 2**31), st.integers(1, 400), st.integers(2, 40))
def test_random_roundtrip_and_bound(seed, n, k):
    r = np.random.default_rng(seed)
    tables = _random_tables(r, n, k)
    sym = [int(r.choice(k, p=np.array(t.freqs) / TOTAL)) for t in tables]
    data = range_encode(sym, tables)
    assert range_decode(data, tables) == sym
    assert 8 * len(data) <= cross_entropy_bits(sym, tables) + 64


def test_large_random_stream():
    r = np.random.default_rng(11)
    n, k = 20000, 256
    p = r.dirichlet(np.full(k, 0.2), size=64)
    rows = quantize_pmf_rows(p)
    row_of = r.integers(0, 64, n)
    sym = np.array([r.choice(k, p=np.diff(rows[i]) / TOTAL) for i in row_of])
    data = encode_with_rows(sym, rows, row_of)
    assert np.array_equal(decode_with_rows(data, rows, n, row_of), sym)
    assert 8 * len(data) <= rows_cross_entropy(sym, rows, row_of) + 64


def test_adversarial_skewed_tables():
    # every coded symbol has probability 2^-16
    t = CdfTable(tuple([0, 1] + [TOTAL]))
    sym = [0] * 300
    data = range_encode(sym, [t] * 300)
    assert range_decode(data, [t] * 300) == sym
    assert 8 * len(data) <= 300 * 16 + 64
    mixed = [CdfTable((0, 1, TOTAL - 1, TOTAL))] * 200
    r = np.random.default_rng(0)
    s = r.choice([0, 1, 2], size=200, p=[0.3, 0.4, 0.3]).tolist()
    assert range_decode(range_encode(s, mixed), mixed) == s


def test_trailing_garbage_tolerated():
    r = np.random.default_rng(1)
    tables = _random_tables(r, 500, 17)
    sym = [int(r.integers(0, 17)) for _ in tables]
    data = range_encode(sym, tables)
    for tail in (b"\x00", b"\xff" * 5, bytes(r.integers(0, 256, 32).astype(np.uint8))):
        assert range_decode(data + tail, tables) == sym


def test_exhausted_segment_raises():
    t = quantize_pmf(np.full(256, 1 / 256))
    r = np.random.default_rng(2)
    sym = r.integers(0, 256, 1000).tolist()
    data = range_encode(sym, [t] * 1000)
    with pytest.raises(CorruptStreamError):
        range_decode(data[: len(data) // 2], [t] * 1000)


def test_table_order_desync_is_detected():
    r = np.random.default_rng(3)
    tables = _random_tables(r, 300, 8)
    sym = [int(r.choice(8, p=np.array(t.freqs) / TOTAL)) for t in tables]
    data = range_encode(sym, tables)
    shuffled = [tables[i] for i in r.permutation(len(tables))]
    try:
        out = range_decode(data, shuffled)
    except CorruptStreamError:
        return
    assert out != sym


def test_zero_frequency_and_bad_symbol():
    enc = coder.RangeEncoder()
    with pytest.raises(ValueError):
        enc.encode(0, 0)
    with pytest.raises(ValueError):
        range_encode([3], [CdfTable((0, 1, TOTAL))])
    with pytest.raises(ValueError):
        CdfTable((0, 5, 5, TOTAL))


# adaptive order-0 -------------------------------------------------------------------


def _adaptive_formula(symbols, increment=16, alphabet=256):
    """Closed-form code length while no rescaling happens: -sum log2((1 + inc*c_s) / (K + inc*i))."""
    counts = [0] * alphabet
    bits = 0.0
    for i, s in enumerate(symbols):
        bits -= math.log2((1 + increment * counts[s]) / (alphabet + increment * i))
        counts[s] += 1
    return bits


def test_adaptive_repeated_byte():
    sym = [0xFF] * 512
    expected = _adaptive_formula(sym)
    assert adaptive_code_length(sym) == pytest.approx(expected, rel=1e-12)
    data = adaptive_encode(sym)
    assert 8 * len(data) <= expected + 64
    assert 8 * len(data) / 512 < 0.5
    assert adaptive_decode(data, 512) == sym


def test_adaptive_random_bytes():
    r = np.random.default_rng(0)
    n = 50000
    sym = r.integers(0, 256, n).tolist()
    data = adaptive_encode(sym)
    assert adaptive_decode(data, n) == sym
    # uniform entropy plus the learning cost of a fast-adapting model
    assert 8 * len(data) <= adaptive_code_length(sym) + 64
    assert 8.0 <= 8 * len(data) / n <= 8.1


def test_adaptive_empty():
    assert adaptive_encode([]) == b""
    assert adaptive_decode(b"", 0) == []


@given(st.integers(0, 2**31), st.integers(1, 6000))
def test_adaptive_roundtrip_with_rescaling(seed, n):
    r = np.random.default_rng(seed)
    sym = r.choice(256, size=n, p=r.dirichlet(np.full(256, 0.05))).tolist()
    data = adaptive_encode(sym)
    assert adaptive_decode(data, n) == sym
    dec = AdaptiveDecoder(data)
    assert [dec.decode() for _ in range(min(n, 10))] == sym[:10]
    assert 8 * len(data) <= adaptive_code_length(sym) + 64


def test_adaptive_beats_static_on_skewed_source():
    r = np.random.default_rng(4)
    p = np.zeros(256)
    p[[1, 3, 7, 15, 255]] = [0.4, 0.3, 0.15, 0.1, 0.05]
    sym = r.choice(256, size=4000, p=p).tolist()
    entropy = -(p[p > 0] * np.log2(p[p > 0])).sum()
    rate = 8 * len(adaptive_encode(sym)) / 4000
    assert rate < entropy + 0.1
