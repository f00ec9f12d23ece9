import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gradiveq.qsgd import (
    QuantizedVector, QuantizeError, compression_ratios, dequantize, quantize, quantized_size_bytes,
)


@pytest.mark.parametrize("bits", range(1, 9))
def test_on_grid_vector_is_exact(bits):
    q = quantize([1.0, 0.0], bits, 0)
    assert dequantize(q).tolist() == [1.0, 0.0]


def test_zero_vector():
    q = quantize(np.zeros(5), 4, 0)
    assert q.norm == 0.0 and not q.levels.any()
    assert np.all(dequantize(q) == 0)


def test_size_formula_examples():
    assert quantized_size_bytes(0, 4) == 4
    assert quantized_size_bytes(8, 4) == 9
    assert len(quantize(np.ones(8), 4, 0).to_bytes()) == 9
    nominal, exact = compression_ratios(1000, 4)
    assert nominal == 8.0
    assert exact == pytest.approx(4000 / (625 + 4))
    assert compression_ratios(10**6, 4)[1] == pytest.approx(6.4, rel=1e-4)


def test_bad_inputs():
    with pytest.raises(QuantizeError):
        quantize([1.0], 0, 0)
    with pytest.raises(QuantizeError):
        quantize([1.0, np.nan], 4, 0)
    with pytest.raises(QuantizeError):
        QuantizedVector.from_bytes(b"\x00" * 5, 8, 4)


vectors = arrays(np.float64, st.integers(0, 64), elements=st.floats(-1e3, 1e3))


@settings(max_examples=80)
@given(vectors, st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_invariants_and_wire_roundtrip(v, bits, seed):
    q = quantize(v, bits, seed)
    assert q.norm >= 0
    assert q.levels.max(initial=0) <= 2 ** bits - 1
    deq = dequantize(q)
    assert np.all(np.abs(deq) <= q.norm * (1 + 1e-12))
    blob = q.to_bytes()
    assert len(blob) == quantized_size_bytes(v.size, bits)
    back = QuantizedVector.from_bytes(blob, v.size, bits)
    assert np.array_equal(back.levels, q.levels)
    assert np.array_equal(back.signs[q.levels > 0], q.signs[q.levels > 0])
    assert back.norm == float(np.float32(q.norm))


def test_deterministic_under_seed():
    v = np.random.default_rng(0).normal(size=50)
    a, b = quantize(v, 4, 123), quantize(v, 4, 123)
    assert a.to_bytes() == b.to_bytes()
    assert quantize(v, 4, 124).to_bytes() != a.to_bytes()


def test_stochastic_rounding_picks_adjacent_levels():
    v = np.array([0.3, -0.4, 0.5, 0.6])
    s = 15
    scaled = np.abs(v) / np.linalg.norm(v) * s
    for seed in range(50):
        q = quantize(v, 4, seed)
        assert np.all((q.levels == np.floor(scaled)) | (q.levels == np.ceil(scaled)))


def test_wire_layout_is_sign_bits_then_levels():
    # one element: sign bit, then 4 level bits, little-endian bit order
    q = QuantizedVector(2.0, np.array([True]), np.array([5], np.uint8), 4)
    blob = q.to_bytes()
    assert blob[:4] == np.float32(2.0).tobytes()
    assert blob[4] == 0b1 | (5 << 1)
