import math
from functools import reduce

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradiveq.codec import (
    CodecError, CompressedSlice, aggregate, compress, decompress, local_energy, local_loss, relative_loss,
)
from gradiveq.pca import Compressor
from oracles import random_compressor


def _identity(K, d, mean=None):
    mean = np.zeros(K) if mean is None else np.asarray(mean, float)
    return Compressor(np.eye(K)[:, :d], mean, np.ones(K))


def test_compress_examples():
    g = np.arange(1.0, 6.0)
    assert compress(g, _identity(5, 3), 1).coefficients.tolist() == [1, 2, 3]
    u = np.array([[1.0], [1.0]]) / math.sqrt(2)
    c = compress([3.0, 3.0], Compressor(u, np.zeros(2), np.ones(2)), 1)
    assert c.coefficients[0] == pytest.approx(4.242641, abs=1e-6)
    comp = _identity(4, 2, mean=[2.0, 4.0, 6.0, 8.0])
    assert np.all(compress(comp.mean / 4, comp, 4).coefficients == 0)


def test_aggregate_rules():
    rng = np.random.default_rng(0)
    comp = random_compressor(rng, 6, 3)
    b = compress(rng.normal(size=6), comp, 2, slice_id=4)
    zero = CompressedSlice(4, 0, np.zeros(3))
    s = aggregate(zero, b)
    assert np.array_equal(s.coefficients, b.coefficients) and s.count == 2
    with pytest.raises(CodecError):
        aggregate(b, CompressedSlice(4, 1, np.zeros(3)))
    with pytest.raises(CodecError):
        aggregate(b, CompressedSlice(5, 0, np.zeros(3)))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 16), st.sampled_from([8, 64, 256]), st.integers(0, 10**6))
def test_commutability(n, K, seed):
    rng = np.random.default_rng(seed)
    comp = random_compressor(rng, K, int(rng.integers(1, K + 1)))
    grads = rng.normal(size=(n, K))
    total = reduce(aggregate, [compress(g, comp, n) for g in grads])
    expected = comp.basis.T @ (grads.sum(axis=0) - comp.mean)
    assert np.max(np.abs(total.coefficients - expected)) <= 1e-9
    assert total.count == n


@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 1000))
def test_linearity(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    comp = random_compressor(rng, 10, 4, mean_scale=0.0)
    a, b = rng.normal(size=(2, 10))
    lhs = compress(alpha * a + beta * b, comp, 3).coefficients
    rhs = alpha * compress(a, comp, 3).coefficients + beta * compress(b, comp, 3).coefficients
    assert np.max(np.abs(lhs - rhs)) <= 1e-10


def test_sum_order_does_not_matter():
    rng = np.random.default_rng(1)
    comp = random_compressor(rng, 16, 5)
    grads = rng.normal(size=(6, 16))
    parts = [compress(g, comp, 6) for g in grads]
    a = decompress(reduce(aggregate, parts), comp, 6)
    b = decompress(reduce(aggregate, parts[::-1]), comp, 6)
    central = comp.basis @ (comp.basis.T @ (grads.sum(0) - comp.mean)) + comp.mean
    assert np.max(np.abs(a - central)) <= 1e-8 and np.max(np.abs(b - central)) <= 1e-8


def test_decompress_examples_and_errors():
    rng = np.random.default_rng(2)
    comp = _identity(5, 5, mean=rng.normal(size=5))
    g = rng.normal(size=5)
    assert np.allclose(decompress(compress(g, comp, 1), comp, 1), g, atol=1e-12)
    comp = random_compressor(rng, 5, 2)
    assert np.array_equal(decompress(CompressedSlice(0, 0, np.zeros(2)), comp), comp.mean)
    partial = compress(g, comp, 3)
    with pytest.raises(CodecError):
        decompress(partial, comp, 3)
    with pytest.raises(CodecError):
        compress(np.zeros(4), comp, 1)


def test_local_loss_examples():
    rng = np.random.default_rng(3)
    g = rng.normal(size=6)
    assert local_loss(g, random_compressor(rng, 6, 6), 3) <= 1e-12
    comp = _identity(6, 2)
    g = np.array([0, 0, 1.0, 2.0, 3.0, 4.0])
    assert local_loss(g, comp, 4) == pytest.approx(float(g @ g))
    comp = random_compressor(rng, 8, 3)
    g = rng.normal(size=8)
    share = comp.mean / 5
    brute = g - (comp.basis @ (comp.basis.T @ (g - share)) + share)
    assert abs(local_loss(g, comp, 5) - float(brute @ brute)) <= 1e-10
    assert local_energy(g, comp, 5) == pytest.approx(float((g - share) @ (g - share)))


def test_relative_loss_examples():
    g = np.array([1.0, -2.0, 3.0])
    assert relative_loss(g, g) == 0.0
    assert relative_loss(np.zeros(3), g) == 1.0
    assert relative_loss(2 * g, g) == 1.0
    assert math.isnan(relative_loss(g, np.zeros(3)))
    with pytest.raises(CodecError):
        relative_loss(g, g[:2])
