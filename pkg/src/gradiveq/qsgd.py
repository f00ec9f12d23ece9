"""QSGD stochastic scalar quantizer.

Each coordinate is mapped to ``norm * sign * level / (2**b - 1)`` where the
level stochastically rounds ``|v_i| / ||v|| * (2**b - 1)`` so its expectation
is exact.  One bucket covers the whole vector.

Quantized vectors are deliberately not summable: aggregating them requires a
dequantize, add, requantize cycle.

Wire layout: float32 LE norm, then one bit stream holding ``n`` sign bits
followed by ``n`` b-bit levels (LSB first), padded to a whole byte.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

NORM_BYTES = 4


class QuantizeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class QuantizedVector:
    norm: float
    signs: np.ndarray  # bool, True = negative
    levels: np.ndarray  # uint8 in [0, 2**bits - 1]
    bits: int

    def __len__(self):
        return self.levels.size

    def to_bytes(self) -> bytes:
        n = self.levels.size
        level_bits = (self.levels[:, None] >> np.arange(self.bits, dtype=np.uint8)) & 1
        stream = np.concatenate([self.signs.astype(np.uint8), level_bits.reshape(-1).astype(np.uint8)])
        packed = np.packbits(stream, bitorder="little") if stream.size else np.zeros(0, np.uint8)
        out = np.float32(self.norm).astype("<f4").tobytes() + packed.tobytes()
        assert len(out) == quantized_size_bytes(n, self.bits)
        return out

    @classmethod
    def from_bytes(cls, buf: bytes, length: int, bits: int) -> "QuantizedVector":
        _check_bits(bits)
        expected = quantized_size_bytes(length, bits)
        if len(buf) != expected:
            raise QuantizeError(f"expected {expected} bytes for {length} x {bits}-bit values, got {len(buf)}")
        norm = float(np.frombuffer(buf, "<f4", 1, 0)[0])
        stream = np.unpackbits(np.frombuffer(buf, np.uint8, offset=NORM_BYTES), bitorder="little")
        signs = stream[:length].astype(bool)
        level_bits = stream[length:length + length * bits].reshape(length, bits)
        levels = (level_bits << np.arange(bits, dtype=np.uint8)).sum(axis=1).astype(np.uint8)
        return cls(norm, signs, levels, bits)


def _check_bits(bits: int) -> None:
    if not 1 <= bits <= 8:
        raise QuantizeError(f"bit width must be in [1, 8], got {bits}")


def quantize(v, bits: int, seed) -> QuantizedVector:
    """Quantize ``v``; ``seed`` is an int, a SeedSequence, or a numpy Generator."""
    _check_bits(bits)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise QuantizeError("cannot quantize non-finite values")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    top = (1 << bits) - 1
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        return QuantizedVector(0.0, np.zeros(v.size, bool), np.zeros(v.size, np.uint8), bits)
    scaled = np.minimum(np.abs(v) / norm * top, top)
    floor = np.floor(scaled)
    levels = floor + (rng.random(v.size) < (scaled - floor))
    return QuantizedVector(norm, v < 0, levels.astype(np.uint8), bits)


def dequantize(q: QuantizedVector) -> np.ndarray:
    top = (1 << q.bits) - 1
    mag = q.norm * q.levels.astype(np.float64) / top
    return np.where(q.signs, -mag, mag)


def quantized_size_bytes(length: int, bits: int) -> int:
    if length < 0:
        raise QuantizeError("length must be >= 0")
    return math.ceil(length * (bits + 1) / 8) + NORM_BYTES


def compression_ratios(length: int, bits: int) -> tuple[float, float]:
    """``(nominal, exact)`` ratios against float32: levels only vs the full wire size."""
    nominal = 32.0 / bits
    exact = 4.0 * length / quantized_size_bytes(length, bits) if length else 0.0
    return nominal, exact
