"""Per-slice linear compressors from aggregated gradient samples.

Every node builds its compressors from the same aggregated samples, so the
construction must be bit-for-bit deterministic.  The eigensolver is a cyclic
Jacobi method with a fixed round-robin pair ordering: each round rotates
``K/2`` disjoint index pairs at once, and ``K-1`` rounds make one full sweep.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

_MAGIC = b"GVQC"
_HEADER = struct.Struct("<4sII")

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100


class PCAError(ValueError):
    pass


@dataclass
class SampleBuffer:
    slice_id: int
    samples: list = field(default_factory=list)

    def add(self, sample) -> None:
        v = np.asarray(sample, dtype=np.float64).reshape(-1)
        if self.samples and v.size != self.samples[0].size:
            raise PCAError(f"sample length {v.size} differs from buffer length {self.samples[0].size}")
        self.samples.append(v.copy())

    def clear(self) -> None:
        self.samples.clear()

    def __len__(self):
        return len(self.samples)

    def as_array(self) -> np.ndarray:
        if not self.samples:
            raise PCAError(f"slice {self.slice_id}: sample buffer is empty")
        return np.stack(self.samples)


@dataclass(frozen=True, eq=False)
class Compressor:
    basis: np.ndarray  # K x d, orthonormal columns
    mean: np.ndarray  # K
    spectrum: np.ndarray  # K, nonincreasing
    loss_threshold: float = 0.0
    version: int = 0
    degenerate: bool = False

    @property
    def K(self) -> int:
        return self.basis.shape[0]

    @property
    def d(self) -> int:
        return self.basis.shape[1]

    @property
    def ratio(self) -> float:
        return self.K / self.d

    def to_bytes(self) -> bytes:
        return b"".join([
            _HEADER.pack(_MAGIC, self.K, self.d),
            np.asarray(self.mean, "<f8").tobytes(),
            np.asarray(self.basis, "<f8").tobytes(order="F"),
            np.asarray(self.spectrum, "<f8").tobytes(),
        ])

    @classmethod
    def from_bytes(cls, buf: bytes, *, loss_threshold: float = 0.0, version: int = 0) -> "Compressor":
        if len(buf) < _HEADER.size:
            raise PCAError("compressor blob shorter than its header")
        magic, K, d = _HEADER.unpack_from(buf)
        if magic != _MAGIC:
            raise PCAError(f"bad compressor magic {magic!r}")
        expected = _HEADER.size + 8 * (2 * K + K * d)
        if len(buf) != expected:
            raise PCAError(f"compressor blob is {len(buf)} bytes, expected {expected}")
        pos = _HEADER.size
        mean = np.frombuffer(buf, "<f8", K, pos).copy()
        pos += 8 * K
        basis = np.frombuffer(buf, "<f8", K * d, pos).reshape((K, d), order="F").copy()
        pos += 8 * K * d
        spectrum = np.frombuffer(buf, "<f8", K, pos).copy()
        return cls(basis, mean, spectrum, loss_threshold, version, degenerate=not spectrum.any())

    def digest_bytes(self) -> bytes:
        return struct.pack("<I", self.version) + self.to_bytes()


def compute_mean(buffer: SampleBuffer) -> np.ndarray:
    x = buffer.as_array()
    return x.sum(axis=0) / x.shape[0]


def compute_covariance(buffer: SampleBuffer, mean) -> np.ndarray:
    x = buffer.as_array()
    if x.shape[0] < 2:
        raise PCAError(f"slice {buffer.slice_id}: covariance needs >= 2 samples, have {x.shape[0]}")
    centered = x - np.asarray(mean)
    cov = centered.T @ centered / (x.shape[0] - 1)
    return 0.5 * (cov + cov.T)


@lru_cache(maxsize=64)
def _rounds(k: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    # circle-method tournament: every pair (p, q) appears exactly once per sweep
    m = k + (k % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = sorted((min(a, b), max(a, b)) for a, b in pairs if a < k and b < k)
        if pairs:
            p, q = zip(*pairs)
            rounds.append((np.array(p), np.array(q)))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def _off_norm(a: np.ndarray) -> float:
    off = a - np.diag(np.diag(a))
    return float(np.linalg.norm(off))


def jacobi_eigh(c, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS):
    """Eigen-decompose a symmetric matrix; returns unsorted ``(values, vectors)``."""
    a = np.array(c, dtype=np.float64)
    k = a.shape[0]
    v = np.eye(k)
    scale = float(np.linalg.norm(a))
    if k < 2 or scale == 0.0:
        return np.diag(a).copy(), v
    rounds = _rounds(k)
    for _ in range(max_sweeps):
        if _off_norm(a) <= tol * scale:
            break
        for p, q in rounds:
            apq = a[p, q]
            active = apq != 0.0
            if not active.any():
                continue
            theta = np.where(active, (a[q, q] - a[p, p]) / (2.0 * np.where(active, apq, 1.0)), 0.0)
            t = np.where(active, np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0)), 0.0)
            t = np.where(active & (theta == 0.0), 1.0, t)
            cos = 1.0 / np.hypot(t, 1.0)
            sin = t * cos
            ap, aq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = cos * ap - sin * aq
            a[:, q] = sin * ap + cos * aq
            ap, aq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = cos[:, None] * ap - sin[:, None] * aq
            a[q, :] = sin[:, None] * ap + cos[:, None] * aq
            a[p, q] = 0.0
            a[q, p] = 0.0
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = cos * vp - sin * vq
            v[:, q] = sin * vp + cos * vq
    else:
        if _off_norm(a) > tol * scale:
            raise PCAError(f"Jacobi did not converge in {max_sweeps} sweeps")
    return np.diag(a).copy(), v


def eigendecompose(c, symmetric_tol: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(U, s)`` with eigenvalues descending and a fixed sign convention.

    Each column is flipped so that its largest-magnitude entry is positive
    (the first such entry on ties).
    """
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise PCAError(f"expected a square matrix, got shape {c.shape}")
    asym = float(np.max(np.abs(c - c.T))) if c.size else 0.0
    if asym > symmetric_tol * max(1.0, float(np.max(np.abs(c)))):
        raise PCAError(f"matrix is not symmetric (max |C - C^T| = {asym:.3g})")
    values, vectors = jacobi_eigh(0.5 * (c + c.T))
    order = np.argsort(-values, kind="stable")
    values = values[order]
    vectors = vectors[:, order]
    lead = np.argmax(np.abs(vectors), axis=0)
    signs = np.where(vectors[lead, np.arange(vectors.shape[1])] < 0, -1.0, 1.0)
    return vectors * signs, values


def select_dimension(spectrum, loss_threshold: float) -> int:
    """Smallest d whose leading eigen-energy fraction is at least ``1 - loss_threshold``.

    An all-zero spectrum gives d = 1; callers treat that compressor as degenerate.
    """
    if not 0.0 <= loss_threshold < 1.0:
        raise PCAError(f"loss threshold must satisfy 0 <= lambda < 1, got {loss_threshold}")
    s = np.asarray(spectrum, dtype=np.float64)
    if s.size == 0:
        raise PCAError("empty spectrum")
    cum = np.cumsum(s)
    total = cum[-1]
    if total <= 0.0:
        return 1
    # relative slack absorbs summation roundoff for fractions that sit exactly on the threshold
    target = (1.0 - loss_threshold) * total * (1.0 - 1e-12)
    d = int(np.searchsorted(cum, target, side="left")) + 1
    return min(max(d, 1), s.size)


def build_compressor(buffer: SampleBuffer, loss_threshold: float, version: int = 0) -> Compressor:
    mean = compute_mean(buffer)
    cov = compute_covariance(buffer, mean)
    u, s = eigendecompose(cov)
    s = np.maximum(s, 0.0)
    d = select_dimension(s, loss_threshold)
    return Compressor(
        basis=np.ascontiguousarray(u[:, :d]),
        mean=mean,
        spectrum=s,
        loss_threshold=float(loss_threshold),
        version=version,
        degenerate=not s.any(),
    )
