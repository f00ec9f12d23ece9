"""Linear compress / aggregate / decompress codec.

Compression subtracts a per-node share of the whitening vector before
projecting, ``U_d^T (g_n - mu / N)``, so that summing the compressed slices of
all N nodes gives ``U_d^T (sum_n g_n - mu)`` and one decompression
``U_d c + mu`` recovers the aggregate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .pca import Compressor


class CodecError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CompressedSlice:
    slice_id: int
    version: int
    coefficients: np.ndarray
    count: int = 1

    @property
    def d(self) -> int:
        return self.coefficients.size


def _check_slice(g, comp: Compressor) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    if g.size != comp.K:
        raise CodecError(f"slice length {g.size} does not match compressor K={comp.K}")
    return g


def compress(g, comp: Compressor, n_nodes: int, slice_id: int = 0) -> CompressedSlice:
    if n_nodes < 1:
        raise CodecError("node count must be >= 1")
    g = _check_slice(g, comp)
    coeffs = comp.basis.T @ (g - comp.mean / n_nodes)
    return CompressedSlice(slice_id, comp.version, coeffs, 1)


def aggregate(a: CompressedSlice, b: CompressedSlice) -> CompressedSlice:
    if a.slice_id != b.slice_id:
        raise CodecError(f"cannot sum slices {a.slice_id} and {b.slice_id}")
    if a.version != b.version:
        raise CodecError(
            f"slice {a.slice_id}: compressor version mismatch ({a.version} vs {b.version})"
        )
    if a.d != b.d:
        raise CodecError(f"slice {a.slice_id}: coefficient lengths differ ({a.d} vs {b.d})")
    return CompressedSlice(a.slice_id, a.version, a.coefficients + b.coefficients, a.count + b.count)


def decompress(agg: CompressedSlice, comp: Compressor, n_nodes: int | None = None) -> np.ndarray:
    """Reconstruct the aggregated slice.  With ``n_nodes`` given, partial sums are rejected."""
    if n_nodes is not None and agg.count != n_nodes:
        raise CodecError(
            f"slice {agg.slice_id}: only {agg.count} of {n_nodes} nodes aggregated"
        )
    if agg.version != comp.version:
        raise CodecError(f"slice {agg.slice_id}: compressor version mismatch")
    if agg.d != comp.d:
        raise CodecError(f"slice {agg.slice_id}: {agg.d} coefficients for a d={comp.d} compressor")
    return comp.basis @ agg.coefficients + comp.mean


def local_loss(g, comp: Compressor, n_nodes: int) -> float:
    """Squared error of decompressing a node's own slice locally."""
    g = _check_slice(g, comp)
    share = comp.mean / n_nodes
    coeffs = comp.basis.T @ (g - share)
    resid = g - (comp.basis @ coeffs + share)
    return float(resid @ resid)


def local_energy(g, comp: Compressor, n_nodes: int) -> float:
    """``||g - mu/N||^2``, the normalizer for relative local loss."""
    g = _check_slice(g, comp)
    centered = g - comp.mean / n_nodes
    return float(centered @ centered)


def relative_loss(g_hat, g) -> float:
    """``||g_hat - g||^2 / ||g||^2``; NaN when the reference has zero norm."""
    g_hat = np.asarray(g_hat, dtype=np.float64).reshape(-1)
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    if g_hat.shape != g.shape:
        raise CodecError(f"length mismatch: {g_hat.size} vs {g.size}")
    ref = float(g @ g)
    if ref == 0.0:
        return math.nan
    diff = g_hat - g
    return float(diff @ diff) / ref
