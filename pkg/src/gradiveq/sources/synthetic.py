"""Synthetic gradients with low-rank, spatially shared, slowly drifting structure.

Within a layer every full slice at node ``n`` and iteration ``t`` is

    g = (B_t z + mu0) / N + noise,    B_t = cos(rho t) B0 + sin(rho t) B1

with ``B0`` and ``B1`` mutually orthogonal K x r orthonormal bases shared by
all slices of the layer, and ``z`` drawn fresh per (t, n, slice).  Summed over
nodes the slices therefore have a rank-r covariance around ``mu0``.
Residual slices and passthrough values are unstructured.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..layout import FlatLayout, make_slices


@dataclass(frozen=True)
class SyntheticSpec:
    layout: FlatLayout
    slice_size: int | tuple = 64
    rank: int | tuple = 8
    n_nodes: int = 6
    noise: float = 0.0
    drift: float = 0.0
    seed: int = 0
    mean_scale: float = 1.0

    def __post_init__(self):
        if isinstance(self.slice_size, list):
            object.__setattr__(self, "slice_size", tuple(self.slice_size))
        if isinstance(self.rank, list):
            object.__setattr__(self, "rank", tuple(self.rank))
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.drift < 0:
            raise ValueError("drift must be >= 0")
        if self.n_nodes < 1:
            raise ValueError("n_nodes must be >= 1")

    def ranks(self) -> list[int]:
        n = len(self.layout.layers)
        return [int(self.rank)] * n if np.isscalar(self.rank) else [int(r) for r in self.rank]


class SyntheticSource:
    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        self.slices = make_slices(spec.layout, spec.slice_size)
        rng = np.random.default_rng([spec.seed, 0])
        self._layers = []
        for li, r in enumerate(spec.ranks()):
            full = [s for s in self.slices if s.layer == li and s.compressible]
            if not full:
                self._layers.append(None)
                continue
            K = full[0].length
            if not 1 <= r <= K:
                raise ValueError(f"layer {li}: rank {r} must be in [1, K={K}]")
            q, _ = np.linalg.qr(rng.normal(size=(K, min(2 * r, K))))
            b0 = q[:, :r]
            b1 = q[:, r:2 * r] if 2 * r <= K else np.zeros((K, r))
            mu0 = spec.mean_scale * rng.normal(size=K)
            self._layers.append((full, b0, b1, mu0))

    def basis(self, layer: int, t: int) -> np.ndarray:
        _, b0, b1, _ = self._layers[layer]
        angle = self.spec.drift * t
        return np.cos(angle) * b0 + np.sin(angle) * b1

    def next(self, t: int, n: int) -> np.ndarray:
        spec = self.spec
        N = spec.n_nodes
        rng = np.random.default_rng([spec.seed, 1, t, n])
        out = rng.normal(size=spec.layout.size) / N
        for li, entry in enumerate(self._layers):
            if entry is None:
                continue
            full, b0, _, mu0 = entry
            z = rng.normal(size=(len(full), b0.shape[1]))
            values = (z @ self.basis(li, t).T + mu0) / N
            for spec_slice, row in zip(full, values):
                out[spec_slice.start:spec_slice.stop] = row
        if spec.noise:
            out += spec.noise * rng.normal(size=out.size)
        return out


@lru_cache(maxsize=16)
def _source(spec: SyntheticSpec) -> SyntheticSource:
    return SyntheticSource(spec)


def synth_next(spec: SyntheticSpec, t: int, n: int) -> np.ndarray:
    return _source(spec).next(t, n)
