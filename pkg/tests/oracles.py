"""Independent reference computations used across the test suite."""
from __future__ import annotations

import numpy as np

from gradiveq import qsgd
from gradiveq.pca import Compressor
from gradiveq.rar import scalar_seed


def random_compressor(rng, K: int, d: int, mean_scale: float = 1.0, version: int = 0) -> Compressor:
    q, _ = np.linalg.qr(rng.normal(size=(K, K)))
    spectrum = np.sort(rng.random(K))[::-1]
    return Compressor(q[:, :d].copy(), mean_scale * rng.normal(size=K), spectrum, version=version)


def centralized_gvq(total, plan, table):
    """decompress(U^T (sum g - mu)) + mu on every tabled slice of the summed vector."""
    out = np.array(total, dtype=np.float64)
    for sid, spec in enumerate(plan.slices):
        comp = table.get(sid)
        if comp is None or comp.degenerate or not spec.compressible:
            continue
        x = out[spec.start:spec.stop]
        out[spec.start:spec.stop] = comp.basis @ (comp.basis.T @ (x - comp.mean)) + comp.mean
    return out


def _wire_roundtrip(v, bits, seq):
    q = qsgd.quantize(v, bits, seq)
    return q.to_bytes(), qsgd.dequantize(qsgd.QuantizedVector.from_bytes(q.to_bytes(), v.size, bits))


def scalar_hop_by_hop(grads, plan, *, iteration: int, seed: int, bits: int = 4):
    """Sequential reference for SCALAR mode: walk each segment around the ring one hop at a time.

    Segment k starts at node k; node k+i dequantizes, adds its own values and
    requantizes; the node holding the complete sum quantizes it once more for
    circulation and every node decodes that same payload.
    """
    n = plan.n_nodes
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    if n == 1:
        return grads[0].copy()
    out = np.empty(plan.size)
    for seg in plan.segments:
        k = seg.index
        acc = grads[k][seg.start:seg.stop].copy()
        _, value = _wire_roundtrip(acc, bits, scalar_seed(seed, iteration, 0, 0, k, k))
        for i in range(1, n):
            node = (k + i) % n
            acc = value + grads[node][seg.start:seg.stop]
            if i < n - 1:
                _, value = _wire_roundtrip(acc, bits, scalar_seed(seed, iteration, 0, i, k, node))
        owner = (k + n - 1) % n
        _, value = _wire_roundtrip(acc, bits, scalar_seed(seed, iteration, 1, 0, k, owner))
        out[seg.start:seg.stop] = value
    return out


def projection_residuals(samples) -> np.ndarray:
    """Brute force: for every d, the centered energy left after projecting onto the top-d SVD space."""
    x = np.asarray(samples, dtype=np.float64)
    c = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(c, full_matrices=False)
    out = []
    for d in range(0, x.shape[1] + 1):
        v = vt[:d].T
        r = c - c @ v @ v.T if d else c
        out.append(float(np.sum(r * r)))
    return np.array(out)
