"""Slice-size sweep: fit a compressor on a layer's first slice, apply it to the rest.

For every slice size K the layer is cut into ``size // K`` full slices (the
tail is ignored).  The compressor built from slice 0's samples is applied to
slices 1.. and the pooled ``sum ||x_hat - x||^2 / sum ||x||^2`` is the
transfer loss; the same quantity on slice 0 itself is the training loss.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .pca import SampleBuffer, build_compressor
from .sources import DumpReader, ToyModel, apply_update, make_task, toy_forward_backward
from .sources.toy import CONV

SWEEP_COLUMNS = ("K", "n_slices", "d", "ratio", "transfer_loss", "train_loss")


@dataclass(frozen=True)
class SweepPoint:
    K: int
    n_slices: int
    d: int
    ratio: float
    transfer_loss: float  # NaN when the layer holds a single slice
    train_loss: float

    def to_csv(self) -> list[str]:
        return [str(self.K), str(self.n_slices), str(self.d), repr(self.ratio),
                repr(self.transfer_loss), repr(self.train_loss)]


def _pooled_loss(comp, blocks) -> float:
    num = den = 0.0
    for x in blocks:  # (samples, K)
        centered = x - comp.mean
        recon = centered @ comp.basis @ comp.basis.T + comp.mean
        num += float(np.sum((recon - x) ** 2))
        den += float(np.sum(x * x))
    return num / den if den > 0 else math.nan


def slice_sweep(samples, slice_sizes, loss_threshold: float) -> list[SweepPoint]:
    """``samples`` is an (L, layer size) array of aggregated layer gradients."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] < 2:
        raise ValueError("need an (L >= 2, size) sample array")
    size = samples.shape[1]
    out = []
    for K in slice_sizes:
        K = int(K)
        if K < 1:
            raise ValueError(f"slice size {K} must be positive")
        if K > size:
            warnings.warn(f"slice size {K} exceeds the layer ({size} values); skipped", stacklevel=2)
            continue
        n = size // K
        comp = build_compressor(SampleBuffer(0, list(samples[:, :K])), loss_threshold)
        train = _pooled_loss(comp, [samples[:, :K]])
        rest = [samples[:, j * K:(j + 1) * K] for j in range(1, n)]
        transfer = _pooled_loss(comp, rest) if rest else math.nan
        out.append(SweepPoint(K, n, comp.d, comp.ratio, transfer, train))
    return out


def toy_samples(seed: int, *, n_nodes: int = 6, warmup: int = 250, sample_iters: int = 100,
                batch: int = 16, lr: float = 0.1, **task_kwargs) -> np.ndarray:
    """Aggregated conv-layer gradients of ``sample_iters`` iterations after ``warmup`` of RAW training."""
    task = make_task(seed, **task_kwargs)
    model = ToyModel.init(seed, lr=lr)
    out = []
    for t in range(warmup + sample_iters):
        g = sum(toy_forward_backward(model, *task.batch(n, n_nodes, t, batch, seed))[1] for n in range(n_nodes))
        g = g / n_nodes
        if t >= warmup:
            out.append(g[:CONV.size].copy())
        model = apply_update(model, g)
    return np.array(out)


def dump_samples(reader: DumpReader, layer: int = 0, start: int = 0, count: int | None = None) -> np.ndarray:
    """Per-iteration sums over nodes of one layer of a recorded dump."""
    if not 0 <= layer < len(reader.layers):
        raise ValueError(f"dump has no layer {layer}")
    stop = reader.n_iters if count is None else start + count
    if stop > reader.n_iters or start < 0:
        raise ValueError(f"iterations [{start}, {stop}) exceed the dump's {reader.n_iters}")
    lo, hi = reader.layout.layer_range(layer)
    return np.array([sum(reader.read(t, n)[lo:hi] for n in range(reader.n_nodes)) for t in range(start, stop)])
