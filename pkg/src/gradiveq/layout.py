"""Gradient flattening, slicing and ring segmentation.

Convolutional gradients are flattened so that the ``F`` gradients sharing a
position ``(h, w, d)`` across all filters sit next to each other, traversing
depth, then width, then height.  For a C-ordered ``(H, W, D, F)`` array this is
exactly row-major order, so ``flatten`` is a checked ``reshape``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

FULL = "full"
RESIDUAL = "residual"
PASSTHROUGH = "passthrough"


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class LayerShape:
    height: int
    width: int
    depth: int
    filters: int

    def __post_init__(self):
        for name in ("height", "width", "depth", "filters"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise LayoutError(f"{name} must be a positive count, got {value!r}")

    @property
    def size(self) -> int:
        return self.height * self.width * self.depth * self.filters

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.height, self.width, self.depth, self.filters)

    @property
    def fd(self) -> int:
        """Slice granularity suggested by the layer's filter count and depth."""
        return self.filters * self.depth

    def flat_index(self, h: int, w: int, d: int, f: int) -> int:
        return ((h * self.width + w) * self.depth + d) * self.filters + f


@dataclass(frozen=True)
class FlatLayout:
    """Ordered convolutional layers followed by ``passthrough`` other parameters."""

    layers: tuple[LayerShape, ...]
    offsets: tuple[int, ...] = field(default=())
    passthrough: int = 0

    def __post_init__(self):
        layers = tuple(l if isinstance(l, LayerShape) else LayerShape(*l) for l in self.layers)
        object.__setattr__(self, "layers", layers)
        expected = tuple(np.cumsum([0] + [l.size for l in layers[:-1]]).tolist()) if layers else ()
        if not self.offsets:
            object.__setattr__(self, "offsets", expected)
        elif tuple(self.offsets) != expected:
            raise LayoutError(f"offsets {self.offsets} do not match layer sizes (expected {expected})")
        if self.passthrough < 0:
            raise LayoutError("passthrough element count must be >= 0")

    @classmethod
    def from_shapes(cls, shapes: Sequence, passthrough: int = 0) -> "FlatLayout":
        return cls(tuple(s if isinstance(s, LayerShape) else LayerShape(*s) for s in shapes),
                   passthrough=passthrough)

    @property
    def conv_size(self) -> int:
        return sum(l.size for l in self.layers)

    @property
    def size(self) -> int:
        return self.conv_size + self.passthrough

    def layer_range(self, i: int) -> tuple[int, int]:
        return self.offsets[i], self.offsets[i] + self.layers[i].size


@dataclass(frozen=True)
class SliceSpec:
    """A contiguous run of the flat vector; ``layer`` is -1 for passthrough data."""

    layer: int
    index: int
    start: int
    length: int
    kind: str = FULL

    @property
    def stop(self) -> int:
        return self.start + self.length

    @property
    def compressible(self) -> bool:
        return self.kind == FULL


@dataclass(frozen=True)
class Segment:
    index: int
    first_slice: int
    stop_slice: int
    start: int
    stop: int

    @property
    def size(self) -> int:
        return self.stop - self.start

    @property
    def slice_ids(self) -> range:
        return range(self.first_slice, self.stop_slice)


def flatten(tensor, shape: LayerShape | None = None) -> np.ndarray:
    """Flatten an ``(H, W, D, F)`` gradient tensor into F-collocated order."""
    arr = np.asarray(tensor)
    if shape is None:
        if arr.ndim != 4:
            raise LayoutError(f"expected a 4-D (H, W, D, F) tensor, got ndim={arr.ndim}")
        shape = LayerShape(*arr.shape)
    if arr.size != shape.size:
        raise LayoutError(f"tensor has {arr.size} values but shape {shape.shape} needs {shape.size}")
    if arr.ndim == 4 and arr.shape != shape.shape:
        raise LayoutError(f"tensor shape {arr.shape} does not match {shape.shape}")
    return np.ascontiguousarray(arr).reshape(-1)


def unflatten(flat, shape: LayerShape) -> np.ndarray:
    arr = np.asarray(flat)
    if arr.ndim != 1 or arr.size != shape.size:
        raise LayoutError(f"flat vector of length {arr.size} cannot fill shape {shape.shape}")
    return arr.reshape(shape.shape)


def flatten_layers(tensors: Sequence, layout: FlatLayout, passthrough=None) -> np.ndarray:
    """Concatenate flattened layer tensors (plus optional passthrough values)."""
    if len(tensors) != len(layout.layers):
        raise LayoutError(f"expected {len(layout.layers)} tensors, got {len(tensors)}")
    parts = [flatten(t, s) for t, s in zip(tensors, layout.layers)]
    extra = np.zeros(0) if passthrough is None else np.asarray(passthrough).reshape(-1)
    if extra.size != layout.passthrough:
        raise LayoutError(f"expected {layout.passthrough} passthrough values, got {extra.size}")
    parts.append(extra)
    return np.concatenate(parts) if parts else np.zeros(0)


def _per_layer(value, n_layers: int, name: str) -> list[int]:
    if np.isscalar(value):
        values = [int(value)] * n_layers
    else:
        values = [int(v) for v in value]
        if len(values) != n_layers:
            raise LayoutError(f"{name}: expected {n_layers} entries, got {len(values)}")
    for v in values:
        if v < 1:
            raise LayoutError(f"{name} must be >= 1, got {v}")
    return values


def make_slices(layout: FlatLayout, slice_size, passthrough_chunk: int = 256) -> list[SliceSpec]:
    """Tile every layer with slices of ``slice_size`` (int, or one per layer).

    A trailing remainder shorter than K becomes a ``residual`` slice.  Passthrough
    parameters are chunked into ``passthrough`` slices after all layers.
    """
    ks = _per_layer(slice_size, len(layout.layers), "slice size")
    slices = []
    for li, (layer, k) in enumerate(zip(layout.layers, ks)):
        start, stop = layout.layer_range(li)
        m = 0
        pos = start
        while pos < stop:
            length = min(k, stop - pos)
            slices.append(SliceSpec(li, m, pos, length, FULL if length == k else RESIDUAL))
            pos += length
            m += 1
    if layout.passthrough:
        if passthrough_chunk < 1:
            raise LayoutError("passthrough chunk must be >= 1")
        pos, m = layout.conv_size, 0
        while pos < layout.size:
            length = min(passthrough_chunk, layout.size - pos)
            slices.append(SliceSpec(-1, m, pos, length, PASSTHROUGH))
            pos += length
            m += 1
    return slices


def make_segments(slices: Sequence[SliceSpec], n_nodes: int) -> list[Segment]:
    """Split whole slices into ``n_nodes`` contiguous, element-balanced segments.

    Boundary j is placed at the first slice edge whose cumulative element count
    reaches ``j * total / N``, so any surplus lands in the earlier segments.
    """
    if n_nodes < 1:
        raise LayoutError("node count must be >= 1")
    n = len(slices)
    if n < n_nodes:
        raise LayoutError(f"{n} slices cannot be split across {n_nodes} nodes")
    for a, b in zip(slices, slices[1:]):
        if a.stop != b.start:
            raise LayoutError("slices must be contiguous and ordered")
    cum = np.cumsum([s.length for s in slices])
    total = int(cum[-1])
    bounds = [0]
    for j in range(1, n_nodes):
        target = j * total / n_nodes
        b = int(np.searchsorted(cum, target - 1e-9 * total, side="left")) + 1
        b = max(b, bounds[-1] + 1)
        b = min(b, n - (n_nodes - j))
        bounds.append(b)
    bounds.append(n)
    return [
        Segment(j, bounds[j], bounds[j + 1], slices[bounds[j]].start, slices[bounds[j + 1] - 1].stop)
        for j in range(n_nodes)
    ]
