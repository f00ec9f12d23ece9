"""Binary gradient dumps.

Layout (little endian): ``b"GVQ1"``, u32 version, u32 layer count, four u32
``(H, W, D, F)`` per layer, u32 node count, u32 iteration count, then float32
values ordered iteration-major, node-major, layer-major, each layer flattened
in F-collocated order.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from ..layout import FlatLayout, LayerShape, flatten_layers

MAGIC = b"GVQ1"
VERSION = 1


class DumpFormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (at byte offset {offset})")
        self.offset = offset


def header_size(n_layers: int) -> int:
    return 4 + 4 + 4 + 16 * n_layers + 4 + 4


def _header(layers, n_nodes: int, n_iters: int) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(layers))]
    parts += [struct.pack("<IIII", *l.shape) for l in layers]
    parts.append(struct.pack("<II", n_nodes, n_iters))
    return b"".join(parts)


class DumpWriter:
    """Streams ``n_iters * n_nodes`` flat vectors, iteration-major."""

    def __init__(self, path, layers, n_nodes: int, n_iters: int):
        self.layout = FlatLayout.from_shapes(layers)
        self.n_nodes, self.n_iters = n_nodes, n_iters
        self.path = Path(path)
        self._fh = open(self.path, "wb")
        self._fh.write(_header(self.layout.layers, n_nodes, n_iters))
        self._written = 0

    def write(self, vector) -> None:
        if self._written >= self.n_nodes * self.n_iters:
            raise DumpFormatError("dump already holds every declared vector")
        v = np.asarray(vector, dtype=np.float64).reshape(-1)
        if v.size != self.layout.size:
            raise DumpFormatError(f"vector of {v.size} values, layout holds {self.layout.size}")
        self._fh.write(v.astype("<f4").tobytes())
        self._written += 1

    def write_tensors(self, tensors) -> None:
        self.write(flatten_layers(tensors, self.layout))

    def close(self) -> None:
        if self._fh.closed:
            return
        self._fh.close()
        if self._written != self.n_nodes * self.n_iters:
            raise DumpFormatError(f"wrote {self._written} of {self.n_nodes * self.n_iters} declared vectors")

    def __enter__(self):
        return self

    def __exit__(self, exc_type, *exc):
        if exc_type is None:
            self.close()
        else:
            self._fh.close()


def write_dump(path, layers, grads) -> None:
    """Write a ``(T, N, M)`` array of flat gradients."""
    grads = np.asarray(grads)
    if grads.ndim != 3:
        raise DumpFormatError(f"expected a (T, N, M) array, got shape {grads.shape}")
    T, N, _ = grads.shape
    with DumpWriter(path, layers, N, T) as w:
        for t in range(T):
            for n in range(N):
                w.write(grads[t, n])


class DumpReader:
    def __init__(self, path):
        self.path = Path(path)
        size = os.path.getsize(self.path)
        with open(self.path, "rb") as fh:
            head = fh.read(12)
            if len(head) < 12:
                raise DumpFormatError("truncated header", len(head))
            if head[:4] != MAGIC:
                raise DumpFormatError(f"bad magic {head[:4]!r}", 0)
            version, n_layers = struct.unpack_from("<II", head, 4)
            if version != VERSION:
                raise DumpFormatError(f"unsupported dump version {version}", 4)
            rest = fh.read(16 * n_layers + 8)
            if len(rest) < 16 * n_layers + 8:
                raise DumpFormatError("truncated header", 12 + len(rest))
        shapes = []
        for i in range(n_layers):
            dims = struct.unpack_from("<IIII", rest, 16 * i)
            try:
                shapes.append(LayerShape(*dims))
            except ValueError as exc:
                raise DumpFormatError(f"layer {i}: {exc}", 12 + 16 * i) from None
        self.n_nodes, self.n_iters = struct.unpack_from("<II", rest, 16 * n_layers)
        self.layout = FlatLayout.from_shapes(shapes)
        self.data_offset = header_size(n_layers)
        expected = self.data_offset + 4 * self.layout.size * self.n_nodes * self.n_iters
        if size < expected:
            raise DumpFormatError(f"truncated dump: {size} bytes, expected {expected}", size)
        if size > expected:
            raise DumpFormatError(f"trailing data: {size} bytes, expected {expected}", expected)
        self._data = None
        if self.layout.size and self.n_nodes and self.n_iters:
            self._data = np.memmap(self.path, dtype="<f4", mode="r", offset=self.data_offset,
                                   shape=(self.n_iters, self.n_nodes, self.layout.size))

    @property
    def layers(self) -> tuple[LayerShape, ...]:
        return self.layout.layers

    def read(self, t: int, n: int) -> np.ndarray:
        if not 0 <= t < self.n_iters:
            raise DumpFormatError(f"iteration {t} is past the end of the dump ({self.n_iters} iterations)")
        if not 0 <= n < self.n_nodes:
            raise DumpFormatError(f"node {n} not in dump ({self.n_nodes} nodes)")
        return np.array(self._data[t, n], dtype=np.float64)

    def close(self) -> None:
        self._data = None


def replay_next(reader: DumpReader, t: int, n: int) -> np.ndarray:
    return reader.read(t, n)
