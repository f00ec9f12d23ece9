"""Ring all-reduce with compressed-domain aggregation.

Timeline of one iteration at node ``n`` of an ``N``-node ring (``[x]`` is x mod N):

* ``begin``: encode segment ``[n]`` and send it to the successor.
* ``compression_round_step(i)``, i = 1..N-1: download the partial sum of
  segment ``[n-i]`` while encoding the node's own copy of that segment, add the
  two, and send the result on.  After step N-1 the node holds the complete
  aggregate of segment ``[n+1]``, which it sends as the first circulation frame.
* ``circulate_round_step(j)``, j = 0..N-2: download the aggregate of segment
  ``[n-j]`` while decoding the previously held one; forward the downloaded
  bytes unchanged unless this is the last step.
* ``finish``: decode the last downloaded segment.

That is N-1 downloads per round and 2(N-1) frames sent per node, for every
mode.  RAW moves float values, GVQ moves projection coefficients (summed
without decoding), and SCALAR has to dequantize, add and requantize on every
hop of the first round.
"""
from __future__ import annotations

import hashlib
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np

from . import codec, qsgd
from .layout import FlatLayout, Segment, SliceSpec, make_segments, make_slices
from .transport import HEADER_SIZE, InProcRing, LinkStats, TransportError


class ProtocolError(RuntimeError):
    pass


class Mode(IntEnum):
    RAW = 0
    GVQ = 1
    SCALAR = 2

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, cls):
            return value
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise ValueError(f"unknown mode {value!r}; expected raw, gvq or scalar") from None


class Phase(IntEnum):
    COMPRESS_ROUND = 0
    CIRCULATE_ROUND = 1


_FRAME = struct.Struct("<IBBHHI")
FRAME_OVERHEAD = _FRAME.size

# flop costs per element for the simulated compute model
QSGD_QUANTIZE_FLOPS = 6
QSGD_DEQUANTIZE_FLOPS = 2


@dataclass(frozen=True, eq=False)
class RarFrame:
    iteration: int
    phase: Phase
    mode: Mode
    step: int
    segment: int
    payload: bytes

    def to_bytes(self) -> bytes:
        return _FRAME.pack(self.iteration, self.phase, self.mode, self.step, self.segment,
                           len(self.payload)) + self.payload

    @classmethod
    def from_bytes(cls, buf: bytes) -> "RarFrame":
        if len(buf) < _FRAME.size:
            raise ProtocolError(f"frame of {len(buf)} bytes is shorter than its header")
        it, phase, mode, step, seg, length = _FRAME.unpack_from(buf)
        if len(buf) != _FRAME.size + length:
            raise ProtocolError(f"frame declares {length} payload bytes but carries {len(buf) - _FRAME.size}")
        try:
            return cls(it, Phase(phase), Mode(mode), step, seg, bytes(buf[_FRAME.size:]))
        except ValueError as exc:
            raise ProtocolError(f"bad frame header: {exc}") from None


@dataclass(frozen=True)
class RingPlan:
    """Static slice and segment map shared by every node."""

    layout: FlatLayout
    slices: tuple[SliceSpec, ...]
    segments: tuple[Segment, ...]

    @classmethod
    def build(cls, layout: FlatLayout, slice_size, n_nodes: int, passthrough_chunk: int = 256) -> "RingPlan":
        slices = tuple(make_slices(layout, slice_size, passthrough_chunk))
        return cls(layout, slices, tuple(make_segments(slices, n_nodes)))

    @property
    def n_nodes(self) -> int:
        return len(self.segments)

    @property
    def size(self) -> int:
        return self.layout.size


def table_digest(table: dict | None) -> str:
    h = hashlib.sha256()
    seen: dict[int, bytes] = {}
    for sid in sorted(table or {}):
        comp = table[sid]
        blob = seen.get(id(comp))
        if blob is None:
            blob = seen[id(comp)] = hashlib.sha256(comp.digest_bytes()).digest()
        h.update(struct.pack("<I", sid))
        h.update(blob)
    return h.hexdigest()


def scalar_seed(seed: int, iteration: int, phase: int, step: int, segment: int, node: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(iteration), int(phase), int(step), int(segment), int(node)])


@dataclass
class StepRecord:
    phase: str
    step: int
    bytes_in: int = 0
    overlap_flops: float = 0.0
    serial_flops: float = 0.0


# ---------------------------------------------------------------------------
# per-mode segment codecs


class _Codec:
    def __init__(self, node: "RingNode"):
        self.node = node
        self.plan = node.plan
        self.n = node.plan.n_nodes
        self.wire = np.dtype(node.wire_dtype).newbyteorder("<")

    def _count(self, op: str, phase: str, k: int = 1) -> None:
        key = (op, phase)
        self.node.op_counts[key] = self.node.op_counts.get(key, 0) + k

    def _floats(self, payload: bytes, expected: int) -> np.ndarray:
        arr = np.frombuffer(payload, self.wire)
        if arr.size != expected or len(payload) != expected * self.wire.itemsize:
            raise ProtocolError(f"payload holds {len(payload)} bytes, expected {expected} values")
        return arr.astype(np.float64)


class _RawCodec(_Codec):
    def local(self, seg: Segment, grad, phase):
        return grad[seg.start:seg.stop].copy(), 0.0

    def add(self, received, own, phase):
        return received + own, float(own.size)

    def encode(self, acc, seg, phase, step):
        return acc.astype(self.wire).tobytes(), 0.0

    def decode(self, payload, seg, count, phase):
        return self._floats(payload, seg.size), 0.0

    def expand(self, acc, seg, phase):
        return acc, 0.0


class _GvqCodec(_Codec):
    def __init__(self, node):
        super().__init__(node)
        table = node.table or {}
        self.blocks = {}
        for seg in self.plan.segments:
            blocks = []
            for sid in seg.slice_ids:
                spec = self.plan.slices[sid]
                comp = table.get(sid)
                if comp is not None and (comp.degenerate or not spec.compressible or comp.K != spec.length):
                    comp = None
                blocks.append((sid, spec, comp))
            self.blocks[seg.index] = blocks

    def local(self, seg, grad, phase):
        acc, flops = [], 0.0
        for sid, spec, comp in self.blocks[seg.index]:
            x = grad[spec.start:spec.stop]
            if comp is None:
                acc.append(x.copy())
            else:
                acc.append(codec.compress(x, comp, self.n, sid))
                flops += 2.0 * comp.K * comp.d + comp.K
                self._count("compress", phase)
        return acc, flops

    def add(self, received, own, phase):
        out, flops = [], 0.0
        for a, b in zip(received, own):
            if isinstance(a, codec.CompressedSlice):
                out.append(codec.aggregate(a, b))
                flops += a.d
            else:
                out.append(a + b)
                flops += a.size
        return out, flops

    def encode(self, acc, seg, phase, step):
        parts = [a.coefficients if isinstance(a, codec.CompressedSlice) else a for a in acc]
        return np.concatenate(parts).astype(self.wire).tobytes(), 0.0

    def decode(self, payload, seg, count, phase):
        sizes = [spec.length if comp is None else comp.d for _, spec, comp in self.blocks[seg.index]]
        flat = self._floats(payload, sum(sizes))
        acc, pos = [], 0
        for (sid, spec, comp), size in zip(self.blocks[seg.index], sizes):
            block = flat[pos:pos + size]
            pos += size
            acc.append(block if comp is None else codec.CompressedSlice(sid, comp.version, block, count))
        return acc, 0.0

    def expand(self, acc, seg, phase):
        parts, flops = [], 0.0
        for a, (sid, spec, comp) in zip(acc, self.blocks[seg.index]):
            if comp is None:
                parts.append(a)
            else:
                parts.append(codec.decompress(a, comp, self.n))
                flops += 2.0 * comp.K * comp.d + comp.K
                self._count("decompress", phase)
        return np.concatenate(parts), flops


class _ScalarCodec(_Codec):
    def local(self, seg, grad, phase):
        return grad[seg.start:seg.stop].copy(), 0.0

    def add(self, received, own, phase):
        return received + own, float(own.size)

    def encode(self, acc, seg, phase, step):
        node = self.node
        ss = scalar_seed(node.seed, node.iteration, phase_code(phase), step, seg.index, node.node_id)
        q = qsgd.quantize(acc, node.scalar_bits, ss)
        self._count("quantize", phase)
        return q.to_bytes(), float(QSGD_QUANTIZE_FLOPS * acc.size)

    def decode(self, payload, seg, count, phase):
        q = qsgd.QuantizedVector.from_bytes(payload, seg.size, self.node.scalar_bits)
        self._count("dequantize", phase)
        return qsgd.dequantize(q), float(QSGD_DEQUANTIZE_FLOPS * seg.size)

    def expand(self, acc, seg, phase):
        return acc, 0.0


_CODECS = {Mode.RAW: _RawCodec, Mode.GVQ: _GvqCodec, Mode.SCALAR: _ScalarCodec}
_PHASE_NAMES = {Phase.COMPRESS_ROUND: "compress", Phase.CIRCULATE_ROUND: "circulate"}


def phase_code(name: str) -> int:
    return Phase.COMPRESS_ROUND if name == "compress" else Phase.CIRCULATE_ROUND


# ---------------------------------------------------------------------------


class RingNode:
    """State machine of one ring member for one iteration."""

    def __init__(self, node_id: int, plan: RingPlan, mode, endpoint, *, table: dict | None = None,
                 iteration: int = 0, wire_dtype=np.float32, scalar_bits: int = 4, seed: int = 0,
                 executor: ThreadPoolExecutor | None = None, order: str = "download_first",
                 trace: list | None = None):
        if order not in ("download_first", "compute_first"):
            raise ValueError(f"unknown overlap order {order!r}")
        self.node_id = node_id
        self.plan = plan
        self.mode = Mode.parse(mode)
        self.endpoint = endpoint
        self.table = table
        self.iteration = iteration
        self.wire_dtype = wire_dtype
        self.scalar_bits = scalar_bits
        self.seed = seed
        self.executor = executor
        self.order = order
        self.trace = trace
        self.n = plan.n_nodes
        self.op_counts: dict = {}
        self.timeline: list[StepRecord] = []
        self.frames_sent = 0
        self.codec = _CODECS[self.mode](self)
        self.grad: np.ndarray | None = None
        self.acc = None
        self.acc_segment = None
        self.segment_counts: dict[int, int] = {}
        self.held_payload: bytes | None = None
        self.outputs: dict[int, np.ndarray] = {}

    @property
    def successor(self) -> int:
        return (self.node_id + 1) % self.n

    @property
    def predecessor(self) -> int:
        return (self.node_id - 1) % self.n

    def _seg(self, k: int) -> Segment:
        return self.plan.segments[k % self.n]

    def _log(self, what: str, phase: str, step: int) -> None:
        if self.trace is not None:
            self.trace.append((self.node_id, phase, step, what))

    def _send(self, phase: Phase, step: int, seg: Segment, payload: bytes) -> RarFrame:
        frame = RarFrame(self.iteration, phase, self.mode, step, seg.index, payload)
        self.endpoint.send(self.successor, frame.to_bytes(), _PHASE_NAMES[phase])
        self.frames_sent += 1
        return frame

    def _download(self, phase: Phase, step: int, seg: Segment):
        raw = self.endpoint.recv(self.predecessor)
        frame = RarFrame.from_bytes(raw)
        expected = (self.iteration, phase, self.mode, step, seg.index)
        got = (frame.iteration, frame.phase, frame.mode, frame.step, frame.segment)
        if got != expected:
            raise ProtocolError(f"node {self.node_id}: expected frame {expected}, got {got}")
        return frame, len(raw) + HEADER_SIZE

    def _overlap(self, download, work, phase_name: str, step: int):
        """Run a download and a local work item with no ordering between them."""
        if self.executor is not None:
            fut = self.executor.submit(download)
            done = work()
            self._log("compute", phase_name, step)
            got = fut.result()
            self._log("download", phase_name, step)
            return got, done
        if self.order == "download_first":
            got = download()
            self._log("download", phase_name, step)
            done = work()
            self._log("compute", phase_name, step)
        else:
            done = work()
            self._log("compute", phase_name, step)
            got = download()
            self._log("download", phase_name, step)
        return got, done

    def begin(self, grad) -> RarFrame | None:
        grad = np.asarray(grad, dtype=np.float64).reshape(-1)
        if grad.size != self.plan.size:
            raise ProtocolError(f"node {self.node_id}: gradient has {grad.size} values, plan expects {self.plan.size}")
        self.grad = grad
        seg = self._seg(self.node_id)
        acc, flops = self.codec.local(seg, grad, "compress")
        self.acc, self.acc_segment = acc, seg.index
        self.segment_counts[seg.index] = 1
        rec = StepRecord("compress", 0, serial_flops=flops)
        self.timeline.append(rec)
        if self.n == 1:
            return self._complete_reduction(rec)
        payload, f = self.codec.encode(acc, seg, "compress", 0)
        rec.serial_flops += f
        return self._send(Phase.COMPRESS_ROUND, 0, seg, payload)

    def compression_round_step(self, i: int) -> RarFrame | None:
        if not 1 <= i <= self.n - 1:
            raise ProtocolError(f"compression step {i} outside [1, {self.n - 1}]")
        seg = self._seg(self.node_id - i)
        rec = StepRecord("compress", i)
        (frame, nbytes), (own, own_flops) = self._overlap(
            lambda: self._download(Phase.COMPRESS_ROUND, i - 1, seg),
            lambda: self.codec.local(seg, self.grad, "compress"),
            "compress", i,
        )
        rec.bytes_in, rec.overlap_flops = nbytes, own_flops
        received, f_dec = self.codec.decode(frame.payload, seg, i, "compress")
        acc, f_add = self.codec.add(received, own, "compress")
        rec.serial_flops = f_dec + f_add
        self.acc, self.acc_segment = acc, seg.index
        self.segment_counts[seg.index] = i + 1
        self.timeline.append(rec)
        if i < self.n - 1:
            payload, f_enc = self.codec.encode(acc, seg, "compress", i)
            rec.serial_flops += f_enc
            return self._send(Phase.COMPRESS_ROUND, i, seg, payload)
        return self._complete_reduction(rec)

    def _complete_reduction(self, rec: StepRecord) -> RarFrame | None:
        seg = self._seg(self.acc_segment)
        if self.segment_counts[seg.index] != self.n:
            raise ProtocolError(f"node {self.node_id}: segment {seg.index} incomplete after compression round")
        if self.n == 1:
            return None  # nothing goes on the wire
        payload, f_enc = self.codec.encode(self.acc, seg, "circulate", 0)
        # decode our own payload so every node ends up with identical values
        self.acc, f_dec = self.codec.decode(payload, seg, self.n, "circulate")
        rec.serial_flops += f_enc + f_dec
        self.held_payload = payload
        return self._send(Phase.CIRCULATE_ROUND, 0, seg, payload)

    def circulate_round_step(self, j: int) -> RarFrame | None:
        if not 0 <= j <= self.n - 2:
            raise ProtocolError(f"circulation step {j} outside [0, {self.n - 2}]")
        seg = self._seg(self.node_id - j)
        held_seg = self._seg(self.acc_segment)
        held = self.acc
        rec = StepRecord("circulate", j)
        (frame, nbytes), (values, f_exp) = self._overlap(
            lambda: self._download(Phase.CIRCULATE_ROUND, j, seg),
            lambda: self.codec.expand(held, held_seg, "circulate"),
            "circulate", j,
        )
        self.outputs[held_seg.index] = values
        rec.bytes_in, rec.overlap_flops = nbytes, f_exp
        self.acc, f_dec = self.codec.decode(frame.payload, seg, self.n, "circulate")
        rec.serial_flops = f_dec
        self.acc_segment = seg.index
        self.held_payload = frame.payload
        self.timeline.append(rec)
        if j < self.n - 2:
            return self._send(Phase.CIRCULATE_ROUND, j + 1, seg, frame.payload)
        return None

    def finish(self) -> np.ndarray:
        seg = self._seg(self.acc_segment)
        values, flops = self.codec.expand(self.acc, seg, "circulate")
        self.outputs[seg.index] = values
        self.timeline.append(StepRecord("finish", 0, serial_flops=flops))
        if len(self.outputs) != self.n:
            raise ProtocolError(f"node {self.node_id}: holds {len(self.outputs)} of {self.n} segments")
        return np.concatenate([self.outputs[k] for k in range(self.n)])

    def run(self, grad) -> np.ndarray:
        self.begin(grad)
        for i in range(1, self.n):
            self.compression_round_step(i)
        for j in range(self.n - 1):
            self.circulate_round_step(j)
        return self.finish()


@dataclass
class IterationResult:
    outputs: list
    nodes: list
    bytes_sent: list = field(default_factory=list)

    @property
    def frames_sent(self) -> list[int]:
        return [node.frames_sent for node in self.nodes]

    def op_count(self, op: str, phase: str | None = None) -> list[int]:
        return [sum(v for (o, p), v in node.op_counts.items() if o == op and (phase is None or p == phase))
                for node in self.nodes]


def run_iteration(grads: Sequence, plan: RingPlan, mode, tables=None, *, iteration: int = 0,
                  ring=None, scheduler: str = "deterministic", order: str = "download_first",
                  wire_dtype=np.float32, scalar_bits: int = 4, seed: int = 0,
                  check_tables: bool = True, trace: list | None = None) -> IterationResult:
    """Aggregate one gradient vector per node and return every node's copy of the sum.

    ``tables`` is one compressor table (slice id -> Compressor) per node, or a
    single table shared by all.  ``scheduler="deterministic"`` interleaves all
    nodes round-robin on the calling thread; ``"threaded"`` gives each node its
    own thread plus a download worker so downloads overlap codec work.
    """
    mode = Mode.parse(mode)
    n = plan.n_nodes
    if len(grads) != n:
        raise ProtocolError(f"{len(grads)} gradients for a {n}-node plan")
    if tables is None or isinstance(tables, dict):
        tables = [tables] * n
    if len(tables) != n:
        raise ProtocolError(f"{len(tables)} compressor tables for {n} nodes")
    if mode is Mode.GVQ and check_tables:
        digests = {table_digest(t) for t in tables}
        if len(digests) != 1:
            raise ProtocolError("compressor tables diverge between nodes; aborting iteration")
    own_ring = ring is None
    if own_ring:
        ring = InProcRing(n)
    if ring.n_nodes != n:
        raise ProtocolError(f"ring has {ring.n_nodes} nodes, plan has {n}")
    before = list(ring.stats.bytes_sent)
    try:
        if scheduler == "deterministic":
            nodes = [RingNode(k, plan, mode, ring.endpoint(k), table=tables[k], iteration=iteration,
                              wire_dtype=wire_dtype, scalar_bits=scalar_bits, seed=seed, order=order,
                              trace=trace) for k in range(n)]
            for k, node in enumerate(nodes):
                node.begin(grads[k])
            for i in range(1, n):
                for node in nodes:
                    node.compression_round_step(i)
            for j in range(n - 1):
                for node in nodes:
                    node.circulate_round_step(j)
            outputs = [node.finish() for node in nodes]
        elif scheduler == "threaded":
            nodes, outputs = _run_threaded(grads, plan, mode, tables, ring, iteration, wire_dtype,
                                           scalar_bits, seed, trace)
        else:
            raise ValueError(f"unknown scheduler {scheduler!r}")
    finally:
        if own_ring:
            ring.close()
    sent = [a - b for a, b in zip(ring.stats.bytes_sent, before)]
    return IterationResult(outputs, nodes, sent)


def _run_threaded(grads, plan, mode, tables, ring, iteration, wire_dtype, scalar_bits, seed, trace):
    n = plan.n_nodes
    executors = [ThreadPoolExecutor(max_workers=1) for _ in range(n)]
    lock = threading.Lock()
    shared_trace = None if trace is None else _LockedList(trace, lock)
    nodes = [RingNode(k, plan, mode, ring.endpoint(k), table=tables[k], iteration=iteration,
                      wire_dtype=wire_dtype, scalar_bits=scalar_bits, seed=seed,
                      executor=executors[k], trace=shared_trace) for k in range(n)]
    outputs: list = [None] * n
    errors: list = []

    def work(k):
        try:
            outputs[k] = nodes[k].run(grads[k])
        except BaseException as exc:  # surfaced after join
            errors.append(exc)

    threads = [threading.Thread(target=work, args=(k,), daemon=True) for k in range(n)]
    try:
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    finally:
        for ex in executors:
            ex.shutdown(wait=False)
    if errors:
        err = errors[0]
        if isinstance(err, (ProtocolError, TransportError)):
            raise err
        raise ProtocolError(f"ring node failed: {err!r}") from err
    return nodes, outputs


class _LockedList:
    def __init__(self, target: list, lock: threading.Lock):
        self._target = target
        self._lock = lock

    def append(self, item) -> None:
        with self._lock:
            self._target.append(item)


def simulated_time(result: IterationResult, stats: LinkStats, compute_rate: float) -> float:
    """Synchronous ring time: each step lasts as long as its slowest node.

    Within a step, download and overlappable codec work run in parallel; work
    that needs the downloaded data follows it.
    """
    if result.nodes and result.nodes[0].n == 1:
        return 0.0
    from .transport import simulated_transfer_time

    steps = len(result.nodes[0].timeline)
    total = 0.0
    for s in range(steps):
        worst = 0.0
        for node in result.nodes:
            rec = node.timeline[s]
            xfer = simulated_transfer_time(rec.bytes_in, stats) if rec.bytes_in else 0.0
            t = max(xfer, rec.overlap_flops / compute_rate) + rec.serial_flops / compute_rate
            worst = max(worst, t)
        total += worst
    return total


def bytes_per_node(mode, M: int, N: int, r: float = 1.0, *, bits: int = 4, residual: int = 0,
                   frame_overhead: bool = False) -> float:
    """Payload bytes each node sends in one iteration (both rounds).

    ``residual`` elements travel uncompressed in GVQ mode.  With
    ``frame_overhead`` the per-frame RAR and transport headers are added.
    """
    mode = Mode.parse(mode)
    if r < 1:
        raise ValueError("compression ratio must be >= 1")
    if N <= 1:
        return 0.0
    frames = 2 * (N - 1)
    seg = M / N
    if mode is Mode.RAW:
        per = 4.0 * seg
    elif mode is Mode.GVQ:
        per = 4.0 * ((seg - residual / N) / r + residual / N)
    else:
        per = float(qsgd.quantized_size_bytes(int(np.ceil(seg)), bits))
    total = frames * per
    if frame_overhead:
        total += frames * (FRAME_OVERHEAD + HEADER_SIZE)
    return total
