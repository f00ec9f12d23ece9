"""Ordered point-to-point delivery around a logical ring.

Both backends frame messages the same way, as a u32 LE payload length
followed by the payload, so byte accounting is identical across them.
"""
from __future__ import annotations

import queue
import socket
import struct
import threading
from collections import defaultdict
from dataclasses import dataclass, field

FRAME_HEADER = struct.Struct("<I")
HEADER_SIZE = FRAME_HEADER.size
DEFAULT_TIMEOUT = 30.0


class TransportError(RuntimeError):
    pass


@dataclass(frozen=True)
class RingTopology:
    n_nodes: int

    def __post_init__(self):
        if self.n_nodes < 1:
            raise ValueError("a ring needs at least one node")

    def successor(self, n: int) -> int:
        return (n + 1) % self.n_nodes

    def predecessor(self, n: int) -> int:
        return (n - 1) % self.n_nodes


@dataclass
class LinkStats:
    n_nodes: int
    bandwidth: float | None = None  # bytes / second
    latency: float = 0.0  # seconds
    bytes_sent: list = field(default_factory=list)
    bytes_received: list = field(default_factory=list)
    messages: dict = field(default_factory=lambda: defaultdict(int))

    def __post_init__(self):
        self.bytes_sent = self.bytes_sent or [0] * self.n_nodes
        self.bytes_received = self.bytes_received or [0] * self.n_nodes
        self._lock = threading.Lock()

    def record_send(self, node: int, nbytes: int, phase: str | None = None) -> None:
        with self._lock:
            self.bytes_sent[node] += nbytes
            if phase is not None:
                self.messages[phase] += 1

    def record_recv(self, node: int, nbytes: int) -> None:
        with self._lock:
            self.bytes_received[node] += nbytes

    def reset(self) -> None:
        with self._lock:
            self.bytes_sent = [0] * self.n_nodes
            self.bytes_received = [0] * self.n_nodes
            self.messages = defaultdict(int)


def simulated_transfer_time(nbytes: int, stats: LinkStats) -> float:
    if not stats.bandwidth or stats.bandwidth <= 0:
        raise ValueError("simulated transfer time needs a positive bandwidth")
    return stats.latency + nbytes / stats.bandwidth


class Endpoint:
    """One node's view of the ring: send to the successor, receive from the predecessor."""

    def __init__(self, node: int, topology: RingTopology, stats: LinkStats, timeout: float):
        self.node = node
        self.topology = topology
        self.stats = stats
        self.timeout = timeout

    def _check_send(self, to: int) -> None:
        if to != self.topology.successor(self.node):
            raise TransportError(f"node {self.node} may only send to {self.topology.successor(self.node)}, not {to}")

    def _check_recv(self, frm: int) -> None:
        if frm != self.topology.predecessor(self.node):
            raise TransportError(f"node {self.node} may only receive from {self.topology.predecessor(self.node)}, not {frm}")

    def send(self, to: int, payload: bytes, phase: str | None = None) -> None:
        raise NotImplementedError

    def recv(self, frm: int, timeout: float | None = None) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass


class _QueueEndpoint(Endpoint):
    def __init__(self, node, topology, stats, timeout, inbox: queue.Queue, outbox: queue.Queue):
        super().__init__(node, topology, stats, timeout)
        self._inbox = inbox
        self._outbox = outbox

    def send(self, to, payload, phase=None):
        self._check_send(to)
        frame = FRAME_HEADER.pack(len(payload)) + bytes(payload)
        self._outbox.put(frame)
        self.stats.record_send(self.node, len(frame), phase)

    def recv(self, frm, timeout=None):
        self._check_recv(frm)
        try:
            frame = self._inbox.get(timeout=self.timeout if timeout is None else timeout)
        except queue.Empty:
            raise TransportError(f"node {self.node}: timed out waiting for node {frm}") from None
        (length,) = FRAME_HEADER.unpack_from(frame)
        if length != len(frame) - HEADER_SIZE:
            raise TransportError(f"node {self.node}: corrupt frame from node {frm}")
        self.stats.record_recv(self.node, len(frame))
        return frame[HEADER_SIZE:]


class InProcRing:
    """Ring of FIFO queues, one per directed edge; usable single-threaded or from threads."""

    def __init__(self, n_nodes: int, stats: LinkStats | None = None, timeout: float = DEFAULT_TIMEOUT):
        self.topology = RingTopology(n_nodes)
        self.stats = stats if stats is not None else LinkStats(n_nodes)
        # edge n carries frames from node n to its successor
        self._edges = [queue.Queue() for _ in range(n_nodes)]
        self.endpoints = [
            _QueueEndpoint(n, self.topology, self.stats, timeout,
                           inbox=self._edges[self.topology.predecessor(n)], outbox=self._edges[n])
            for n in range(n_nodes)
        ]

    @property
    def n_nodes(self) -> int:
        return self.topology.n_nodes

    def endpoint(self, n: int) -> Endpoint:
        return self.endpoints[n]

    def pending(self) -> int:
        return sum(q.qsize() for q in self._edges)

    def close(self) -> None:
        pass


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise TransportError("connection closed by peer")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


class _TcpEndpoint(Endpoint):
    def __init__(self, node, topology, stats, timeout, listener: socket.socket):
        super().__init__(node, topology, stats, timeout)
        self._listener = listener
        self._out: socket.socket | None = None
        self._in: socket.socket | None = None
        self._send_lock = threading.Lock()

    def connect(self, successor_addr) -> None:
        self._out = socket.create_connection(successor_addr, timeout=self.timeout)
        self._out.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def accept(self) -> None:
        self._listener.settimeout(self.timeout)
        conn, _ = self._listener.accept()
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._in = conn

    def send(self, to, payload, phase=None):
        self._check_send(to)
        frame = FRAME_HEADER.pack(len(payload)) + bytes(payload)
        try:
            with self._send_lock:
                self._out.sendall(frame)
        except OSError as exc:
            raise TransportError(f"node {self.node}: send to {to} failed: {exc}") from exc
        self.stats.record_send(self.node, len(frame), phase)

    def recv(self, frm, timeout=None):
        self._check_recv(frm)
        self._in.settimeout(self.timeout if timeout is None else timeout)
        try:
            (length,) = FRAME_HEADER.unpack(_recv_exact(self._in, HEADER_SIZE))
            payload = _recv_exact(self._in, length)
        except socket.timeout:
            raise TransportError(f"node {self.node}: timed out waiting for node {frm}") from None
        except OSError as exc:
            raise TransportError(f"node {self.node}: receive from {frm} failed: {exc}") from exc
        self.stats.record_recv(self.node, HEADER_SIZE + length)
        return payload

    def close(self):
        for s in (self._out, self._in, self._listener):
            if s is not None:
                try:
                    s.close()
                except OSError:
                    pass


class TcpRing:
    """One persistent TCP connection per ring edge.

    ``addresses`` lists each node's listen address in ring order; port 0 picks
    an ephemeral port.  Every endpoint lives in this process, which is how the
    simulator drives it; each node still talks only through its own sockets.
    """

    def __init__(self, addresses, stats: LinkStats | None = None, timeout: float = DEFAULT_TIMEOUT):
        n = len(addresses)
        self.topology = RingTopology(n)
        self.stats = stats if stats is not None else LinkStats(n)
        listeners = []
        for host, port in addresses:
            s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            s.bind((host, port))
            s.listen(1)
            listeners.append(s)
        self.addresses = [s.getsockname() for s in listeners]
        self.endpoints = [_TcpEndpoint(i, self.topology, self.stats, timeout, listeners[i]) for i in range(n)]
        acceptors = [threading.Thread(target=ep.accept, daemon=True) for ep in self.endpoints]
        for t in acceptors:
            t.start()
        try:
            for i, ep in enumerate(self.endpoints):
                ep.connect(self.addresses[self.topology.successor(i)])
        except OSError as exc:
            self.close()
            raise TransportError(f"could not build TCP ring: {exc}") from exc
        for t in acceptors:
            t.join(timeout)
        if any(ep._in is None for ep in self.endpoints):
            self.close()
            raise TransportError("TCP ring setup timed out")

    @classmethod
    def local(cls, n_nodes: int, **kwargs) -> "TcpRing":
        return cls([("127.0.0.1", 0)] * n_nodes, **kwargs)

    @property
    def n_nodes(self) -> int:
        return self.topology.n_nodes

    def endpoint(self, n: int) -> Endpoint:
        return self.endpoints[n]

    def close(self) -> None:
        for ep in self.endpoints:
            ep.close()
