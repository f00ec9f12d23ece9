import threading

import pytest

from gradiveq.transport import (
    HEADER_SIZE, InProcRing, LinkStats, RingTopology, TcpRing, TransportError, simulated_transfer_time,
)


def test_topology():
    t = RingTopology(4)
    assert [t.successor(n) for n in range(4)] == [1, 2, 3, 0]
    assert [t.predecessor(n) for n in range(4)] == [3, 0, 1, 2]
    with pytest.raises(ValueError):
        RingTopology(0)


@pytest.mark.parametrize("make", [lambda n: InProcRing(n), lambda n: TcpRing.local(n)], ids=["inproc", "tcp"])
def test_loopback_single_node(make):
    ring = make(1)
    try:
        ep = ring.endpoint(0)
        ep.send(0, b"self")
        assert ep.recv(0) == b"self"
    finally:
        ring.close()


def test_fifo_and_byte_accounting():
    ring = InProcRing(3)
    a, b = ring.endpoint(0), ring.endpoint(1)
    for i in range(1000):
        a.send(1, i.to_bytes(4, "little"), "compress")
    assert [int.from_bytes(b.recv(0), "little") for i in range(1000)] == list(range(1000))
    ring.stats.reset()
    a.send(1, b"x" * 100)
    assert ring.stats.bytes_sent[0] == 100 + HEADER_SIZE
    b.recv(0)
    assert sum(ring.stats.bytes_sent) == sum(ring.stats.bytes_received)


def test_only_ring_neighbours():
    ring = InProcRing(4)
    with pytest.raises(TransportError):
        ring.endpoint(0).send(2, b"")
    with pytest.raises(TransportError):
        ring.endpoint(0).recv(1)


def test_recv_timeout():
    ring = InProcRing(2, timeout=0.05)
    with pytest.raises(TransportError, match="timed out"):
        ring.endpoint(1).recv(0)


def test_tcp_ring_concurrent_exchange():
    n = 4
    ring = TcpRing.local(n, timeout=5.0)
    got = [None] * n
    try:
        def node(k):
            ep = ring.endpoint(k)
            ep.send((k + 1) % n, bytes([k]) * (1000 + k), "compress")
            got[k] = ep.recv((k - 1) % n)

        threads = [threading.Thread(target=node, args=(k,)) for k in range(n)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    finally:
        ring.close()
    for k in range(n):
        p = (k - 1) % n
        assert got[k] == bytes([p]) * (1000 + p)
    assert sum(ring.stats.bytes_sent) == sum(ring.stats.bytes_received)
    assert ring.stats.messages["compress"] == n


def test_tcp_connection_loss_raises():
    ring = TcpRing.local(2, timeout=2.0)
    ring.endpoint(0).close()
    with pytest.raises(TransportError):
        ring.endpoint(1).recv(0)
    ring.close()


def test_simulated_transfer_time():
    s = LinkStats(2, bandwidth=1e6, latency=0.25)
    assert simulated_transfer_time(0, s) == 0.25
    s0 = LinkStats(2, bandwidth=1e6)
    assert simulated_transfer_time(10**6, s0) == 1.0
    assert simulated_transfer_time(8000, s0) == pytest.approx(8 * simulated_transfer_time(1000, s0))
    with pytest.raises(ValueError):
        simulated_transfer_time(1, LinkStats(2))
