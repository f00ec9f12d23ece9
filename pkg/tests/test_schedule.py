import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradiveq.layout import FlatLayout, make_slices
from gradiveq.pca import SampleBuffer, build_compressor
from gradiveq.schedule import (
    INFINITE, LayerController, PhaseKind, Schedule, ScheduleError, assign_compressors, check_stop, make_controllers,
    phase_of,
)

W, S, C = PhaseKind.WARMUP, PhaseKind.SAMPLE, PhaseKind.COMPRESSED


def stepwise_phases(T, warmup, lt, lc, stops=()):
    """Walk the schedule one iteration at a time, restarting sampling after a stop inside a compressed phase."""
    out = []
    kind, offset, cycle = None, 0, -1
    stops = set(stops)
    for t in range(T):
        if t < warmup:
            out.append((W, -1, t))
            continue
        if kind is None:
            kind, offset, cycle = S, 0, 0
        elif kind is S and offset == lt - 1:
            kind, offset = (C, 0) if lc > 0 else (S, 0)
            cycle += 1 if lc == 0 else 0
        elif kind is S:
            offset += 1
        elif kind is C and (offset == lc - 1 or (t - 1) in stops):
            kind, offset, cycle = S, 0, cycle + 1
        else:
            offset += 1
        out.append((kind, cycle, offset))
    return out


def _tags(T, sched, stops=()):
    return [(tag.kind, tag.cycle, tag.offset) for tag in (phase_of(t, sched, stops) for t in range(T))]


def test_phase_examples():
    s = Schedule(2500, 100, 400)
    assert phase_of(0, s).kind is W
    assert phase_of(2499, s).kind is W
    assert phase_of(2500, s).kind is S
    assert phase_of(2600, s).kind is C
    assert phase_of(3000, s).kind is S and phase_of(3000, s).cycle == 1
    assert phase_of(2800, s, [2800]).kind is C
    assert phase_of(2801, s, [2800]).kind is S
    assert phase_of(2901, s, [2800]).kind is C
    assert s.compressed_fraction == 0.8
    only = Schedule(0, 5, 0)
    assert {phase_of(t, only).kind for t in range(200)} == {S}
    with pytest.raises(ScheduleError):
        phase_of(-1, s)


def test_stops_outside_compressed_phases_are_ignored():
    s = Schedule(10, 5, 10)
    assert _tags(60, s, [3, 12]) == _tags(60, s)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 12), st.integers(2, 6), st.integers(0, 8), st.lists(st.integers(0, 80), max_size=6))
def test_phase_of_matches_stepwise_walk(warmup, lt, lc, stops):
    s = Schedule(warmup, lt, lc)
    # only stops that land in a compressed iteration are actual events
    live, tags = [], _tags(90, s)
    for e in sorted(set(stops)):
        live.append(e)
        tags = _tags(90, s, live)
        if tags[e][0] is not C:
            live.pop()
            tags = _tags(90, s, live)
    assert tags == stepwise_phases(90, warmup, lt, lc, live)


def test_schedule_validation():
    for kw in [dict(warmup=-1), dict(sample_iters=1), dict(compressed_iters=-1), dict(loss_threshold=1.0),
               dict(reuse=0), dict(reuse=1.5), dict(quorum=0.0)]:
        with pytest.raises(ScheduleError):
            Schedule(**kw)
    assert Schedule(loss_threshold=0.02).stop_loss == pytest.approx(0.2)
    assert Schedule(stop_threshold=0.5).stop_loss == 0.5


def _layer(n_slices, K=8):
    lay = FlatLayout.from_shapes([(1, 1, n_slices, K)])
    return make_slices(lay, K)


def _comp(K, seed, degenerate=False):
    rng = np.random.default_rng(seed)
    buf = SampleBuffer(0)
    for _ in range(4):
        buf.add(np.ones(K) if degenerate else rng.normal(size=K))
    return build_compressor(buf, 0.1)


def test_assign_compressors():
    sl = _layer(4)
    ids = [0, 1, 2, 3]
    a, b = _comp(8, 0), _comp(8, 1)
    table = assign_compressors(sl, ids, 2, {0: a, 2: b})
    assert table[0] is a and table[1] is a and table[2] is b and table[3] is b
    sl = _layer(10)
    table = assign_compressors(sl, list(range(10)), INFINITE, {0: a})
    assert len({id(c) for c in table.values()}) == 1 and len(table) == 10
    comps = {i: _comp(8, i) for i in range(4)}
    assert assign_compressors(_layer(4), ids, 1, comps) == comps
    with pytest.raises(ScheduleError):
        assign_compressors(_layer(4), ids, 2, {0: a})
    assert assign_compressors(_layer(4), ids, INFINITE, {0: _comp(8, 0, degenerate=True)}) == {}


def test_check_stop_quorum():
    s = Schedule(loss_threshold=0.01)
    assert not check_stop([0.0] * 6, s)
    assert check_stop([1, 1, 1, 1, 0, 0], s)
    assert not check_stop([1, 1, 1, 0, 0, 0], s)
    assert check_stop([1.0], s)


def _controller(sched, n_slices=3, K=8):
    sl = _layer(n_slices, K)
    return LayerController(0, sl, list(range(n_slices)), sched, 2)


def test_record_sample_builds_and_resets():
    sched = Schedule(warmup=2, sample_iters=3, compressed_iters=4)
    ctl = _controller(sched)
    rng = np.random.default_rng(0)
    with pytest.raises(ScheduleError, match="WARMUP"):
        ctl.record_sample(0, 0, np.zeros(8))
    built = [ctl.record_aggregate(t, rng.normal(size=24)) for t in (2, 3, 4)]
    assert built == [False, False, True]
    assert ctl.version == 1 and len(ctl.buffers[0]) == 3
    assert list(ctl.buffers) == [0]  # s = infinite: only the lead is buffered
    assert ctl.table[0] is ctl.table[2]
    with pytest.raises(ScheduleError, match="COMPRESSED"):
        ctl.record_sample(5, 0, np.zeros(8))
    ctl.record_aggregate(9, rng.normal(size=24))
    assert len(ctl.buffers[0]) == 1 and ctl.table == {}


def test_stop_restarts_sampling():
    sched = Schedule(warmup=0, sample_iters=2, compressed_iters=10, loss_threshold=0.01)
    ctl = _controller(sched)
    rng = np.random.default_rng(1)
    for t in (0, 1):
        ctl.record_aggregate(t, rng.normal(size=24))
    assert not ctl.apply_stop(1, [1.0, 1.0])  # not compressed yet
    assert not ctl.apply_stop(3, [0.0, 1.0])
    assert ctl.apply_stop(4, [1.0, 1.0])
    assert ctl.phase(5).kind is S and ctl.stops == [4]


def test_relative_local_loss_zero_for_in_span_gradient():
    sched = Schedule(warmup=0, sample_iters=3, compressed_iters=3, loss_threshold=0.0)
    ctl = _controller(sched, n_slices=1)
    rng = np.random.default_rng(2)
    v = rng.normal(size=8)
    for t in range(3):
        ctl.record_aggregate(t, v * (t + 1))
    comp = ctl.table[0]
    assert ctl.relative_local_loss(comp.mean / 2 + 3 * v) <= 1e-12
    assert ctl.relative_local_loss(comp.mean / 2) == 0.0


def test_make_controllers_per_layer():
    lay = FlatLayout.from_shapes([(1, 1, 2, 4), (1, 1, 3, 4)], passthrough=5)
    sl = make_slices(lay, 4)
    ctls = make_controllers(sl, lay, Schedule(), 3)
    assert [c.slice_ids for c in ctls] == [[0, 1], [2, 3, 4]]
