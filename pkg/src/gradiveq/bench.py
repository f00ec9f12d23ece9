"""Bytes and simulated aggregation time of one compressed iteration in every mode.

Compressors come from a sampling window of exact aggregates, then a single
iteration right after it is aggregated with RAW, GVQ and SCALAR on the same
gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .config import RunConfig
from .pipeline import Simulation
from .qsgd import compression_ratios
from .rar import Mode, run_iteration, simulated_time
from .transport import InProcRing, LinkStats

BENCH_COLUMNS = ("mode", "bytes_per_node", "sim_agg_s", "bytes_vs_raw", "time_vs_raw", "codec_ratio")


@dataclass(frozen=True)
class BenchRow:
    mode: str
    bytes_per_node: float
    sim_agg_s: float
    bytes_vs_raw: float  # RAW bytes / mode bytes
    time_vs_raw: float
    codec_ratio: float  # mean K/d for GVQ, nominal 32/b for SCALAR

    def to_csv(self) -> list[str]:
        return [self.mode, repr(self.bytes_per_node), repr(self.sim_agg_s), repr(self.bytes_vs_raw),
                repr(self.time_vs_raw), repr(self.codec_ratio)]


def _div(a: float, b: float) -> float:
    return a / b if b else float("nan")


def bench(cfg: RunConfig) -> list[BenchRow]:
    sim = Simulation(replace(cfg, mode="gvq"))
    sched = sim.schedule
    ctrls = sim.controllers[0]
    start = sched.warmup
    for t in range(start if sim.feed.stateful else 0):
        sim.feed.update(t, [np.sum(np.stack(sim.feed.gradients(t)), axis=0)] * cfg.nodes)
    for t in range(start, start + sched.sample_iters):
        agg = np.sum(np.stack(sim.feed.gradients(t)), axis=0)
        for c in ctrls:
            c.record_aggregate(t, agg)
        sim.feed.update(t, [agg] * cfg.nodes)
    if not any(c.table for c in ctrls):
        for c in ctrls:
            c.rebuild()  # compressed_iters == 0 skips the automatic rebuild
    table = {}
    for c in ctrls:
        table.update(c.table)
    t = start + sched.sample_iters
    grads = sim.feed.gradients(t)
    measured = {}
    for mode in (Mode.RAW, Mode.GVQ, Mode.SCALAR):
        stats = LinkStats(cfg.nodes, bandwidth=cfg.network.bandwidth, latency=cfg.network.latency)
        ring = InProcRing(cfg.nodes, stats=stats)
        try:
            res = run_iteration(grads, sim.plan, mode, table if mode is Mode.GVQ else None, iteration=t,
                                ring=ring, wire_dtype=sim.wire, scalar_bits=cfg.codec.scalar_bits, seed=cfg.seed)
        finally:
            ring.close()
        measured[mode] = (float(np.mean(res.bytes_sent)), simulated_time(res, stats, cfg.network.compute_rate))
    comps = list(table.values())
    codec_ratio = {
        Mode.RAW: 1.0,
        Mode.GVQ: float(np.mean([c.ratio for c in comps])) if comps else 1.0,
        Mode.SCALAR: compression_ratios(1, cfg.codec.scalar_bits)[0],
    }
    raw_b, raw_t = measured[Mode.RAW]
    return [BenchRow(m.name.lower(), b, s, _div(raw_b, b), _div(raw_t, s), codec_ratio[m])
            for m, (b, s) in measured.items()]


def format_table(rows: list[BenchRow]) -> str:
    lines = [f"{'mode':<8}{'bytes/node':>14}{'sim_agg_s':>14}{'bytes x':>10}{'time x':>10}{'ratio':>8}"]
    for r in rows:
        lines.append(f"{r.mode:<8}{r.bytes_per_node:>14.0f}{r.sim_agg_s:>14.3e}{r.bytes_vs_raw:>10.2f}"
                     f"{r.time_vs_raw:>10.2f}{r.codec_ratio:>8.2f}")
    return "\n".join(lines)
