"""End-to-end simulation: gradient feed -> per-layer schedule -> ring aggregation -> metrics.

Per iteration the ring runs in one mode for the whole vector:

* GVQ if any layer is COMPRESSED (layers that are not stay uncompressed);
* otherwise SCALAR if any layer is SAMPLE and sample quantization is on;
* otherwise RAW.

Runs started with ``mode="raw"`` or ``mode="scalar"`` use that mode on every
iteration and are the baselines.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import relative_loss
from .config import ConfigError, RunConfig, expand_modes
from .layout import FlatLayout, LayerShape
from .metrics import COLUMNS, LayerMetrics, MetricsRecord, MetricsStore, summarize, write_manifest
from .rar import Mode, ProtocolError, RingPlan, run_iteration, simulated_time, table_digest
from .schedule import PhaseKind, make_controllers, phase_of
from .sources import DumpReader, SyntheticSpec, ToyModel, apply_update, make_task, toy_forward_backward, toy_loss
from .sources.synthetic import SyntheticSource
from .transport import InProcRing, LinkStats, TcpRing

log = logging.getLogger(__name__)


class InvariantError(RuntimeError):
    """A run-time check that must never fail did (nodes diverged, etc.)."""


# ---------------------------------------------------------------------------
# gradient feeds


class SyntheticFeed:
    stateful = False

    def __init__(self, cfg: RunConfig):
        src = cfg.source
        self.layout = FlatLayout.from_shapes([LayerShape(*s) for s in src.layers], passthrough=src.passthrough)
        rank = tuple(src.rank) if isinstance(src.rank, list) else src.rank
        self.source = SyntheticSource(SyntheticSpec(
            self.layout, cfg.layout.slice_size, rank, cfg.nodes, src.noise, src.drift, cfg.seed, src.mean_scale))
        self.n = cfg.nodes

    def gradients(self, t: int) -> list[np.ndarray]:
        return [self.source.next(t, n) for n in range(self.n)]

    def update(self, t: int, outputs) -> None:
        pass

    def train_loss(self) -> float | None:
        return None


class ToyFeed:
    """Each node trains its own copy of the toy model on its shard.

    Node gradients are scaled by 1/N so their sum is the global minibatch mean.
    """

    layout = ToyModel.layout
    stateful = True

    def __init__(self, cfg: RunConfig):
        src = cfg.source
        self.n = cfg.nodes
        self.seed = cfg.seed
        self.batch = src.batch
        self.task = make_task(cfg.seed, src.samples, src.template_scale, src.image_noise,
                              src.smoothness, src.label_noise)
        self.models = [ToyModel.init(cfg.seed, lr=src.lr) for _ in range(self.n)]
        self.losses: list[float] = []

    def gradients(self, t: int) -> list[np.ndarray]:
        out, losses = [], []
        for n, model in enumerate(self.models):
            x, y = self.task.batch(n, self.n, t, self.batch, self.seed)
            loss, g = toy_forward_backward(model, x, y)
            losses.append(loss)
            out.append(g / self.n)
        self.losses.append(float(np.mean(losses)))
        return out

    def update(self, t: int, outputs) -> None:
        self.models = [apply_update(m, g) for m, g in zip(self.models, outputs)]

    def train_loss(self) -> float:
        return toy_loss(self.models[0], self.task.images, self.task.labels)


class ReplayFeed:
    stateful = False

    def __init__(self, cfg: RunConfig):
        self.reader = DumpReader(cfg.source.dump)
        self.layout = self.reader.layout
        if self.reader.n_nodes != cfg.nodes:
            raise ConfigError("nodes", f"dump holds {self.reader.n_nodes} nodes, config asks for {cfg.nodes}")
        if self.reader.n_iters < cfg.iterations:
            raise ConfigError("iterations", f"dump holds only {self.reader.n_iters} iterations")
        self.n = cfg.nodes

    def gradients(self, t: int) -> list[np.ndarray]:
        return [self.reader.read(t, n) for n in range(self.n)]

    def update(self, t: int, outputs) -> None:
        pass

    def train_loss(self) -> float | None:
        return None


def make_feed(cfg: RunConfig):
    return {"synthetic": SyntheticFeed, "toy": ToyFeed, "replay": ReplayFeed}[cfg.source.kind](cfg)


# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    config: RunConfig
    mode: str
    rows: list
    summary: dict
    train_loss: float | None = None
    minibatch_losses: list = field(default_factory=list)
    stops: list = field(default_factory=list)  # per layer
    csv_path: Path | None = None


def _iteration_phase(tags) -> str:
    kinds = {t.kind for t in tags}
    for k in (PhaseKind.COMPRESSED, PhaseKind.SAMPLE, PhaseKind.WARMUP):
        if k in kinds:
            return k.value
    return PhaseKind.WARMUP.value


def _open_ring(cfg: RunConfig):
    stats = LinkStats(cfg.nodes, bandwidth=cfg.network.bandwidth, latency=cfg.network.latency)
    if cfg.transport == "tcp":
        return TcpRing.local(cfg.nodes, stats=stats), "threaded"
    return InProcRing(cfg.nodes, stats=stats), cfg.scheduler


class Simulation:
    def __init__(self, cfg: RunConfig):
        if cfg.mode == "all":
            raise ConfigError("mode", "expand mode=all before building a simulation")
        self.cfg = cfg
        self.mode = cfg.mode
        self.feed = make_feed(cfg)
        self.layout = self.feed.layout
        self.schedule = cfg.to_schedule()
        try:
            self.plan = RingPlan.build(self.layout, cfg.layout.slice_size, cfg.nodes, cfg.layout.passthrough_chunk)
        except ValueError as exc:
            raise ConfigError("layout.slice_size", str(exc)) from None
        self.controllers = [make_controllers(self.plan.slices, self.layout, self.schedule, cfg.nodes)
                            for _ in range(cfg.nodes)]
        self.wire = np.dtype(cfg.codec.wire_dtype)
        self._last_compressed: tuple = ()

    # -- per iteration -------------------------------------------------------

    def _tags(self, t: int):
        if self.mode != "gvq":
            return [phase_of(t, self.schedule)] * len(self.layout.layers)
        per_node = [[c.phase(t) for c in ctrls] for ctrls in self.controllers]
        if any(p != per_node[0] for p in per_node[1:]):
            raise InvariantError(f"iteration {t}: nodes disagree on the phase")
        return per_node[0]

    def _select_mode(self, tags) -> Mode:
        if self.mode == "raw":
            return Mode.RAW
        if self.mode == "scalar":
            return Mode.SCALAR
        kinds = {t.kind for t in tags}
        if PhaseKind.COMPRESSED in kinds:
            return Mode.GVQ
        if PhaseKind.SAMPLE in kinds and self.cfg.codec.sample_quantization:
            return Mode.SCALAR
        return Mode.RAW

    def _tables(self, tags):
        compressed = tuple(l for l, tag in enumerate(tags) if tag.kind is PhaseKind.COMPRESSED)
        tables = []
        for ctrls in self.controllers:
            table = {}
            for l in compressed:
                table.update(ctrls[l].table)
            tables.append(table)
        return compressed, tables

    def _layer_metrics(self, tags, tables, agg, truth) -> list[LayerMetrics]:
        out = []
        table = tables[0] if tables else {}
        for li, tag in enumerate(tags):
            lo, hi = self.layout.layer_range(li)
            ids = [i for i, s in enumerate(self.plan.slices) if s.layer == li and s.compressible]
            used = [table[i] for i in ids if i in table]
            if used:
                d = sum(c.d for c in used) / len(used)
                ratio = sum(c.ratio for c in used) / len(used)
            else:
                d = float(self.plan.slices[ids[0]].length) if ids else float(hi - lo)
                ratio = 1.0
            out.append(LayerMetrics(tag.kind.value, relative_loss(agg[lo:hi], truth[lo:hi]), float(d), float(ratio)))
        return out

    def _drive_schedule(self, t, tags, grads, outputs, truth) -> None:
        sample_src = outputs if self.cfg.codec.pca_input == "dequantized" else [truth] * len(outputs)
        for li, tag in enumerate(tags):
            if tag.kind is PhaseKind.SAMPLE:
                for n, ctrls in enumerate(self.controllers):
                    ctrls[li].record_aggregate(t, sample_src[n])
            elif tag.kind is PhaseKind.COMPRESSED:
                # every node's relative local loss, gathered out of band
                reports = [self.controllers[n][li].relative_local_loss(grads[n]) for n in range(self.cfg.nodes)]
                fired = [ctrls[li].apply_stop(t, reports) for ctrls in self.controllers]
                if any(fired) and not all(fired):
                    raise InvariantError(f"iteration {t}: stop decision diverged on layer {li}")
                if fired[0]:
                    log.info("iteration %d: layer %d stops compression", t, li)

    def step(self, t: int, ring, scheduler: str) -> MetricsRecord:
        start = time.perf_counter()
        grads = self.feed.gradients(t)
        tags = self._tags(t)
        mode = self._select_mode(tags)
        tables = None
        check = False
        if mode is Mode.GVQ:
            compressed, tables = self._tables(tags)
            check = compressed != self._last_compressed
            self._last_compressed = compressed
            if check and len({table_digest(tb) for tb in tables}) != 1:
                raise InvariantError(f"iteration {t}: compressor tables diverged")
        else:
            self._last_compressed = ()
        result = run_iteration(grads, self.plan, mode, tables, iteration=t, ring=ring, scheduler=scheduler,
                               wire_dtype=self.wire, scalar_bits=self.cfg.codec.scalar_bits,
                               seed=self.cfg.seed, check_tables=check)
        outputs = result.outputs
        agg = outputs[0]
        if any(not np.array_equal(o, agg) for o in outputs[1:]):
            raise InvariantError(f"iteration {t}: nodes hold different aggregates")
        truth = np.sum(np.stack(grads), axis=0)
        layers = self._layer_metrics(tags, tables, agg, truth)
        if self.mode == "gvq":
            self._drive_schedule(t, tags, grads, outputs, truth)
        self.feed.update(t, outputs)
        sim = simulated_time(result, ring.stats, self.cfg.network.compute_rate)
        wall = time.perf_counter() - start if self.cfg.wall_clock else 0.0
        return MetricsRecord(t, _iteration_phase(tags), self.mode, list(result.bytes_sent), layers, sim, wall)

    def run(self, out_dir=None) -> RunResult:
        cfg = self.cfg
        store = None
        csv_path = None
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            csv_path = out / "metrics.csv"
            store = MetricsStore(csv_path)
            write_manifest(out / "manifest.json", {"config": cfg.to_dict(), "seed": cfg.seed,
                                                    "mode": self.mode, "columns": list(COLUMNS)})
        rows = []
        ring, scheduler = _open_ring(cfg)
        try:
            for t in range(cfg.iterations):
                try:
                    record = self.step(t, ring, scheduler)
                except ProtocolError as exc:
                    raise InvariantError(f"iteration {t}: {exc}") from exc
                if store is not None:
                    store.append(record)
                rows.extend(record.rows())
        finally:
            ring.close()
            if store is not None:
                store.close()
        summary = summarize(rows) if rows else {"iterations": 0, "modes": {}}
        loss = self.feed.train_loss()
        summary["train_loss"] = loss
        stops = [list(c.stops) for c in self.controllers[0]]
        summary["stops"] = stops
        if out_dir is not None:
            write_manifest(Path(out_dir) / "summary.json", summary)
        return RunResult(cfg, self.mode, rows, summary, loss, list(getattr(self.feed, "losses", [])),
                         stops, csv_path)


def simulate(cfg: RunConfig, out_dir=None) -> list[RunResult]:
    """Run every mode ``cfg`` expands to; with ``mode=all`` each gets its own subdirectory."""
    configs = expand_modes(cfg)
    results = []
    for sub in configs:
        target = None
        if out_dir is not None:
            target = Path(out_dir) / sub.mode if cfg.mode == "all" else Path(out_dir)
        results.append(Simulation(sub).run(target))
    return results

