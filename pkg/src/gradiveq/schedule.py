"""Warm-up, PCA-sampling and compressed phases for each convolutional layer.

After ``warmup`` iterations, each cycle spends ``sample_iters`` iterations on
uncompressed aggregation (collecting PCA samples) and then ``compressed_iters``
iterations on compressed aggregation.  A stop event during a compressed phase
ends the cycle early and the next iteration starts a fresh sampling phase.
"""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .codec import local_energy, local_loss
from .layout import SliceSpec
from .pca import PCAError, SampleBuffer, build_compressor

INFINITE = math.inf


class ScheduleError(ValueError):
    pass


class PhaseKind(str, Enum):
    WARMUP = "WARMUP"
    SAMPLE = "SAMPLE"
    COMPRESSED = "COMPRESSED"


@dataclass(frozen=True)
class PhaseTag:
    kind: PhaseKind
    cycle: int
    offset: int = 0  # iterations since the start of this phase


@dataclass(frozen=True)
class Schedule:
    warmup: int = 2500
    sample_iters: int = 100
    compressed_iters: int = 400
    loss_threshold: float = 0.01
    reuse: float = INFINITE
    stop_threshold: float | None = None
    quorum: float = 0.5

    def __post_init__(self):
        if self.warmup < 0:
            raise ScheduleError("warmup must be >= 0")
        if self.sample_iters < 2:
            raise ScheduleError("sample_iters must be >= 2")
        if self.compressed_iters < 0:
            raise ScheduleError("compressed_iters must be >= 0")
        if not 0.0 <= self.loss_threshold < 1.0:
            raise ScheduleError("loss_threshold must satisfy 0 <= lambda < 1")
        if not (self.reuse == INFINITE or (int(self.reuse) == self.reuse and self.reuse >= 1)):
            raise ScheduleError("reuse must be a positive integer or infinite")
        if not 0.0 < self.quorum <= 1.0:
            raise ScheduleError("quorum must satisfy 0 < q <= 1")

    @property
    def cycle_length(self) -> int:
        return self.sample_iters + self.compressed_iters

    @property
    def stop_loss(self) -> float:
        return 10.0 * self.loss_threshold if self.stop_threshold is None else self.stop_threshold

    @property
    def compressed_fraction(self) -> float:
        return self.compressed_iters / self.cycle_length


def phase_of(t: int, schedule: Schedule, stops=()) -> PhaseTag:
    """Phase of iteration ``t`` given the iterations at which stop events fired."""
    if t < 0:
        raise ScheduleError("iteration must be >= 0")
    if t < schedule.warmup:
        return PhaseTag(PhaseKind.WARMUP, -1, t)
    L, Lt = schedule.cycle_length, schedule.sample_iters
    start, cycle = schedule.warmup, 0
    for e in sorted(stops):
        if e >= t:
            break
        if e < start:
            continue
        k = (e - start) // L
        start += k * L
        cycle += k
        if e - start >= Lt:
            start, cycle = e + 1, cycle + 1
    k = (t - start) // L
    offset = (t - start) - k * L
    if offset < Lt:
        return PhaseTag(PhaseKind.SAMPLE, cycle + k, offset)
    return PhaseTag(PhaseKind.COMPRESSED, cycle + k, offset - Lt)


def group_leads(layer_slices: list[SliceSpec], reuse) -> dict[int, int]:
    """Map each compressible slice position to the position of its group lead."""
    full = [i for i, s in enumerate(layer_slices) if s.compressible]
    if not full:
        return {}
    if reuse == INFINITE:
        return {i: full[0] for i in full}
    r = int(reuse)
    return {i: full[(j // r) * r] for j, i in enumerate(full)}


def assign_compressors(layer_slices: list[SliceSpec], slice_ids: list[int], reuse, leads: dict) -> dict:
    """Table ``slice id -> Compressor`` sharing each lead's compressor over its group.

    ``leads`` maps the lead's slice id to its compressor.  Degenerate lead
    compressors leave their group uncompressed.
    """
    table = {}
    for pos, lead_pos in group_leads(layer_slices, reuse).items():
        lead_id = slice_ids[lead_pos]
        if lead_id not in leads:
            raise ScheduleError(f"missing compressor for group lead slice {lead_id}")
        comp = leads[lead_id]
        if not comp.degenerate:
            table[slice_ids[pos]] = comp
    return table


def check_stop(relative_losses, schedule: Schedule) -> bool:
    """True iff strictly more than ``quorum * N`` nodes exceed the stop loss."""
    losses = np.asarray(relative_losses, dtype=np.float64)
    above = int(np.sum(losses > schedule.stop_loss))
    return above > schedule.quorum * losses.size


@dataclass
class LayerController:
    """Per-node, per-layer schedule state: sample buffers, compressors, stop history."""

    layer: int
    slices: list  # SliceSpec of this layer
    slice_ids: list  # global slice ids
    schedule: Schedule
    n_nodes: int
    stops: list = field(default_factory=list)
    version: int = 0
    table: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    _sample_cycle: int | None = None

    def __post_init__(self):
        leads = group_leads(self.slices, self.schedule.reuse)
        self.lead_ids = sorted({self.slice_ids[p] for p in leads.values()})

    def phase(self, t: int) -> PhaseTag:
        return phase_of(t, self.schedule, self.stops)

    def record_sample(self, t: int, slice_id: int, value) -> None:
        tag = self.phase(t)
        if tag.kind is not PhaseKind.SAMPLE:
            raise ScheduleError(f"layer {self.layer}: sample at t={t} during {tag.kind.value}")
        if tag.cycle != self._sample_cycle:
            self.buffers = {sid: SampleBuffer(sid) for sid in self.lead_ids}
            self.table = {}
            self._sample_cycle = tag.cycle
        if slice_id not in self.buffers:
            return  # non-lead slices are aggregated but not buffered
        self.buffers[slice_id].add(value)

    def record_aggregate(self, t: int, aggregated) -> bool:
        """Buffer lead slices of one aggregated flat vector; True if compressors were rebuilt."""
        for sid in self.lead_ids:
            spec = self.slices[self.slice_ids.index(sid)]
            self.record_sample(t, sid, aggregated[spec.start:spec.stop])
        tag = self.phase(t)
        last = tag.offset == self.schedule.sample_iters - 1
        if last and self.lead_ids and self.schedule.compressed_iters > 0:
            self.rebuild()
            return True
        return False

    def rebuild(self) -> None:
        self.version += 1
        leads = {}
        for sid, buf in self.buffers.items():
            if len(buf) < 2:
                raise PCAError(f"slice {sid}: {len(buf)} samples are too few for PCA")
            leads[sid] = build_compressor(buf, self.schedule.loss_threshold, version=self.version)
        self.table = assign_compressors(self.slices, self.slice_ids, self.schedule.reuse, leads)

    def relative_local_loss(self, grad) -> float:
        """Local loss over this layer's compressed slices, relative to ``||g - mu/N||^2``."""
        num = den = 0.0
        for sid, comp in self.table.items():
            spec = self.slices[self.slice_ids.index(sid)]
            x = grad[spec.start:spec.stop]
            num += local_loss(x, comp, self.n_nodes)
            den += local_energy(x, comp, self.n_nodes)
        if den == 0.0:
            return 0.0 if num == 0.0 else math.inf
        return num / den

    def apply_stop(self, t: int, reports) -> bool:
        if self.phase(t).kind is not PhaseKind.COMPRESSED:
            return False
        if check_stop(reports, self.schedule):
            bisect.insort(self.stops, t)
            return True
        return False


def make_controllers(plan_slices, layout, schedule: Schedule, n_nodes: int) -> list[LayerController]:
    out = []
    for li in range(len(layout.layers)):
        ids = [i for i, s in enumerate(plan_slices) if s.layer == li]
        out.append(LayerController(li, [plan_slices[i] for i in ids], ids, schedule, n_nodes))
    return out
