"""Per-iteration measurements persisted as CSV plus a JSON run manifest.

Each iteration produces one row per node (``layer`` empty; bytes and simulated
time) and one row per convolutional layer (``node`` empty; loss, d, ratio).
Floats are written with ``repr`` so a CSV round trip is exact.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

COLUMNS = ("iteration", "phase", "mode", "node", "bytes_sent", "layer", "rel_loss", "d", "ratio",
           "sim_agg_s", "wall_s")


class MetricsError(RuntimeError):
    pass


@dataclass(frozen=True)
class MetricsRow:
    iteration: int
    phase: str
    mode: str
    node: int | None = None
    bytes_sent: int | None = None
    layer: int | None = None
    rel_loss: float | None = None
    d: float | None = None
    ratio: float | None = None
    sim_agg_s: float | None = None
    wall_s: float | None = None

    def to_csv(self) -> list[str]:
        return ["" if v is None else (repr(v) if isinstance(v, float) else str(v))
                for v in (getattr(self, c) for c in COLUMNS)]

    @classmethod
    def from_csv(cls, rec: dict) -> "MetricsRow":
        def opt(key, cast):
            v = rec[key]
            return None if v == "" else cast(v)

        return cls(int(rec["iteration"]), rec["phase"], rec["mode"], opt("node", int),
                   opt("bytes_sent", int), opt("layer", int), opt("rel_loss", float), opt("d", float),
                   opt("ratio", float), opt("sim_agg_s", float), opt("wall_s", float))


@dataclass
class LayerMetrics:
    phase: str
    rel_loss: float
    d: float
    ratio: float


@dataclass
class MetricsRecord:
    iteration: int
    phase: str
    mode: str
    bytes_sent: list
    layers: list = field(default_factory=list)  # LayerMetrics per conv layer
    sim_agg_s: float = 0.0
    wall_s: float = 0.0

    def __post_init__(self):
        values = list(self.bytes_sent) + [self.sim_agg_s, self.wall_s]
        values += [x for l in self.layers for x in (l.d, l.ratio)]
        if any(v < 0 for v in values):
            raise MetricsError(f"iteration {self.iteration}: negative metric")

    def rows(self) -> list[MetricsRow]:
        out = [MetricsRow(self.iteration, self.phase, self.mode, node=n, bytes_sent=int(b),
                          sim_agg_s=float(self.sim_agg_s), wall_s=float(self.wall_s))
               for n, b in enumerate(self.bytes_sent)]
        out += [MetricsRow(self.iteration, l.phase, self.mode, layer=i, rel_loss=float(l.rel_loss),
                           d=float(l.d), ratio=float(l.ratio))
                for i, l in enumerate(self.layers)]
        return out


class MetricsStore:
    """Single-writer CSV sink; every ``append`` is flushed."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(COLUMNS)
        self.rows: list[MetricsRow] = []
        self._last_iteration = None

    def append(self, record: MetricsRecord) -> None:
        if self._last_iteration is not None and record.iteration <= self._last_iteration:
            raise MetricsError(f"iteration {record.iteration} appended after {self._last_iteration}")
        rows = record.rows()
        try:
            self._writer.writerows(r.to_csv() for r in rows)
            self._fh.flush()
        except OSError as exc:
            raise MetricsError(f"writing {self.path}: {exc}") from exc
        self.rows.extend(rows)
        self._last_iteration = record.iteration

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_rows(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != COLUMNS:
            raise MetricsError(f"{path}: unexpected header {reader.fieldnames}")
        return [MetricsRow.from_csv(r) for r in reader]


def _quantile(values: list[float], q: float) -> float:
    xs = sorted(values)
    if not xs:
        return math.nan
    pos = q * (len(xs) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (xs[hi] - xs[lo]) * (pos - lo)


def _mean(values: list[float]) -> float:
    return sum(values) / len(values) if values else math.nan


def summarize(rows: list[MetricsRow]) -> dict:
    """Deterministic aggregates over one or more runs' rows."""
    if not rows:
        raise MetricsError("cannot summarize an empty run")
    node_rows = [r for r in rows if r.node is not None]
    layer_rows = [r for r in rows if r.layer is not None]
    modes = sorted({r.mode for r in rows})
    out: dict = {"iterations": len({(r.mode, r.iteration) for r in rows}), "modes": {}}
    for mode in modes:
        nr = [r for r in node_rows if r.mode == mode]
        lr = [r for r in layer_rows if r.mode == mode]
        per_iter_bytes: dict = {}
        per_iter_time: dict = {}
        for r in nr:
            key = (r.phase, r.iteration)
            per_iter_bytes[key] = per_iter_bytes.get(key, 0) + r.bytes_sent
            per_iter_time[key] = r.sim_agg_s
        phases = sorted({p for p, _ in per_iter_bytes})
        compressed = [r.ratio for r in lr if r.phase == "COMPRESSED"]
        losses = [r.rel_loss for r in lr if r.rel_loss is not None and math.isfinite(r.rel_loss)]
        out["modes"][mode] = {
            "total_bytes": sum(r.bytes_sent for r in nr),
            "mean_ratio_compressed": _mean(compressed),
            "mean_d_compressed": _mean([r.d for r in lr if r.phase == "COMPRESSED"]),
            "mean_bytes_per_iteration": {
                p: _mean([b for (ph, _), b in per_iter_bytes.items() if ph == p]) for p in phases},
            "mean_sim_agg_s": {
                p: _mean([s for (ph, _), s in per_iter_time.items() if ph == p]) for p in phases},
            "total_sim_agg_s": sum(per_iter_time.values()),
            "loss_quantiles": {"p50": _quantile(losses, 0.5), "p90": _quantile(losses, 0.9),
                               "max": max(losses) if losses else math.nan},
        }
    return out


def _finite_or_null(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite_or_null(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite_or_null(v) for v in obj]
    return obj


def write_manifest(path, manifest: dict) -> None:
    """JSON with NaN and infinities written as null so strict parsers accept it."""
    text = json.dumps(_finite_or_null(manifest), indent=2, sort_keys=True, default=str, allow_nan=False)
    Path(path).write_text(text + "\n")


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())
