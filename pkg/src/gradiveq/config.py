"""Run configuration: a JSON document with one section per subsystem.

Every field has a default, so ``{}`` is a valid config.  Unknown keys and bad
values raise :class:`ConfigError` naming the offending field path, e.g.
``schedule.sample_iters``.
"""
from __future__ import annotations

import json
import math
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from .schedule import INFINITE, Schedule

MODES = ("raw", "gvq", "scalar", "all")
TRANSPORTS = ("inproc", "tcp")
SCHEDULERS = ("deterministic", "threaded")
SOURCES = ("synthetic", "toy", "replay")
PCA_INPUTS = ("dequantized", "raw")
WIRE_DTYPES = ("float32", "float64")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class SourceConfig:
    kind: str = "synthetic"
    layers: list = field(default_factory=lambda: [[3, 3, 4, 16], [3, 3, 8, 16]])
    passthrough: int = 0
    rank: int | list = 8
    noise: float = 1e-4
    drift: float = 0.0
    mean_scale: float = 1.0
    dump: str | None = None
    # toy model
    lr: float = 0.1
    batch: int = 16
    samples: int = 1200
    template_scale: float = 0.35
    image_noise: float = 1.0
    smoothness: float = 4.0
    label_noise: float = 0.1


@dataclass
class LayoutConfig:
    slice_size: int | list = 64
    passthrough_chunk: int = 256


@dataclass
class ScheduleConfig:
    warmup: int = 2500
    sample_iters: int = 100
    compressed_iters: int = 400
    loss_threshold: float = 0.01
    reuse: int | str = "inf"
    stop_threshold: float | None = None
    quorum: float = 0.5


@dataclass
class CodecConfig:
    wire_dtype: str = "float32"
    scalar_bits: int = 4
    sample_quantization: bool = True
    pca_input: str = "dequantized"


@dataclass
class NetworkConfig:
    bandwidth: float = 1.25e9  # bytes / second
    latency: float = 0.0
    compute_rate: float = 1e12  # flop / second, a multi-core node on dense products


@dataclass
class RunConfig:
    seed: int = 0
    nodes: int = 6
    mode: str = "gvq"
    transport: str = "inproc"
    scheduler: str = "deterministic"
    iterations: int = 3000
    scale: float = 1.0
    wall_clock: bool = False
    source: SourceConfig = field(default_factory=SourceConfig)
    layout: LayoutConfig = field(default_factory=LayoutConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def to_schedule(self) -> Schedule:
        s = self.schedule
        reuse = INFINITE if s.reuse in ("inf", "infinite", INFINITE) else int(s.reuse)
        return Schedule(warmup=int(round(s.warmup * self.scale)), sample_iters=s.sample_iters,
                        compressed_iters=s.compressed_iters, loss_threshold=s.loss_threshold,
                        reuse=reuse, stop_threshold=s.stop_threshold, quorum=s.quorum)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, **flat) -> "RunConfig":
        """Apply ``section.field=value`` style overrides (``None`` values skipped)."""
        data = self.to_dict()
        for key, value in flat.items():
            if value is None:
                continue
            target = data
            *head, last = key.split(".")
            for part in head:
                target = target[part]
            target[last] = value
        return from_dict(data)


def _check_type(path: str, value, annotation: str):
    ann = annotation.replace(" ", "")
    options = ann.split("|")
    if value is None:
        if "None" in options:
            return value
        raise ConfigError(path, "must not be null")
    for opt in options:
        if opt == "int" and isinstance(value, int) and not isinstance(value, bool):
            return value
        if opt == "float" and isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if opt == "str" and isinstance(value, str):
            return value
        if opt == "bool" and isinstance(value, bool):
            return value
        if opt == "list" and isinstance(value, list):
            return value
    raise ConfigError(path, f"expected {annotation}, got {type(value).__name__}")


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(path.rstrip(".") or "<root>", "expected an object")
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{path}{key}", "unknown field")
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        sub = f"{path}{name}"
        default = f.default_factory() if f.default_factory is not MISSING else f.default
        if is_dataclass(default):
            kwargs[name] = _build(type(default), data[name], sub + ".")
        else:
            kwargs[name] = _check_type(sub, data[name], str(f.type))
    return cls(**kwargs)


def _positive(path, value, strict=True):
    if (value <= 0) if strict else (value < 0):
        raise ConfigError(path, f"must be {'>' if strict else '>='} 0, got {value}")


def _choice(path, value, options):
    if value not in options:
        raise ConfigError(path, f"must be one of {', '.join(options)}; got {value!r}")


def validate(cfg: RunConfig) -> RunConfig:
    _positive("nodes", cfg.nodes)
    _positive("iterations", cfg.iterations, strict=False)
    _positive("scale", cfg.scale, strict=False)
    _choice("mode", cfg.mode, MODES)
    _choice("transport", cfg.transport, TRANSPORTS)
    _choice("scheduler", cfg.scheduler, SCHEDULERS)
    src = cfg.source
    _choice("source.kind", src.kind, SOURCES)
    if src.kind == "replay" and not src.dump:
        raise ConfigError("source.dump", "a replay source needs a dump path")
    if not src.layers:
        raise ConfigError("source.layers", "at least one convolutional layer is required")
    for i, shape in enumerate(src.layers):
        if (not isinstance(shape, list) or len(shape) != 4
                or not all(isinstance(x, int) and not isinstance(x, bool) and x > 0 for x in shape)):
            raise ConfigError(f"source.layers[{i}]", "expected four positive integers [H, W, D, F]")
    _positive("source.passthrough", src.passthrough, strict=False)
    ranks = src.rank if isinstance(src.rank, list) else [src.rank]
    for i, r in enumerate(ranks):
        if not isinstance(r, int) or r < 1:
            raise ConfigError(f"source.rank[{i}]" if isinstance(src.rank, list) else "source.rank",
                              "must be a positive integer")
    _positive("source.noise", src.noise, strict=False)
    _positive("source.drift", src.drift, strict=False)
    _positive("source.lr", src.lr, strict=False)
    _positive("source.batch", src.batch)
    _positive("source.samples", src.samples)
    _positive("source.smoothness", src.smoothness, strict=False)
    if not 0.0 <= src.label_noise <= 0.5:
        raise ConfigError("source.label_noise", "must be in [0, 0.5]")
    sizes = cfg.layout.slice_size if isinstance(cfg.layout.slice_size, list) else [cfg.layout.slice_size]
    for i, k in enumerate(sizes):
        if not isinstance(k, int) or k < 1:
            raise ConfigError("layout.slice_size", f"entry {i} must be a positive integer")
    _positive("layout.passthrough_chunk", cfg.layout.passthrough_chunk)
    reuse = cfg.schedule.reuse
    if isinstance(reuse, str):
        if reuse not in ("inf", "infinite"):
            raise ConfigError("schedule.reuse", f"must be a positive integer or \"inf\", got {reuse!r}")
    elif reuse < 1:
        raise ConfigError("schedule.reuse", "must be >= 1")
    try:
        cfg.to_schedule()
    except ValueError as exc:
        field_name = str(exc).split()[0]
        raise ConfigError(f"schedule.{field_name}", str(exc)) from None
    _choice("codec.wire_dtype", cfg.codec.wire_dtype, WIRE_DTYPES)
    _choice("codec.pca_input", cfg.codec.pca_input, PCA_INPUTS)
    if not 1 <= cfg.codec.scalar_bits <= 8:
        raise ConfigError("codec.scalar_bits", "must be in [1, 8]")
    _positive("network.bandwidth", cfg.network.bandwidth)
    _positive("network.latency", cfg.network.latency, strict=False)
    _positive("network.compute_rate", cfg.network.compute_rate)
    for name in ("bandwidth", "latency", "compute_rate"):
        if not math.isfinite(getattr(cfg.network, name)):
            raise ConfigError(f"network.{name}", "must be finite")
    return cfg


def from_dict(data: dict) -> RunConfig:
    return validate(_build(RunConfig, data, ""))


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return from_dict(data)


def expand_modes(cfg: RunConfig) -> list[RunConfig]:
    """``mode=all`` becomes one config per concrete mode, seeds untouched."""
    if cfg.mode != "all":
        return [cfg]
    return [replace(cfg, mode=m) for m in ("raw", "gvq", "scalar")]
