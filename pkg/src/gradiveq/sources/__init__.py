"""Per-node gradient streams: synthetic low-rank, recorded dumps, and a toy CNN."""
from .dump import DumpFormatError, DumpReader, DumpWriter, replay_next, write_dump
from .synthetic import SyntheticSource, SyntheticSpec, synth_next
from .toy import ToyModel, ToyTask, apply_update, make_task, toy_forward_backward, toy_loss

__all__ = [
    "DumpFormatError", "DumpReader", "DumpWriter", "replay_next", "write_dump",
    "SyntheticSource", "SyntheticSpec", "synth_next",
    "ToyModel", "ToyTask", "apply_update", "make_task", "toy_forward_backward", "toy_loss",
]
