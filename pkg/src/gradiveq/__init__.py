"""Linear vector quantization of CNN gradients with compressed-domain ring all-reduce."""
from .codec import CompressedSlice, aggregate, compress, decompress, local_loss, relative_loss
from .layout import FlatLayout, LayerShape, flatten, make_segments, make_slices, unflatten
from .pca import Compressor, SampleBuffer, build_compressor, select_dimension
from .rar import Mode, RingPlan, run_iteration
from .schedule import INFINITE, PhaseKind, Schedule, phase_of

__version__ = "0.1.0"

__all__ = [
    "CompressedSlice", "aggregate", "compress", "decompress", "local_loss", "relative_loss",
    "FlatLayout", "LayerShape", "flatten", "make_segments", "make_slices", "unflatten",
    "Compressor", "SampleBuffer", "build_compressor", "select_dimension",
    "Mode", "RingPlan", "run_iteration",
    "INFINITE", "PhaseKind", "Schedule", "phase_of",
]
