"""
Error hierarchy for enerf.

Errors that report a bad argument also subclass ValueError so callers that
only know the standard library still catch them.
"""

from pathlib import Path
from typing import Optional


class EnerfError(Exception):
    """Base class for all enerf errors."""


class ShapeError(EnerfError, ValueError):
    """Operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class GraphError(EnerfError):
    """Invalid use of the computation graph."""


class OptimizerError(EnerfError):
    """Optimizer step cannot proceed."""


class CheckpointError(EnerfError):
    """Checkpoint file is unreadable or does not match the model."""


class GeometryError(EnerfError, ValueError):
    """Invalid ray, pose or sampling parameters."""


class EncodingError(EnerfError, ValueError):
    """Input outside an encoder's domain."""


class FieldError(EnerfError, ValueError):
    """Invalid field configuration or query."""


class RenderError(EnerfError, ValueError):
    """Invalid inputs to volume rendering."""


class LossError(EnerfError, ValueError):
    """Invalid inputs to a loss or metric."""


class DatasetError(EnerfError):
    """Dataset could not be read or written."""


class DatasetNotFoundError(DatasetError, FileNotFoundError):
    """A dataset directory, manifest or image file is missing."""


class ManifestParseError(DatasetError, ValueError):
    """Manifest line could not be parsed."""

    def __init__(self, path: Path, line_number: int, message: str):
        self.path = path
        self.line_number = line_number
        super().__init__(f"{path}:{line_number}: {message}")


class ResolutionMismatchError(DatasetError, ValueError):
    """An image does not match the resolution declared in the manifest."""


class TrainingDivergedError(EnerfError):
    """Loss became non-finite during training."""

    def __init__(self, step: int, dump_path: Optional[Path] = None):
        self.step = step
        self.dump_path = dump_path
        where = f"; batch dumped to {dump_path}" if dump_path else ""
        super().__init__(f"Non-finite loss at step {step}{where}")
