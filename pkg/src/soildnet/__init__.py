"""Lightweight soiling-degradation tile classifiers: grouped convolutions,
channel reordering, cost accounting and fixed-point simulation."""

from .errors import (
    AccumulatorOverflowError,
    DivisibilityError,
    LabelError,
    QuantizationError,
    ShapeError,
    SoildNetError,
    SpecError,
    StrideArithmeticError,
    TrainingDivergedError,
)

__version__ = "0.1.0"
