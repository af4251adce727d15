"""Mean-field jump-diffusions with a common factor: simulation, fluctuation
statistics and Gaussian-mixture limit-law prediction."""

from ._accel import backend_name
from .model import MeasureView, ModelDerivatives, ModelSpec, SampleableMeasure, validate_model
from .noise import StreamKey
from .presets import build_preset

__version__ = "0.1.0"

__all__ = [
    "MeasureView", "ModelDerivatives", "ModelSpec", "SampleableMeasure", "StreamKey",
    "backend_name", "build_preset", "validate_model",
]
