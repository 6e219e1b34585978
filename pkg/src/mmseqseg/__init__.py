"""Multi-modal slice-sequence segmentation engine.

A self-contained CPU implementation of a 3D biomedical segmentation
pipeline: per-modality encoders, cross-modality convolution,
convolutional LSTM over depth slices, a multiplicative multi-resolution
decoder, two-phase class-balanced training, and volumetric metrics.
"""

from .network import ModelConfig, ModelParams, forward, init_params, predict_volume
from .tensor import NumericalError, ShapeError, Tensor

__all__ = [
    "ModelConfig",
    "ModelParams",
    "NumericalError",
    "ShapeError",
    "Tensor",
    "forward",
    "init_params",
    "predict_volume",
]

__version__ = "0.1.0"
