"""Bayesian U-Net segmentation toolkit: MC-dropout uncertainty,
segmentation-quality prediction, and pixel-level active learning."""

__version__ = "0.1.0"

from .core import (  # noqa: F401
    DatasetManifest,
    LabelMap,
    Slice2D,
    Volume3D,
    extract_slice,
    read_volume,
    write_volume,
)
from .model import BayesianSegmenter, UNetConfig, TrainConfig  # noqa: F401
