"""Morphable-model face reconstruction from images by analysis-by-synthesis,
with confidence-weighted multi-image identity aggregation."""

from .face_model import CoefficientVector, MorphableModel, load_model, save_model, synthesize_toy_model
from .losses import LossWeights, MULTI_IMAGE_WEIGHTS, Observation
from .scene import Camera

__version__ = "0.1.0"

__all__ = ["Camera", "CoefficientVector", "LossWeights", "MULTI_IMAGE_WEIGHTS", "MorphableModel",
           "Observation", "load_model", "save_model", "synthesize_toy_model"]
