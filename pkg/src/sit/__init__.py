"""Scale-interaction transformer for image-score regression, built on numpy."""

__version__ = "0.1.0"

from .backbone import FeatureMap, ImageTensor, SyntheticBackbone, load_feature_map, normalize_image, save_feature_map
from .metrics import MetricsReport, compute_metrics
from .model import SITModel, Variant, build_variant, sit_forward
from .model_io import load_model, save_model
from .train import TrainConfig, train

__all__ = [
    "FeatureMap", "ImageTensor", "MetricsReport", "SITModel", "SyntheticBackbone", "TrainConfig", "Variant",
    "build_variant", "compute_metrics", "load_feature_map", "load_model", "normalize_image",
    "save_feature_map", "save_model", "sit_forward", "train",
]
