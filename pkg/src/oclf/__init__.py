"""Occlusion-aware fake face detection from facial patches and Gram-matrix texture features."""

from .errors import OclfError
from .facepatch import FaceLandmarks, ImageSample, OcclusionMask, PatchMode, PatchName, PatchSet
from .fusion import EarlyExit, FusionResult, Models, PatchWeights, Path3, PipelineConfig, majority_vote, run_pipeline
from .gramnet import GramNet, GramNetConfig, HeadKind, build_gramnet, build_head, gram_matrix, preset
from .labels import BinaryLabel
from .metrics import ConfusionMatrix, MetricsReport, evaluate_labels, metrics_from_confusion

__version__ = "0.1.0"

__all__ = [
    "BinaryLabel",
    "ConfusionMatrix",
    "EarlyExit",
    "FaceLandmarks",
    "FusionResult",
    "GramNet",
    "GramNetConfig",
    "HeadKind",
    "ImageSample",
    "MetricsReport",
    "Models",
    "OcclusionMask",
    "OclfError",
    "PatchMode",
    "PatchName",
    "PatchSet",
    "PatchWeights",
    "Path3",
    "PipelineConfig",
    "build_gramnet",
    "build_head",
    "evaluate_labels",
    "gram_matrix",
    "majority_vote",
    "metrics_from_confusion",
    "preset",
    "run_pipeline",
]
