"""Privileged-information teacher/student training for a desk-scale detector."""

from .core import (
    Annotation,
    BoundingBox,
    Dataset,
    Detection,
    ImagePlane,
    ImageSample,
    box_area,
    clip_box,
    iou,
)
from .detector import DetectorConfig, DetectorModel, Embedding, RawPrediction
from .distill import DistillConfig, TrainLog
from .ingest import CocoManifest, DatasetError, parse_coco
from .metrics import EvalConfig, EvalReport
from .preprocess import TileSpec
from .synth import SynthConfig

__version__ = "0.1.0"

__all__ = [
    "Annotation",
    "BoundingBox",
    "CocoManifest",
    "Dataset",
    "DatasetError",
    "Detection",
    "DetectorConfig",
    "DetectorModel",
    "DistillConfig",
    "Embedding",
    "EvalConfig",
    "EvalReport",
    "ImagePlane",
    "ImageSample",
    "RawPrediction",
    "SynthConfig",
    "TileSpec",
    "TrainLog",
    "box_area",
    "clip_box",
    "iou",
    "parse_coco",
    "__version__",
]
