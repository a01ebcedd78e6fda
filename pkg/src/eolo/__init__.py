"""EOLO: anchor-free instance segmentation head (targets, losses, decoding, evaluation)."""
from .core import BoundingBox, Box4D, Point, iou, read_gmap, write_gmap
from .decoder import DecodeConfig, Detection, InstanceResult, decode
from .encoder import InstanceAnnotation, KernelConfig, TargetSet, encode_targets
from .evaluation import EvalConfig, EvalResult, evaluate, format_table
from .losses import DivergenceError, LossConfig, fit_maps, total_loss

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "Box4D",
    "DecodeConfig",
    "Detection",
    "DivergenceError",
    "EvalConfig",
    "EvalResult",
    "InstanceAnnotation",
    "InstanceResult",
    "KernelConfig",
    "LossConfig",
    "Point",
    "TargetSet",
    "decode",
    "encode_targets",
    "evaluate",
    "fit_maps",
    "format_table",
    "iou",
    "read_gmap",
    "total_loss",
    "write_gmap",
]
