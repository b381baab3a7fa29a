"""Joint moving-object detection and segmentation with a spatio-temporal transformer."""

from .autodiff import Tensor, grad_check
from .config import TrainConfig
from .data import SceneSpec, VideoSample, generate_sample
from .model import STMTL

__version__ = "0.1.0"

__all__ = ["Tensor", "grad_check", "TrainConfig", "SceneSpec", "VideoSample",
           "generate_sample", "STMTL", "__version__"]
