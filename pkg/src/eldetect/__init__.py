"""Two-stage defect detector for electroluminescence images of PV cells.

The package is self-contained on top of numpy: a small reverse-mode autodiff
core (:mod:`eldetect.tensor`), a strided convolutional backbone, a bidirectional attention
feature pyramid, an RPN + RoI box head, detection metrics, a synthetic data
generator and a command line front end.
"""

from .bafpn import ALL_VARIANTS, Variant
from .boxes import CLASSES, BBox, Detection
from .detector import Detector, DetectorConfig
from .train import TrainConfig, train

__all__ = [
    "ALL_VARIANTS",
    "BBox",
    "CLASSES",
    "Detection",
    "Detector",
    "DetectorConfig",
    "TrainConfig",
    "Variant",
    "train",
]
__version__ = "0.1.0"
