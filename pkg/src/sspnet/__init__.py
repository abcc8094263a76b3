"""Scale-selection pyramid (CAM + SEM + SSM) on a small numpy autodiff engine."""

from .anchors import AnchorKMeans, AnchorSpec, GtBox
from .config import ExperimentConfig, load_config
from .detector import SSPNetDetector
from .metrics import Detection, MetricReport, evaluate
from .tensor import Tensor, grad

__version__ = "0.1.0"

__all__ = [
    "AnchorKMeans", "AnchorSpec", "Detection", "ExperimentConfig", "GtBox", "MetricReport",
    "SSPNetDetector", "Tensor", "evaluate", "grad", "load_config", "__version__",
]
