"""Online multi-head continual learning with saliency-guided patch replay."""

from .memory import memory_capacity
from .metrics import acc_metric, bwt_metric
from .packing import locate_salient_patch, patch_width
from .trainer import METHODS, MethodConfig, train_continual

__all__ = ["METHODS", "MethodConfig", "acc_metric", "bwt_metric", "locate_salient_patch", "memory_capacity",
           "patch_width", "train_continual"]
__version__ = "0.1.0"
