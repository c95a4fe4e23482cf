"""Background-aware point cloud object classification on synthetic scan data."""

from .autodiff import NumericError, Tensor, grad_check
from .core import AABB, ClassTable, FormatError, Manifest, ObjectInstance, ValidationError, VariantTag
from .harness import Metrics, TrainConfig, cross_evaluate, evaluate, export_report, train
from .models import BGAConfig, build_model, default_config, desk_config, joint_loss, tiny_config

__version__ = "0.1.0"
