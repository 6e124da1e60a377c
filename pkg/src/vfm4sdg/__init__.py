"""Relational prior distillation, prototype-guided query enhancement, and
the detection-quality metrics used to study them, over dumped tensors."""

from .config import RunConfig
from .distill import (
    FeaturePyramid,
    RelationMatrix,
    TeacherFeature,
    align_resolution,
    combine_losses,
    csrpd_loss,
    flatten_pyramid,
    reconstruct_pyramid,
    relation_matrix,
)
from .enhance import (
    EnhancerParams,
    QuerySet,
    cross_attention,
    csga,
    init_enhancer_params,
    scpqe,
    siga,
)
from .errors import VfmError
from .io import (
    AnnotationSet,
    BoxAnnotation,
    Detection,
    parse_annotations,
    parse_detections,
    read_tensor,
    write_tensor,
)
from .metrics import ErrorReport, ap50, domain_sweep, error_taxonomy, evaluate_detections, iou
from .prototypes import PrototypeBank, build_bank, load_bank, pool_box_feature, save_bank
from .tensor import Tensor, backward, grad_check

__version__ = "0.1.0"

__all__ = [
    "AnnotationSet",
    "BoxAnnotation",
    "Detection",
    "EnhancerParams",
    "ErrorReport",
    "FeaturePyramid",
    "PrototypeBank",
    "QuerySet",
    "RelationMatrix",
    "RunConfig",
    "TeacherFeature",
    "Tensor",
    "VfmError",
    "align_resolution",
    "ap50",
    "backward",
    "build_bank",
    "combine_losses",
    "cross_attention",
    "csga",
    "csrpd_loss",
    "domain_sweep",
    "error_taxonomy",
    "evaluate_detections",
    "flatten_pyramid",
    "grad_check",
    "init_enhancer_params",
    "iou",
    "load_bank",
    "parse_annotations",
    "parse_detections",
    "pool_box_feature",
    "read_tensor",
    "reconstruct_pyramid",
    "relation_matrix",
    "save_bank",
    "scpqe",
    "siga",
    "write_tensor",
]
