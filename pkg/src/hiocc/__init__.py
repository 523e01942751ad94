"""Hierarchical semantic occupancy toolkit.

Dual-resolution supervision for semantic scene completion: multi-class
affinity losses with analytic gradients, coarse-to-fine voxel
subdivision, a forward-only query-based decoder, SemanticKITTI-format
I/O, and SSC metrics, behind an HTTP service and a CLI.
"""

__version__ = "0.1.0"

from .voxel_grid import (
    FREE_CLASS,
    ClassHistogramGrid,
    GridSpec,
    SemanticGrid,
    SubdivisionMask,
    build_histogram_pyramid,
    generate_synthetic_scene,
    homogeneity_stats,
    majority_downsample,
    subdivision_mask,
)
from .losses import (
    LossResult,
    LossWeights,
    TotalLossReport,
    multiclass_scal,
    scal_onehot,
    smooth_l1,
    split_bce,
    total_loss,
    weighted_ce,
)
from .hss import (
    SelectionSet,
    entropy_scores,
    recombine_predictions,
    select_topk,
    subdivide_selected,
    subdivision_recall,
)
from .metrics import ConfusionMatrix, accumulate, ssc_metrics

__all__ = [
    "FREE_CLASS",
    "ClassHistogramGrid",
    "ConfusionMatrix",
    "GridSpec",
    "LossResult",
    "LossWeights",
    "SelectionSet",
    "SemanticGrid",
    "SubdivisionMask",
    "TotalLossReport",
    "accumulate",
    "build_histogram_pyramid",
    "entropy_scores",
    "generate_synthetic_scene",
    "homogeneity_stats",
    "majority_downsample",
    "multiclass_scal",
    "recombine_predictions",
    "scal_onehot",
    "select_topk",
    "smooth_l1",
    "split_bce",
    "ssc_metrics",
    "subdivide_selected",
    "subdivision_mask",
    "subdivision_recall",
    "total_loss",
    "weighted_ce",
]
