"""Correlation-scan correspondence pipeline.

From-scratch selective state-space scan over similarity-sorted 4D correlation
sequences, differentiable keypoint transfer, PCK evaluation, and theoretical
FLOPs accounting, on a small reverse-mode autodiff core.
"""
from .metrics import EvalRecord, pck, write_pck_table
from .pipeline import (
    CorrelationMap,
    FeatureSet,
    build_multilevel,
    correlation_map,
    feature_aggregate,
    flatten_to_sequence,
    refine_project,
    similarity_aware_scan,
    sort_permutation,
)
from .ssm import (
    ScanElement,
    SsmParams,
    init_ssm_params,
    mamba_block_forward,
    scan_parallel,
    scan_sequential,
    selective_scan,
    zoh_discretize,
)
from .tensor import Permutation, ShapeError, Tensor, no_grad
from .train import (
    TrainableBundle,
    evaluate_pairs,
    grad_check,
    init_bundle,
    make_toy_instance,
    pair_forward,
    train_loop,
)
from .transfer import (
    FlowField,
    KeypointAnnotation,
    dense_flow,
    keypoint_loss,
    normalize_with_kernel,
    soft_sample_keypoints,
)

__version__ = "0.1.0"
