"""Correlation pathway: feature aggregation, multi-level cosine correlation,
and the similarity-sorted selective scan that refines it."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ssm import DEFAULT_CHUNK, SsmParams, mamba_block_forward
from .tensor import (
    Permutation,
    ShapeError,
    Tensor,
    argsort_desc_stable,
    conv2d,
    l2_normalize,
    linear,
    relu,
    take_rows,
)


@dataclass
class FeatureSet:
    """Per-image stack of feature maps, (levels, C, H, W)."""

    levels: Tensor
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.levels.data.ndim != 4:
            raise ShapeError("FeatureSet.levels must be (levels, C, H, W)")
        if not np.isfinite(self.levels.data).all():
            raise ValueError("FeatureSet: non-finite feature entries")


@dataclass
class CorrelationMap:
    """Multi-level (levels, H, W, H, W) or refined single-level (H, W, H, W) volume."""

    levels: Tensor

    def __post_init__(self):
        if self.levels.data.ndim not in (4, 5):
            raise ShapeError("CorrelationMap.levels must be rank 4 or 5")


def feature_aggregate(
    features: FeatureSet, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor
) -> FeatureSet:
    """Two 3x3 convolutions with ReLU after each, shared across all levels."""
    out = relu(conv2d(relu(conv2d(features.levels, w1, b1)), w2, b2))
    return FeatureSet(levels=out, meta=dict(features.meta))


def correlation_map(f_s: Tensor, f_t: Tensor) -> Tensor:
    """Cosine similarity between every source and target position.

    Inputs are (C, H, W); output is (H, W, H, W). Zero-norm feature vectors
    produce all-zero rows/columns via the l2_normalize guard.
    """
    if f_s.shape != f_t.shape or f_s.data.ndim != 3:
        raise ShapeError("correlation_map: inputs must be matching (C, H, W)")
    c, h, w = f_s.shape
    s = l2_normalize(f_s.reshape(c, h * w).transpose(), axis=1)
    t = l2_normalize(f_t.reshape(c, h * w).transpose(), axis=1)
    return (s @ t.transpose()).reshape(h, w, h, w)


def build_multilevel(f_s: FeatureSet, f_t: FeatureSet) -> CorrelationMap:
    """Stack per-level cosine correlation maps into (levels, H, W, H, W)."""
    if f_s.levels.shape != f_t.levels.shape:
        raise ShapeError("build_multilevel: level stacks must have equal shape")
    nl, c, h, w = f_s.levels.shape
    s = l2_normalize(f_s.levels.reshape(nl, c, h * w).transpose(0, 2, 1), axis=2)
    t = l2_normalize(f_t.levels.reshape(nl, c, h * w).transpose(0, 2, 1), axis=2)
    # per-level (HW, C) @ (C, HW); batch the level axis through a single matmul
    # by block-diagonal reshaping: do it level by level to keep memory flat.
    rows = []
    for l in range(nl):
        sl = s.narrow(0, l, 1).reshape(h * w, c)
        tl = t.narrow(0, l, 1).reshape(h * w, c)
        rows.append((sl @ tl.transpose()).reshape(1, h, w, h, w))
    out = rows[0]
    for r in rows[1:]:
        out = _concat0(out, r)
    return CorrelationMap(levels=out)


def _concat0(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along axis 0."""
    na = a.shape[0]
    out = np.concatenate([a.data, b.data], axis=0)

    def bwd(g):
        return g[:na], g[na:]

    return Tensor._from_op(out, (a, b), bwd)


def flatten_to_sequence(corr: CorrelationMap) -> Tensor:
    """(levels, H, W, H, W) -> (H*W*H*W, levels), raster order with the last
    target axis fastest."""
    nl = corr.levels.shape[0]
    n = int(np.prod(corr.levels.shape[1:]))
    return corr.levels.reshape(nl, n).transpose()


def sort_permutation(corr: CorrelationMap, descending: bool = True) -> Permutation:
    """Stable sort order of the flattened sequence by the final level's scores."""
    scores = corr.levels.data[-1].reshape(-1)
    if descending:
        return argsort_desc_stable(scores)
    return argsort_desc_stable(-np.asarray(scores, dtype=np.float64))


def similarity_aware_scan(
    corr: CorrelationMap,
    params: SsmParams,
    scan_impl: str = "parallel",
    chunk: int = DEFAULT_CHUNK,
    descending: bool = True,
    pinned_perm: Permutation | None = None,
) -> Tensor:
    """Scan the flattened correlation sequence in sorted score order.

    The sequence is sorted by the final level's similarity scores (stable,
    ties by raster index), run through the scan block, then unsorted so that
    output position i realigns with input position i. `pinned_perm` lets a
    caller freeze the sort order, matching the convention that the
    permutation is a constant under differentiation.
    """
    nl = corr.levels.shape[0]
    if nl != params.d_model:
        raise ShapeError(
            f"similarity_aware_scan: {nl} levels but scan block d_model={params.d_model}"
        )
    seq = flatten_to_sequence(corr)
    perm = pinned_perm if pinned_perm is not None else sort_permutation(corr, descending)
    sorted_seq = take_rows(seq, perm.indices)
    scanned = mamba_block_forward(sorted_seq, params, scan_impl=scan_impl, chunk=chunk)
    return take_rows(scanned, perm.inverse().indices)


def refine_project(seq: Tensor, w_proj: Tensor, b_proj: Tensor, h: int, w: int) -> CorrelationMap:
    """Per-position linear map levels -> 1, reshaped to (H, W, H, W)."""
    n = seq.shape[0]
    if n != h * w * h * w:
        raise ShapeError(f"refine_project: sequence length {n} != (H*W)^2 = {(h * w) ** 2}")
    out = linear(seq, w_proj, b_proj)
    return CorrelationMap(levels=out.reshape(h, w, h, w))
