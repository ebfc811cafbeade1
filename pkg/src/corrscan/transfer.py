"""Correlation-to-flow conversion (kernel soft-argmax), sub-pixel keypoint
sampling, and the keypoint training loss.

Coordinate conventions: keypoints live in normalized [0, 1] image coordinates
as (x, y); flow-field entries are grid coordinates as (row, col). Cell (i, j)
has its center at x = (j + 0.5) / W, y = (i + 0.5) / H.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .pipeline import CorrelationMap
from .tensor import ShapeError, Tensor, softmax

TAU_TRAIN = 0.1
TAU_INFER = 0.05
DEFAULT_SIGMA = 5.0


@dataclass
class KeypointAnnotation:
    """Matched keypoints plus the extents used for PCK normalization."""

    pair_id: str
    source_kps: np.ndarray  # (M, 2) normalized (x, y)
    target_kps: np.ndarray  # (M, 2) normalized (x, y)
    bbox_wh: tuple[float, float]
    image_wh: tuple[float, float]
    category: str = ""

    def __post_init__(self):
        self.source_kps = np.asarray(self.source_kps, dtype=np.float64).reshape(-1, 2)
        self.target_kps = np.asarray(self.target_kps, dtype=np.float64).reshape(-1, 2)
        if self.source_kps.shape != self.target_kps.shape or self.source_kps.shape[0] < 1:
            raise ShapeError("KeypointAnnotation: keypoint counts differ or empty")
        for kps in (self.source_kps, self.target_kps):
            if kps.min() < 0.0 or kps.max() > 1.0:
                raise ValueError("KeypointAnnotation: normalized coordinates outside [0, 1]")


@dataclass
class FlowField:
    """Identity grid and transferred coordinates, both (H, W, 2) as (row, col)."""

    grid: np.ndarray
    transferred: Tensor

    @property
    def hw(self) -> tuple[int, int]:
        return self.grid.shape[0], self.grid.shape[1]


def identity_grid(h: int, w: int) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([rows, cols], axis=-1).astype(np.float64)


def gaussian_peak_weights(corr_flat: np.ndarray, h: int, w: int, sigma: float,
                          pinned_argmax: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-source-row Gaussian weights centered at the row argmax.

    Ties go to the lowest raster index (numpy argmax convention). Returns the
    (HW, HW) weight matrix and the argmax indices used.
    """
    argmax = pinned_argmax if pinned_argmax is not None else corr_flat.argmax(axis=1)
    if math.isinf(sigma):
        return np.ones_like(corr_flat), argmax
    pk, pl = np.divmod(argmax, w)
    # squared distance from every target cell (k, l) to the per-row peak
    kk, ll = np.divmod(np.arange(h * w), w)
    d2 = (kk[None, :] - pk[:, None]) ** 2 + (ll[None, :] - pl[:, None]) ** 2
    g = np.exp(-d2 / (2.0 * sigma * sigma))
    return g.astype(corr_flat.dtype), argmax


def normalize_with_kernel(
    corr: CorrelationMap,
    sigma: float = DEFAULT_SIGMA,
    pinned_argmax: np.ndarray | None = None,
) -> Tensor:
    """Gaussian-reweighted softmax over target positions for each source cell.

    For each (i, j) the logits are the refined correlations multiplied by a
    2D Gaussian centered at their argmax, promoting a unimodal distribution.
    sigma is in grid units; sigma = inf degenerates to a plain softmax.
    """
    if not sigma > 0:
        raise ValueError(f"normalize_with_kernel: sigma must be > 0, got {sigma}")
    t = corr.levels
    if t.data.ndim != 4:
        raise ShapeError("normalize_with_kernel: expected a refined (H, W, H, W) map")
    if not np.isfinite(t.data).all():
        raise ValueError("normalize_with_kernel: non-finite correlation entries")
    h, w = t.shape[0], t.shape[1]
    flat = t.reshape(h * w, h * w)
    g, _ = gaussian_peak_weights(flat.data, h, w, sigma, pinned_argmax)
    weighted = flat * Tensor(g)
    return softmax(weighted, axis=1).reshape(h, w, h, w)


def dense_flow(norm_corr: Tensor) -> FlowField:
    """Probability-weighted centroid of target coordinates per source cell."""
    if norm_corr.data.ndim != 4:
        raise ShapeError("dense_flow: expected (H, W, H, W)")
    h, w = norm_corr.shape[0], norm_corr.shape[1]
    rowsum = norm_corr.data.reshape(h * w, h * w).sum(axis=1)
    if np.abs(rowsum - 1.0).max() > 1e-4:
        raise ValueError("dense_flow: rows are not normalized to 1 (within 1e-4)")
    coords = identity_grid(h, w).reshape(h * w, 2)
    p_hat = (norm_corr.reshape(h * w, h * w) @ Tensor(coords, dtype=norm_corr.dtype)).reshape(h, w, 2)
    return FlowField(grid=identity_grid(h, w), transferred=p_hat)


def sampler_weights(k_s: np.ndarray, h: int, w: int, tau: float) -> np.ndarray:
    """Truncated-distance weights over grid cells for one normalized keypoint.

    Proportional to max(0, tau - distance to cell center), normalized to sum
    to one; if no cell center lies within tau the nearest cell gets weight 1.
    """
    x, y = float(k_s[0]), float(k_s[1])
    cx = (np.arange(w) + 0.5) / w
    cy = (np.arange(h) + 0.5) / h
    dist = np.sqrt((x - cx[None, :]) ** 2 + (y - cy[:, None]) ** 2)
    wgt = np.maximum(0.0, tau - dist)
    total = wgt.sum()
    if total <= 0.0:
        wgt = np.zeros((h, w))
        nearest = np.unravel_index(np.argmin(dist), dist.shape)
        wgt[nearest] = 1.0
        return wgt
    return wgt / total


def soft_sample_keypoints(flow: FlowField, k_s: np.ndarray, tau: float) -> Tensor:
    """Distance-weighted sample of the flow at each source keypoint.

    k_s is (M, 2) normalized (x, y); the result is (M, 2) transferred
    coordinates in grid units as (row, col).
    """
    if not tau > 0:
        raise ValueError(f"soft_sample_keypoints: tau must be > 0, got {tau}")
    k_s = np.asarray(k_s, dtype=np.float64).reshape(-1, 2)
    if k_s.shape[0] < 1:
        raise ShapeError("soft_sample_keypoints: empty keypoint list")
    h, w = flow.hw
    wmat = np.stack([sampler_weights(k, h, w, tau).reshape(-1) for k in k_s])
    p_flat = flow.transferred.reshape(h * w, 2)
    return Tensor(wmat, dtype=flow.transferred.dtype) @ p_flat


def grid_to_normalized(k_grid: np.ndarray, h: int, w: int) -> np.ndarray:
    """(row, col) grid coordinates -> normalized (x, y) cell-center coordinates."""
    k_grid = np.asarray(k_grid, dtype=np.float64).reshape(-1, 2)
    return np.stack([(k_grid[:, 1] + 0.5) / w, (k_grid[:, 0] + 0.5) / h], axis=1)


def normalized_to_grid(k_norm: np.ndarray, h: int, w: int) -> np.ndarray:
    """Normalized (x, y) -> (row, col) grid coordinates."""
    k_norm = np.asarray(k_norm, dtype=np.float64).reshape(-1, 2)
    return np.stack([k_norm[:, 1] * h - 0.5, k_norm[:, 0] * w - 0.5], axis=1)


def keypoint_loss(predicted: Tensor, ground_truth: np.ndarray, squared: bool = True) -> Tensor:
    """Mean (squared) Euclidean distance between predicted and true keypoints.

    The squared form is the default training objective; the unsquared form
    stays selectable for comparison runs.
    """
    gt = np.asarray(ground_truth, dtype=np.float64).reshape(-1, 2)
    if predicted.shape != gt.shape:
        raise ShapeError(
            f"keypoint_loss: {predicted.shape} predictions vs {gt.shape} ground truth"
        )
    diff = predicted - Tensor(gt, dtype=predicted.dtype)
    sq = (diff * diff).sum(axis=1)
    if not squared:
        sq = sq.sqrt()
    return sq.mean()
