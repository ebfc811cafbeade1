"""Percentage of Correct Keypoints in both reporting conventions."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class EvalRecord:
    """One image pair: per-keypoint pixel errors and their PCK normalizers."""

    errors: np.ndarray
    normalizers: np.ndarray
    pair_id: str = ""
    category: str = ""

    def __post_init__(self):
        self.errors = np.asarray(self.errors, dtype=np.float64).reshape(-1)
        norm = np.asarray(self.normalizers, dtype=np.float64)
        if norm.ndim == 0:
            norm = np.full_like(self.errors, float(norm))
        self.normalizers = norm.reshape(-1)
        if self.errors.shape != self.normalizers.shape or self.errors.size < 1:
            raise ValueError("EvalRecord: errors/normalizers length mismatch or empty")
        if (self.errors < 0).any():
            raise ValueError("EvalRecord: negative error")
        if (self.normalizers <= 0).any():
            raise ValueError("EvalRecord: normalizer must be positive")


def pck(records: list[EvalRecord], alpha: float, mode: str = "per-image") -> float:
    """A keypoint is correct when error <= alpha * max(w, h), inclusive.

    per-image averages within-pair fractions over pairs; per-point pools all
    keypoints.
    """
    if not records:
        raise ValueError("pck: empty record list")
    if not alpha > 0:
        raise ValueError(f"pck: alpha must be > 0, got {alpha}")
    if mode == "per-image":
        fracs = [
            float((r.errors <= alpha * r.normalizers).mean()) for r in records
        ]
        return float(np.mean(fracs))
    if mode == "per-point":
        correct = sum(int((r.errors <= alpha * r.normalizers).sum()) for r in records)
        total = sum(r.errors.size for r in records)
        return correct / total
    raise ValueError(f"pck: unknown mode {mode!r}")


def write_pck_table(
    path: str | Path,
    records: list[EvalRecord],
    alphas: list[float],
    modes: tuple[str, ...] = ("per-image", "per-point"),
    normalizer_kind: str = "image",
) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["alpha", "mode", "normalizer", "pck"])
        for alpha in alphas:
            for mode in modes:
                writer.writerow(
                    [alpha, mode, normalizer_kind, f"{pck(records, alpha, mode):.6f}"]
                )
