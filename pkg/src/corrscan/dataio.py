"""On-disk formats: the .mmt binary tensor container, annotation JSON,
synthetic dataset generation, and checkpoint directories."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .tensor import ShapeError, Tensor
from .transfer import KeypointAnnotation

MAGIC = b"MMTN"
VERSION = 1
DTYPE_F32 = 1


class FormatError(ValueError):
    """The file is not a valid tensor container."""


class CorruptionError(ValueError):
    """Container header and payload disagree."""


class DataError(ValueError):
    """Annotation data is malformed or references missing files."""


def write_tensor(path: str | Path, t: Tensor | np.ndarray) -> None:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim < 1 or any(e == 0 for e in arr.shape):
        raise ShapeError("write_tensor: rank >= 1 and positive extents required")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<BBBB", VERSION, DTYPE_F32, arr.ndim, 0))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.tobytes())


def read_tensor(path: str | Path) -> Tensor:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, dtype, rank, reserved = struct.unpack("<BBBB", raw[4:8])
    if version != VERSION:
        raise FormatError(f"{path}: unknown version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"{path}: unknown dtype code {dtype}")
    if rank < 1:
        raise FormatError(f"{path}: rank must be >= 1")
    header_end = 8 + 8 * rank
    if len(raw) < header_end:
        raise CorruptionError(f"{path}: truncated extent table")
    extents = struct.unpack(f"<{rank}Q", raw[8:header_end])
    if any(e == 0 for e in extents):
        raise FormatError(f"{path}: zero extent")
    expected = 4 * int(np.prod(extents))
    payload = raw[header_end:]
    if len(payload) != expected:
        raise CorruptionError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(extents)
    return Tensor(data.copy())


# -- annotations ----------------------------------------------------------


def write_annotations(path: str | Path, pairs: list[dict]) -> None:
    with open(path, "w") as f:
        json.dump({"pairs": pairs}, f, indent=1, sort_keys=True)
        f.write("\n")


def load_annotations(path: str | Path, check_tensors: bool = True) -> list[dict]:
    """Parse the annotation JSON; validates keypoint counts and referenced files."""
    base = Path(path).parent
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON ({e})") from e
    pairs = doc.get("pairs")
    if not isinstance(pairs, list):
        raise DataError(f"{path}: missing 'pairs' list")
    for p in pairs:
        for key in ("pair_id", "source_features", "target_features",
                    "source_kps", "target_kps", "bbox_wh", "image_wh"):
            if key not in p:
                raise DataError(f"{path}: pair missing field '{key}'")
        if len(p["source_kps"]) != len(p["target_kps"]):
            raise DataError(f"{path}: pair {p['pair_id']}: keypoint counts differ")
        if check_tensors:
            for key in ("source_features", "target_features"):
                fp = base / p[key]
                if not fp.exists():
                    raise DataError(f"{path}: pair {p['pair_id']}: missing {fp}")
    return pairs


def annotation_from_pair(pair: dict) -> KeypointAnnotation:
    return KeypointAnnotation(
        pair_id=str(pair["pair_id"]),
        source_kps=np.asarray(pair["source_kps"], dtype=np.float64),
        target_kps=np.asarray(pair["target_kps"], dtype=np.float64),
        bbox_wh=tuple(pair["bbox_wh"]),
        image_wh=tuple(pair["image_wh"]),
        category=str(pair.get("category", "")),
    )


# -- synthetic data -------------------------------------------------------


def gen_synthetic(
    out_dir: str | Path,
    seed: int,
    h: int,
    w: int,
    c: int,
    levels: int,
    n_pairs: int,
    n_keypoints: int,
    max_translation: int = 2,
    keypoint_margin: int = 2,
    pixels_per_cell: int = 10,
) -> Path:
    """Write a deterministic synthetic dataset under out_dir.

    Each pair crops two views of a shared latent feature stack offset by a
    random integer translation, so ground-truth correspondence is exact by
    construction: source cell (i, j) matches target cell (i+ty, j+tx).
    Features are strictly positive so ReLU stages cannot zero a vector.
    Keypoints are sampled on-grid, `keypoint_margin` cells away from borders.
    """
    if h < 2 * (max_translation + keypoint_margin) + 1 or w < 2 * (max_translation + keypoint_margin) + 1:
        raise ValueError("gen_synthetic: extents too small for the translation range")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    pairs = []
    for idx in range(n_pairs):
        pair_id = f"pair{idx:04d}"
        m = max_translation
        latent = np.abs(rng.standard_normal((levels, c, h + 2 * m, w + 2 * m))) + 0.1
        ty, tx = (int(v) for v in rng.integers(-m, m + 1, size=2))
        source = latent[:, :, m : m + h, m : m + w]
        target = latent[:, :, m - ty : m - ty + h, m - tx : m - tx + w]

        lo = keypoint_margin
        rows = rng.integers(max(lo, lo - ty), min(h - lo, h - lo - ty), size=n_keypoints)
        cols = rng.integers(max(lo, lo - tx), min(w - lo, w - lo - tx), size=n_keypoints)
        src_kps = [[(j + 0.5) / w, (i + 0.5) / h] for i, j in zip(rows, cols)]
        tgt_kps = [[(j + tx + 0.5) / w, (i + ty + 0.5) / h] for i, j in zip(rows, cols)]

        src_file = f"{pair_id}_src.mmt"
        tgt_file = f"{pair_id}_tgt.mmt"
        write_tensor(out_dir / src_file, source.astype(np.float32))
        write_tensor(out_dir / tgt_file, target.astype(np.float32))
        pairs.append(
            {
                "pair_id": pair_id,
                "source_features": src_file,
                "target_features": tgt_file,
                "source_kps": src_kps,
                "target_kps": tgt_kps,
                "translation": [ty, tx],
                "bbox_wh": [int(0.75 * w * pixels_per_cell), int(0.75 * h * pixels_per_cell)],
                "image_wh": [w * pixels_per_cell, h * pixels_per_cell],
                "category": "synthetic",
            }
        )
    write_annotations(out_dir / "annotations.json", pairs)
    return out_dir / "annotations.json"


# -- checkpoints ----------------------------------------------------------


def save_checkpoint(ckpt_dir: str | Path, tensors: dict[str, np.ndarray], extra: dict | None = None) -> None:
    """One .mmt file per named tensor plus a manifest listing them."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"tensors": {}, "extra": extra or {}}
    for name, arr in tensors.items():
        fname = name.replace("/", "_") + ".mmt"
        write_tensor(ckpt_dir / fname, np.asarray(arr))
        manifest["tensors"][name] = fname
    with open(ckpt_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def load_checkpoint(ckpt_dir: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    ckpt_dir = Path(ckpt_dir)
    with open(ckpt_dir / "manifest.json") as f:
        manifest = json.load(f)
    tensors = {
        name: read_tensor(ckpt_dir / fname).data
        for name, fname in manifest["tensors"].items()
    }
    return tensors, manifest.get("extra", {})
