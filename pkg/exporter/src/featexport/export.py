"""Extract token and value facet features from a ViT-B/14 backbone.

For each requested transformer block the exporter captures two facets:

- ``token``: the block's output embeddings, taken before the model's final
  layer norm (the hidden-states sequence of the backbone).
- ``value``: the output of that block's attention value projection.

Levels are emitted layer-then-facet (block 4 token, block 4 value, block 5
token, ...) into a single (2L, C, H, W) float32 .mmt tensor with H = W =
image_size / patch_size, plus a JSON sidecar recording the exact settings
so the ordering contract survives the round trip.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from transformers import Dinov2Config, Dinov2Model

from .mmt import write_tensor

PATCH_SIZE = 14
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
DEFAULT_BACKBONE = "facebook/dinov2-base"
RANDOM_BACKBONE = "random-vit-b14"
FACETS = ("token", "value")


@dataclass
class ExportManifest:
    image: str
    out: str
    image_size: int = 420
    layer_start: int = 4
    layer_end: int = 11
    facets: tuple[str, ...] = FACETS
    backbone: str = DEFAULT_BACKBONE
    seed: int = 0

    def __post_init__(self):
        if self.image_size % PATCH_SIZE != 0:
            raise ValueError(
                f"image_size {self.image_size} is not a multiple of {PATCH_SIZE}"
            )
        if not 0 <= self.layer_start <= self.layer_end:
            raise ValueError(
                f"bad layer range {self.layer_start}-{self.layer_end}"
            )
        bad = [f for f in self.facets if f not in FACETS]
        if bad or not self.facets:
            raise ValueError(f"unknown facets {bad}; choose from {FACETS}")

    @property
    def layers(self) -> list[int]:
        """Zero-based block indices, inclusive range."""
        return list(range(self.layer_start, self.layer_end + 1))

    @property
    def n_levels(self) -> int:
        return len(self.layers) * len(self.facets)

    @property
    def grid(self) -> int:
        return self.image_size // PATCH_SIZE


def load_backbone(identifier: str, seed: int = 0) -> Dinov2Model:
    """Pretrained weights when the identifier resolves, otherwise a seeded
    random ViT-B/14 for the sentinel identifier ``random-vit-b14``."""
    if identifier == RANDOM_BACKBONE:
        torch.manual_seed(seed)
        model = Dinov2Model(Dinov2Config())
    else:
        model = Dinov2Model.from_pretrained(identifier)
    model.eval()
    return model


def preprocess(path: str | Path, image_size: int) -> torch.Tensor:
    """RGB decode, plain resize to a square (no aspect preservation),
    standard channel normalization; returns (1, 3, S, S) float32."""
    with Image.open(path) as im:
        im = im.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
    x = np.asarray(im, dtype=np.float32) / 255.0
    x = (x - np.asarray(IMAGENET_MEAN, dtype=np.float32)) / np.asarray(
        IMAGENET_STD, dtype=np.float32
    )
    return torch.from_numpy(x.transpose(2, 0, 1)).unsqueeze(0)


def _capture_values(model: Dinov2Model, layers: list[int]):
    captured: dict[int, torch.Tensor] = {}
    handles = []
    for i in layers:
        proj = model.encoder.layer[i].attention.attention.value

        def hook(_module, _inputs, output, i=i):
            captured[i] = output.detach()

        handles.append(proj.register_forward_hook(hook))
    return captured, handles


def extract_levels(
    model: Dinov2Model, pixels: torch.Tensor, manifest: ExportManifest
) -> np.ndarray:
    """(2L, C, H, W) float32 level stack for one preprocessed image."""
    n_blocks = len(model.encoder.layer)
    if manifest.layer_end >= n_blocks:
        raise ValueError(
            f"layer range ends at {manifest.layer_end} but the backbone has "
            f"{n_blocks} blocks"
        )
    values, handles = _capture_values(model, manifest.layers)
    try:
        with torch.inference_mode():
            out = model(pixels, output_hidden_states=True)
    finally:
        for h in handles:
            h.remove()
    g = manifest.grid

    def to_map(tokens: torch.Tensor) -> np.ndarray:
        # (1, 1 + H*W, C): drop the class token, restore the patch grid
        grid_tokens = tokens[0, tokens.shape[1] - g * g :, :]
        return (
            grid_tokens.reshape(g, g, -1).permute(2, 0, 1).numpy().astype(np.float32)
        )

    levels = []
    for i in manifest.layers:
        for facet in manifest.facets:
            if facet == "token":
                # hidden_states[k] is the output of block k-1; +1 maps the
                # zero-based block index, and this stays before the final norm
                levels.append(to_map(out.hidden_states[i + 1]))
            else:
                levels.append(to_map(values[i]))
    return np.stack(levels, axis=0)


def export_features(manifest: ExportManifest, model: Dinov2Model | None = None) -> Path:
    """Run one image through the backbone and write tensor + sidecar.

    Returns the .mmt path; the sidecar lands next to it with suffix .json.
    """
    if model is None:
        model = load_backbone(manifest.backbone, manifest.seed)
    pixels = preprocess(manifest.image, manifest.image_size)
    stack = extract_levels(model, pixels, manifest)
    out_path = Path(manifest.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_tensor(out_path, stack)
    sidecar = {
        "image": str(manifest.image),
        "image_size": manifest.image_size,
        "backbone": manifest.backbone,
        "seed": manifest.seed if manifest.backbone == RANDOM_BACKBONE else None,
        "layers": manifest.layers,
        "layer_indexing": "zero-based transformer block index",
        "facets": list(manifest.facets),
        "level_order": [
            f"layer{i}:{facet}" for i in manifest.layers for facet in manifest.facets
        ],
        "token_facet": "block output embeddings, final layer norm excluded",
        "value_facet": "attention value projection output of the block",
        "shape": list(stack.shape),
    }
    with open(out_path.with_suffix(".json"), "w") as f:
        json.dump(sidecar, f, indent=1, sort_keys=True)
        f.write("\n")
    return out_path
