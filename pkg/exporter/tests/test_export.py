import json
import struct

import numpy as np
import pytest

from featexport import (
    RANDOM_BACKBONE,
    ExportManifest,
    export_features,
    extract_levels,
    preprocess,
)


def read_mmt(path):
    """Independent header parse straight off the documented layout."""
    raw = path.read_bytes()
    assert raw[:4] == b"MMTN"
    version, dtype, rank, reserved = struct.unpack("<BBBB", raw[4:8])
    assert (version, dtype, reserved) == (1, 1, 0)
    extents = struct.unpack(f"<{rank}Q", raw[8 : 8 + 8 * rank])
    payload = np.frombuffer(raw[8 + 8 * rank :], dtype="<f4")
    assert payload.size == int(np.prod(extents))
    return payload.reshape(extents)


def test_preprocess_shape_and_determinism(image_path):
    x = preprocess(image_path, 420)
    y = preprocess(image_path, 420)
    assert tuple(x.shape) == (1, 3, 420, 420)
    assert x.dtype.is_floating_point
    assert (x == y).all()


def test_preprocess_respects_image_size(image_path):
    assert tuple(preprocess(image_path, 140).shape) == (1, 3, 140, 140)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"image_size": 100},          # not a multiple of the patch size
        {"layer_start": 8, "layer_end": 5},
        {"layer_start": -1},
        {"facets": ("token", "query")},
        {"facets": ()},
    ],
)
def test_manifest_validation(kwargs, image_path, tmp_path):
    base = dict(image=str(image_path), out=str(tmp_path / "x.mmt"))
    with pytest.raises(ValueError):
        ExportManifest(**{**base, **kwargs})


def test_layer_range_must_fit_backbone(backbone, image_path, tmp_path):
    manifest = ExportManifest(
        image=str(image_path), out=str(tmp_path / "x.mmt"),
        layer_start=10, layer_end=12, backbone=RANDOM_BACKBONE,
    )
    with pytest.raises(ValueError, match="12 blocks"):
        export_features(manifest, model=backbone)


def test_export_shape_and_header(exported):
    manifest, path = exported
    stack = read_mmt(path)
    assert stack.shape == (16, 768, 30, 30)
    assert np.isfinite(stack).all()


def test_export_is_deterministic(exported, backbone, tmp_path):
    manifest, path = exported
    again = ExportManifest(
        image=manifest.image, out=str(tmp_path / "again.mmt"),
        backbone=RANDOM_BACKBONE, seed=0,
    )
    export_features(again, model=backbone)
    assert (tmp_path / "again.mmt").read_bytes() == path.read_bytes()


def test_level_order_interleaves_facets(exported, backbone, tmp_path):
    """Single-facet exports must slot into the even/odd level positions of
    the combined layer-then-facet ordering."""
    manifest, path = exported
    both = read_mmt(path)
    singles = {}
    for facet in ("token", "value"):
        m = ExportManifest(
            image=manifest.image, out=str(tmp_path / f"{facet}.mmt"),
            facets=(facet,), backbone=RANDOM_BACKBONE, seed=0,
        )
        singles[facet] = read_mmt(export_features(m, model=backbone))
    assert singles["token"].shape == (8, 768, 30, 30)
    np.testing.assert_array_equal(both[0::2], singles["token"])
    np.testing.assert_array_equal(both[1::2], singles["value"])


def test_token_facet_matches_hidden_states(backbone, image_path, exported):
    """The token levels are the raw block outputs on the patch grid."""
    manifest, path = exported
    pixels = preprocess(image_path, 420)
    import torch

    with torch.inference_mode():
        out = backbone(pixels, output_hidden_states=True)
    block4 = out.hidden_states[5][0, 1:, :].reshape(30, 30, 768)
    got = read_mmt(path)[0]
    np.testing.assert_allclose(got, block4.permute(2, 0, 1).numpy(), atol=1e-6)


def test_sidecar_records_the_contract(exported):
    manifest, path = exported
    with open(path.with_suffix(".json")) as f:
        side = json.load(f)
    assert side["shape"] == [16, 768, 30, 30]
    assert side["layers"] == list(range(4, 12))
    assert side["level_order"][:3] == ["layer4:token", "layer4:value", "layer5:token"]
    assert side["layer_indexing"] == "zero-based transformer block index"
    assert "final layer norm excluded" in side["token_facet"]
    assert side["backbone"] == RANDOM_BACKBONE and side["seed"] == 0


def test_unreadable_image_raises(backbone, tmp_path):
    manifest = ExportManifest(
        image=str(tmp_path / "missing.png"), out=str(tmp_path / "x.mmt"),
        backbone=RANDOM_BACKBONE,
    )
    with pytest.raises(FileNotFoundError):
        export_features(manifest, model=backbone)
