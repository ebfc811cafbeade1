import numpy as np
import pytest
from PIL import Image

from featexport import RANDOM_BACKBONE, ExportManifest, export_features, load_backbone


@pytest.fixture(scope="session")
def backbone():
    return load_backbone(RANDOM_BACKBONE, seed=0)


@pytest.fixture(scope="session")
def image_path(tmp_path_factory):
    """Deterministic non-square RGB test image."""
    rng = np.random.default_rng(0)
    arr = rng.integers(0, 256, size=(280, 350, 3), dtype=np.uint8)
    path = tmp_path_factory.mktemp("img") / "sample.png"
    Image.fromarray(arr).save(path)
    return path


@pytest.fixture(scope="session")
def exported(tmp_path_factory, backbone, image_path):
    """One full default export, shared across tests; returns (manifest, path)."""
    out = tmp_path_factory.mktemp("export") / "sample.mmt"
    manifest = ExportManifest(
        image=str(image_path), out=str(out), backbone=RANDOM_BACKBONE, seed=0
    )
    return manifest, export_features(manifest, model=backbone)
