from .export import (
    DEFAULT_BACKBONE,
    FACETS,
    PATCH_SIZE,
    RANDOM_BACKBONE,
    ExportManifest,
    export_features,
    extract_levels,
    load_backbone,
    preprocess,
)
from .mmt import write_tensor

__version__ = "0.1.0"
