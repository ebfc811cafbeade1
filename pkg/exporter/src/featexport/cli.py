"""Command-line front end: export one .mmt + sidecar per input image."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .export import (
    DEFAULT_BACKBONE,
    ExportManifest,
    export_features,
    load_backbone,
)


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="featexport",
        description="Export token/value facet features to .mmt containers",
    )
    p.add_argument("images", nargs="+", help="input image files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--image-size", type=int, default=420)
    p.add_argument("--layers", default="4-11",
                   help="inclusive zero-based block range, e.g. 4-11")
    p.add_argument("--facets", default="token,value",
                   help="comma-separated subset of token,value")
    p.add_argument("--backbone", default=DEFAULT_BACKBONE,
                   help="model identifier, or random-vit-b14 for a seeded "
                        "randomly initialized ViT-B/14")
    p.add_argument("--seed", type=int, default=0,
                   help="weight seed for the random backbone")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        lo, _, hi = args.layers.partition("-")
        start, end = int(lo), int(hi if hi else lo)
        facets = tuple(f for f in args.facets.split(",") if f)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        model = load_backbone(args.backbone, args.seed)
        for image in args.images:
            manifest = ExportManifest(
                image=image,
                out=str(out_dir / (Path(image).stem + ".mmt")),
                image_size=args.image_size,
                layer_start=start,
                layer_end=end,
                facets=facets,
                backbone=args.backbone,
                seed=args.seed,
            )
            path = export_features(manifest, model=model)
            print(path)
    except FileNotFoundError as e:
        print(f"io-error: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as e:
        print(f"export-error: {e}", file=sys.stderr)
        return 1
    return 0


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
