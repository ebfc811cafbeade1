"""Command-line front end.

Subcommands: gen-synth, match, train, eval, flops, grad-check. Any flag can
also be supplied from a TOML config file via --config; explicit command-line
flags win over config values. On failure the process prints a single
`error-class: message` line to stderr and exits nonzero.
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import dataio, flops
from .metrics import EvalRecord, pck, write_pck_table
from .pipeline import FeatureSet
from .tensor import ShapeError, Tensor
from .train import (
    TrainableBundle,
    evaluate_pairs,
    grad_check,
    init_bundle,
    make_toy_instance,
    pair_forward,
    train_loop,
)
from .transfer import DEFAULT_SIGMA, TAU_INFER, TAU_TRAIN, grid_to_normalized


class UsageError(ValueError):
    pass


ERROR_CLASSES = [
    (dataio.FormatError, "format-error"),
    (dataio.CorruptionError, "corruption-error"),
    (dataio.DataError, "data-error"),
    (ShapeError, "shape-error"),
    (UsageError, "usage-error"),
    (FileNotFoundError, "io-error"),
    (OSError, "io-error"),
    (ValueError, "value-error"),
]


def _fail(exc: BaseException) -> int:
    for cls, label in ERROR_CLASSES:
        if isinstance(exc, cls):
            print(f"{label}: {exc}", file=sys.stderr)
            return 1
    print(f"internal-error: {type(exc).__name__}: {exc}", file=sys.stderr)
    return 2


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="corrscan")
    p.add_argument("--config", help="TOML file supplying defaults for any flag")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="write a deterministic synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--height", type=int, default=16)
    g.add_argument("--width", type=int, default=16)
    g.add_argument("--channels", type=int, default=8)
    g.add_argument("--levels", type=int, default=4)
    g.add_argument("--pairs", type=int, default=20)
    g.add_argument("--keypoints", type=int, default=5)
    g.add_argument("--max-translation", type=int, default=2)
    g.add_argument("--margin", type=int, default=2)

    def common_model(sp):
        sp.add_argument("--annotations", required=True)
        sp.add_argument("--checkpoint", help="checkpoint directory to load")
        sp.add_argument("--seed", type=int, default=0, help="fresh-init seed when no checkpoint")
        sp.add_argument("--init", choices=["random", "warm", "identity"], default="random",
                        help="warm = random weights with a uniform positive projection "
                             "over all levels")
        sp.add_argument("--projection-scale", type=float, default=25.0)
        sp.add_argument("--sigma", type=float, default=DEFAULT_SIGMA)
        sp.add_argument("--scan-impl", choices=["parallel", "sequential"], default="parallel")
        sp.add_argument("--chunk", type=int, default=1024)

    m = sub.add_parser("match", help="run the pipeline and write maps, keypoints, metrics")
    common_model(m)
    m.add_argument("--out", required=True)
    m.add_argument("--tau", type=float, default=TAU_INFER)
    m.add_argument("--alphas", default="0.05,0.1,0.15")
    m.add_argument("--pck-mode", choices=["per-image", "per-point"], default="per-image")
    m.add_argument("--normalizer", choices=["image", "bbox"], default="image")
    m.add_argument("--ascending", action="store_true", help="scan in ascending score order")

    t = sub.add_parser("train", help="overfit the trainable layers on a dataset")
    common_model(t)
    t.add_argument("--out", required=True, help="checkpoint directory to write")
    t.add_argument("--steps", type=int, default=500)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--tau", type=float, default=TAU_TRAIN)
    t.add_argument("--unsquared", action="store_true", help="use unsquared distance loss")

    e = sub.add_parser("eval", help="compute PCK for a dataset")
    common_model(e)
    e.add_argument("--out", required=True, help="metrics CSV path")
    e.add_argument("--tau", type=float, default=TAU_INFER)
    e.add_argument("--alphas", default="0.05,0.1,0.15")
    e.add_argument("--normalizer", choices=["image", "bbox"], default="image")

    f = sub.add_parser("flops", help="theoretical FLOPs of the aggregation schemes")
    f.add_argument("--scheme", choices=list(flops.SCHEMES) + ["all"], default="all")
    f.add_argument("--n", type=int, default=30**4)
    f.add_argument("--channels", type=int, default=16)
    f.add_argument("--kernel", type=int, default=3)
    f.add_argument("--csv", help="optional CSV output path")

    gc = sub.add_parser("grad-check", help="finite-difference check of every parameter group")
    gc.add_argument("--height", type=int, default=6)
    gc.add_argument("--width", type=int, default=6)
    gc.add_argument("--channels", type=int, default=8)
    gc.add_argument("--levels", type=int, default=4)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--step", type=float, default=1e-3)
    gc.add_argument("--tol", type=float, default=1e-4)
    return p


def _apply_config(args: argparse.Namespace, parser: argparse.ArgumentParser, argv: list[str]) -> None:
    """Fill flags from the TOML file for any option not given on the line."""
    if not args.config:
        return
    try:
        with open(args.config, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as e:
        raise UsageError(f"{args.config}: invalid TOML ({e})") from e
    given = {a.split("=")[0].lstrip("-").replace("-", "_") for a in argv if a.startswith("--")}
    for key, value in doc.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            raise UsageError(f"{args.config}: unknown option {key!r}")
        if dest not in given:
            setattr(args, dest, value)


def _load_dataset(annotations: str, dtype=np.float32):
    base = Path(annotations).parent
    pairs = dataio.load_annotations(annotations)
    if not pairs:
        raise dataio.DataError(f"{annotations}: empty pair list")
    dataset = []
    for p in sorted(pairs, key=lambda q: str(q["pair_id"])):
        fs = FeatureSet(Tensor(dataio.read_tensor(base / p["source_features"]).data.astype(dtype)))
        ft = FeatureSet(Tensor(dataio.read_tensor(base / p["target_features"]).data.astype(dtype)))
        if fs.levels.shape != ft.levels.shape:
            raise ShapeError(f"pair {p['pair_id']}: source/target feature shapes differ")
        dataset.append((fs, ft, dataio.annotation_from_pair(p)))
    return dataset


def _make_bundle(args: argparse.Namespace, dataset) -> TrainableBundle:
    levels, c_in = dataset[0][0].levels.shape[0], dataset[0][0].levels.shape[1]
    if args.checkpoint:
        arrays, extra = dataio.load_checkpoint(args.checkpoint)
        bundle = init_bundle(
            levels=int(extra.get("levels", levels)), c_in=int(extra.get("c_in", c_in)),
            seed=0,
        )
        bundle.load_arrays(arrays)
        return bundle
    return init_bundle(
        levels=levels, c_in=c_in, seed=args.seed,
        identity_leaning=(args.init == "identity"),
        uniform_projection=(args.init == "warm"),
        projection_scale=args.projection_scale,
    )


def _alphas(spec: str) -> list[float]:
    try:
        values = [float(v) for v in spec.split(",") if v.strip()]
    except ValueError as e:
        raise UsageError(f"bad --alphas list {spec!r}") from e
    if not values:
        raise UsageError("empty --alphas list")
    return values


def _cmd_gen_synth(args) -> None:
    path = dataio.gen_synthetic(
        args.out, seed=args.seed, h=args.height, w=args.width, c=args.channels,
        levels=args.levels, n_pairs=args.pairs, n_keypoints=args.keypoints,
        max_translation=args.max_translation, keypoint_margin=args.margin,
    )
    print(f"wrote {path}")


def _cmd_match(args) -> None:
    dataset = _load_dataset(args.annotations)
    bundle = _make_bundle(args, dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    alphas = _alphas(args.alphas)
    records: list[EvalRecord] = []
    kp_rows = []
    from .tensor import no_grad

    with no_grad():
        for fs, ft, ann in dataset:
            h, w = fs.levels.shape[2], fs.levels.shape[3]
            _, pred_grid, refined, _ = pair_forward(
                bundle, fs, ft, ann, tau=args.tau, sigma=args.sigma,
                scan_impl=args.scan_impl, chunk=args.chunk,
                descending=not args.ascending,
            )
            dataio.write_tensor(out / f"{ann.pair_id}_refined.mmt", refined.levels)
            pred_norm = grid_to_normalized(pred_grid.data, h, w)
            iw, ih = ann.image_wh
            err = np.linalg.norm(
                (pred_norm - ann.target_kps) * np.array([iw, ih]), axis=1
            )
            wh = ann.image_wh if args.normalizer == "image" else ann.bbox_wh
            records.append(EvalRecord(err, float(max(wh)), ann.pair_id, ann.category))
            for k in range(pred_norm.shape[0]):
                kp_rows.append([
                    ann.pair_id, k,
                    f"{pred_norm[k, 0]:.6f}", f"{pred_norm[k, 1]:.6f}",
                    f"{pred_grid.data[k, 0]:.4f}", f"{pred_grid.data[k, 1]:.4f}",
                    f"{ann.target_kps[k, 0]:.6f}", f"{ann.target_kps[k, 1]:.6f}",
                    f"{err[k]:.4f}",
                ])
    with open(out / "keypoints.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pair_id", "kp", "pred_x", "pred_y", "pred_row", "pred_col",
                        "gt_x", "gt_y", "error_px"])
        writer.writerows(kp_rows)
    write_pck_table(out / "metrics.csv", records, alphas,
                    modes=(args.pck_mode,), normalizer_kind=args.normalizer)
    for alpha in alphas:
        print(f"pck@{alpha:g} {args.pck_mode} = {pck(records, alpha, args.pck_mode):.4f}")


def _cmd_train(args) -> None:
    dataset = _load_dataset(args.annotations)
    bundle = _make_bundle(args, dataset)
    bundle, history, _ = train_loop(
        dataset, bundle, steps=args.steps, lr=args.lr, tau=args.tau,
        sigma=args.sigma, squared=not args.unsquared,
        scan_impl=args.scan_impl, chunk=args.chunk,
    )
    levels, c_in = dataset[0][0].levels.shape[0], dataset[0][0].levels.shape[1]
    dataio.save_checkpoint(args.out, bundle.arrays(),
                           extra={"levels": levels, "c_in": c_in, "steps": args.steps})
    with open(Path(args.out) / "loss_history.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        writer.writerows([i, f"{v:.8f}"] for i, v in enumerate(history))
    print(f"final loss {history[-1]:.6f} (from {history[0]:.6f}) -> {args.out}")


def _cmd_eval(args) -> None:
    dataset = _load_dataset(args.annotations)
    bundle = _make_bundle(args, dataset)
    records = evaluate_pairs(
        bundle, dataset, tau=args.tau, sigma=args.sigma, normalizer=args.normalizer,
        scan_impl=args.scan_impl, chunk=args.chunk,
    )
    alphas = _alphas(args.alphas)
    write_pck_table(args.out, records, alphas, normalizer_kind=args.normalizer)
    for alpha in alphas:
        print(f"pck@{alpha:g} per-image = {pck(records, alpha):.4f}")


def _cmd_flops(args) -> None:
    cfg = flops.FlopsConfig(n=args.n, c=args.channels, k=args.kernel)
    schemes = list(flops.SCHEMES) if args.scheme == "all" else [args.scheme]
    rows = []
    for scheme in schemes:
        total = flops.estimate(scheme, cfg)
        rows.append([scheme, f"{total:.6e}", flops.human_flops(total)])
        print(f"{scheme:18s} {flops.human_flops(total)}")
        for name, value in flops.terms(scheme, cfg).items():
            print(f"  {name:24s} {flops.human_flops(value)}")
    if args.scheme in ("all", "mamba"):
        dev = flops.mamba_printed_total_deviation(cfg)
        print(f"mamba formula total deviates from the published 23.1 GFLOPs by "
              f"{flops.human_flops(abs(dev))} ({'+' if dev >= 0 else '-'})")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["scheme", "flops", "human"])
            writer.writerows(rows)


def _cmd_grad_check(args) -> None:
    inst = make_toy_instance(h=args.height, w=args.width, c=args.channels,
                             levels=args.levels, seed=args.seed)
    bundle = init_bundle(levels=args.levels, c_in=args.channels, seed=args.seed + 1,
                         positive_aggregation=True, dtype=np.float64)
    report = grad_check(bundle, inst, step=args.step, tol=args.tol)
    for name in sorted(k for k in report if not k.startswith("_")):
        flag = "ok" if report[name] <= args.tol else "FAIL"
        print(f"{name:20s} {report[name]:.3e}  {flag}")
    if not report["_pass"]:
        raise UsageError(f"gradient check failed: max error {report['_max']:.3e} > {args.tol}")
    print(f"all groups within {args.tol:g} (max {report['_max']:.3e})")


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_config(args, parser, argv)
        handler = {
            "gen-synth": _cmd_gen_synth,
            "match": _cmd_match,
            "train": _cmd_train,
            "eval": _cmd_eval,
            "flops": _cmd_flops,
            "grad-check": _cmd_grad_check,
        }[args.command]
        handler(args)
    except SystemExit as e:
        return int(e.code or 0)
    except KeyboardInterrupt:
        print("interrupted: aborted by user", file=sys.stderr)
        return 130
    except BaseException as exc:  # single-line error contract for scripting
        return _fail(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
