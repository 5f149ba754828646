"""Command-line entry point: ``supertoken <command> ...``."""

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import classifier as clf
from .config import load_config
from .derivative import derivative
from .evaluate import confusion, metrics, project_to_pixels, write_confusion_csv, write_metrics_csv
from .features import ProviderConfig, semantic_features
from .hsi_io import (
    HsiCube, SceneSpec, default_palette, make_synthetic_scene, patchwork_layout, quadrant_layout,
    read_class_map, read_cube, read_label_map, read_palette, separated_spectra,
    write_color_map, write_cube, write_label_map, write_palette,
)
from .pipeline import PipelineError, bench, encode, read_assignment, run_pipeline, write_assignment
from .soft_label import hard_labels, one_hot, read_soft_labels_csv, soft_labels, write_soft_labels_csv

log = logging.getLogger("supertoken")


class CommandError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(message)
        self.stage = stage


def _settings_from(args, mapping):
    out = {}
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = str(value)
    return out


_STAGE1_FLAGS = {
    "seed": "seed",
    "provider": "features.provider",
    "dim": "features.dim",
    "token_dim": "features.token_dim",
    "step": "derive.step",
    "orders": "derive.orders",
    "grid": "cluster.grid",
    "per_cell": "cluster.per_cell",
    "iters": "cluster.iters",
    "knn": "cluster.knn",
    "window": "cluster.window",
}


def _add_stage1_flags(p):
    p.add_argument("--seed", type=int)
    p.add_argument("--provider", choices=["linear", "local-avg"])
    p.add_argument("--dim", type=int, help="semantic feature dim C1")
    p.add_argument("--token-dim", type=int, help="token feature dim C2")
    p.add_argument("--step", type=int, help="derivative step")
    p.add_argument("--orders", help="derivative orders used in clustering, e.g. 1 or 1,2 or none")
    p.add_argument("--grid", type=int)
    p.add_argument("--per-cell", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--knn", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--jitter", action="store_true", help="randomise anchor placement from the seed")


def _pipeline_config(args):
    settings = _settings_from(args, _STAGE1_FLAGS)
    settings.update(_settings_from(args, {
        "cube": "input.cube", "labels": "input.labels", "output": "output.dir",
        "palette": "input.palette", "checkpoint": "input.checkpoint", "classes": "num_classes",
        "epochs": "train.epochs", "lr": "train.lr", "batch": "train.batch",
        "mode": "labels.mode", "supervision": "labels.supervision",
    }))
    if getattr(args, "jitter", False):
        settings["cluster.jitter"] = "true"
    for item in getattr(args, "set", None) or []:
        key, _, value = item.partition("=")
        settings[key.strip()] = value.strip()
    return load_config(getattr(args, "config", None), settings)


# -- commands ---------------------------------------------------------------


def cmd_synth(args):
    spectra = separated_spectra(args.classes, args.bands, args.min_distance, args.spectra_seed)
    if args.layout == "patchwork":
        regions = patchwork_layout(args.height, args.width, args.classes, args.rects, args.seed)
    else:
        if args.classes < 4:
            raise CommandError("synth", "quadrant layouts need at least 4 classes")
        regions = quadrant_layout(args.height, args.width, row_split=args.row_split, col_split=args.col_split)
    spec = SceneSpec(args.height, args.width, args.bands, args.classes, spectra, args.sigma, regions, args.seed)
    cube, labels = make_synthetic_scene(spec)
    write_cube(cube, args.output)
    write_label_map(labels, args.labels)
    if args.palette:
        write_palette(default_palette(args.classes), args.palette)


def cmd_derive(args):
    write_cube(derivative(read_cube(args.input), args.order, args.step), args.output)


def cmd_features(args):
    cube = read_cube(args.input)
    fm = semantic_features(cube, ProviderConfig(args.provider, args.dim, args.seed))
    write_cube(fm.as_cube(), args.output)


def cmd_cluster(args):
    cfg = _pipeline_config(args)
    cube = read_cube(args.input)
    stage1 = encode(cube, cfg)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = stage1.clustering
    write_assignment(res.assignment, out / "assignment.pgm")
    from .cluster import assigned_weights

    weights = assigned_weights(res.associations, res.assignment)
    write_cube(HsiCube(weights.reshape(cube.height, cube.width, 1)), out / "assignment_weights.hdr")
    write_cube(HsiCube(stage1.tokens.features[:, None, :]), out / "tokens.hdr")


def cmd_soft_labels(args):
    assignment = read_assignment(args.assignment, args.tokens_count)
    gt = read_label_map(args.labels, shape=(assignment.height, assignment.width))
    weights = None
    if args.mode == "assoc-weighted":
        if not args.weights:
            raise CommandError("soft-labels", "--weights is required for assoc-weighted mode")
        weights = read_cube(args.weights).data.reshape(-1).astype(np.float64)
    write_soft_labels_csv(soft_labels(assignment, weights, gt, args.classes, args.mode), args.output)


def _read_tokens(path):
    cube = read_cube(path)
    return cube.data.reshape(cube.height * cube.width, cube.bands).astype(np.float64)


def cmd_train(args):
    if len(args.tokens) != len(args.soft_labels):
        raise CommandError("train", "--tokens and --soft-labels must be given the same number of times")
    scenes = []
    for tpath, lpath in zip(args.tokens, args.soft_labels):
        labels = read_soft_labels_csv(lpath)
        if args.hard:
            labels = one_hot(hard_labels(labels), labels.num_classes)
        scenes.append((_read_tokens(tpath), labels))
    cfg = clf.TrainConfig(epochs=args.epochs, batch_size=args.batch, lr=args.lr, lr_floor=args.lr_floor, seed=args.seed)
    model = clf.ModelConfig(heads=args.heads, blocks=args.blocks)
    result = clf.train(scenes, cfg, model)
    clf.save_checkpoint(result.params, args.output)
    clf.write_train_log(result.history, args.log or Path(args.output).with_suffix(".log.csv"))


def cmd_predict(args):
    tokens = _read_tokens(args.tokens)
    params = clf.load_checkpoint(args.checkpoint)
    assignment = read_assignment(args.assignment, len(tokens))
    pred = project_to_pixels(clf.predict_tokens(tokens, params), assignment)
    write_label_map(pred, args.output)
    if args.color:
        palette = read_palette(args.palette) if args.palette else default_palette(params.num_classes)
        write_color_map(pred, palette, args.color)


def cmd_eval(args):
    gt = read_label_map(args.gt)
    pred = read_class_map(args.pred, shape=(gt.height, gt.width))
    cm = confusion(pred, gt, args.classes)
    report = metrics(cm)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(report, out / "metrics.csv")
    write_confusion_csv(cm, out / "confusion.csv")
    print(f"OA {report.oa:.4f}  AA {report.aa:.4f}  kappa {report.kappa:.4f}  mIoU {report.miou:.4f}  CF1 {report.cf1:.4f}")


def cmd_pipeline(args):
    manifest = run_pipeline(_pipeline_config(args))
    print(json.dumps(manifest, indent=2, sort_keys=True))


def cmd_bench(args):
    report = bench(_pipeline_config(args), args.repeats)
    print(json.dumps(asdict(report), indent=2, sort_keys=True))


# -- parser -----------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="supertoken", description=__doc__)
    parser.add_argument("--threads", type=int, help="pin BLAS/OpenMP worker threads")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--bands", type=int, default=16)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--min-distance", type=float, default=1.0)
    p.add_argument("--layout", choices=["quadrant", "patchwork"], default="quadrant")
    p.add_argument("--row-split", type=int)
    p.add_argument("--col-split", type=int)
    p.add_argument("--rects", type=int, default=6)
    p.add_argument("--spectra-seed", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True, help="cube header path")
    p.add_argument("--labels", required=True, help="label map PGM path")
    p.add_argument("--palette", help="also write a default palette file")
    p.set_defaults(func=cmd_synth, stage="synth")

    p = sub.add_parser("derive", help="spectral derivative cube")
    p.add_argument("--input", required=True)
    p.add_argument("--order", type=int, choices=[1, 2], default=1)
    p.add_argument("--step", type=int, default=1)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_derive, stage="derive")

    p = sub.add_parser("features", help="semantic feature map")
    p.add_argument("--input", required=True)
    p.add_argument("--provider", choices=["linear", "local-avg"], default="linear")
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_features, stage="features")

    p = sub.add_parser("cluster", help="stage 1: cluster pixels into supertokens")
    p.add_argument("--input", required=True)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    _add_stage1_flags(p)
    p.add_argument("--output-dir", required=True)
    p.set_defaults(func=cmd_cluster, stage="cluster")

    p = sub.add_parser("soft-labels", help="class-proportion labels per token")
    p.add_argument("--assignment", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--tokens-count", type=int, help="total token count (default: max assignment + 1)")
    p.add_argument("--mode", choices=["hard-count", "assoc-weighted"], default="hard-count")
    p.add_argument("--weights", help="per-pixel assignment weights cube (assoc-weighted mode)")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_soft_labels, stage="soft-labels")

    p = sub.add_parser("train", help="train the token classifier")
    p.add_argument("--tokens", action="append", required=True)
    p.add_argument("--soft-labels", action="append", required=True)
    p.add_argument("--hard", action="store_true", help="train on argmax one-hot labels")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--lr-floor", type=float, default=0.0)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True, help="checkpoint header path")
    p.add_argument("--log", help="training log CSV (default: <output>.log.csv)")
    p.set_defaults(func=cmd_train, stage="train")

    p = sub.add_parser("predict", help="project token classes to a pixel map")
    p.add_argument("--tokens", required=True)
    p.add_argument("--assignment", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", required=True, help="class map PGM")
    p.add_argument("--color", help="colourised PPM output")
    p.add_argument("--palette")
    p.set_defaults(func=cmd_predict, stage="predict")

    p = sub.add_parser("eval", help="confusion matrix and metrics")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--output-dir", required=True)
    p.set_defaults(func=cmd_eval, stage="eval")

    for name, func, helptext in (
        ("pipeline", cmd_pipeline, "run every stage and write a manifest"),
        ("bench", cmd_bench, "time stage 1 and the classifier forward pass"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE")
        p.add_argument("--cube")
        p.add_argument("--labels")
        p.add_argument("--output")
        p.add_argument("--palette")
        p.add_argument("--checkpoint")
        p.add_argument("--classes", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch", type=int)
        p.add_argument("--mode", choices=["hard-count", "assoc-weighted"])
        p.add_argument("--supervision", choices=["soft", "hard"])
        _add_stage1_flags(p)
        if name == "bench":
            p.add_argument("--repeats", type=int, default=3)
        p.set_defaults(func=func, stage=name)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                args.func(args)
        else:
            args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CommandError, ValueError, OSError, KeyError) as exc:
        stage = getattr(exc, "stage", args.stage)
        print(f"error: [{stage}] {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
