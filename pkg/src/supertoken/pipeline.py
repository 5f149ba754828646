"""End-to-end orchestration and stage benchmarking.

Frozen projection seeds are derived from the master seed with fixed offsets:
semantic provider ``seed``, raw-spectrum map ``seed + 1``, first-derivative
map ``seed + 2``, second-derivative map ``seed + 3`` and the semantic-to-token
projection (only used when C1 != C2) ``seed + 4``.
"""

import hashlib
import json
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import classifier as clf
from .cluster import Grid, AssignmentMap, aggregate_tokens, assigned_weights, association_op_count, candidate_centers, cluster
from .derivative import derivative
from .evaluate import confusion, metrics, project_to_pixels, write_confusion_csv, write_metrics_csv
from .features import FeatureMap, ProviderConfig, init_linear_map, project_features, semantic_features
from .hsi_io import (
    IGNORE, HsiCube, LabelMap, default_palette, read_cube, read_label_map, read_palette,
    write_color_map, write_cube, write_label_map,
)
from .soft_label import hard_labels, one_hot, soft_labels, write_soft_labels_csv

log = logging.getLogger(__name__)

MAP_SEED_OFFSETS = {"spectrum": 1, 1: 2, 2: 3, "semantic-to-token": 4}


class PipelineError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class Stage1(NamedTuple):
    derivatives: dict  # order -> HsiCube
    semantic: FeatureMap  # F_D at token dim
    spectral: FeatureMap  # I_a
    derivative_features: FeatureMap  # summed projections of the selected orders, or None
    clustering: object  # ClusterResult
    tokens: object  # SupertokenSet


class _Timer:
    def __init__(self):
        self.times = {}

    def __call__(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.times[name] = timer.times.get(name, 0.0) + time.perf_counter() - self.t0

        return _Ctx()


def compute_derivatives(cube, cfg):
    return {order: derivative(cube, order, cfg.step) for order in cfg.derivative_orders}


def compute_features(cube, derivs, cfg):
    """``(F_D, I_a, summed derivative projections or None)`` at the token dim."""
    seed = cfg.seed
    fd = semantic_features(cube, ProviderConfig(cfg.provider, cfg.semantic_dim, seed))
    if cfg.semantic_dim != cfg.token_dim:
        fd = project_features(fd, init_linear_map(cfg.semantic_dim, cfg.token_dim, seed + MAP_SEED_OFFSETS["semantic-to-token"]))
    data = np.asarray(cube.data, dtype=np.float64)
    ia = project_features(data, init_linear_map(cube.bands, cfg.token_dim, seed + MAP_SEED_OFFSETS["spectrum"]))
    ida = None
    for order, dcube in derivs.items():
        m = init_linear_map(dcube.bands, cfg.token_dim, seed + MAP_SEED_OFFSETS[order])
        proj = project_features(dcube, m)
        ida = proj if ida is None else ida + proj
    return fd, ia, ida


def encode(cube, cfg, timer=None):
    """Stage 1: derivatives, features, clustering and token aggregation."""
    timer = timer or _Timer()
    with timer("derivatives"):
        derivs = compute_derivatives(cube, cfg)
    with timer("features"):
        fd, ia, ida = compute_features(cube, derivs, cfg)
    with timer("clustering"):
        result = cluster(fd, ia, ida, cfg.cluster, cfg.seed)
    with timer("aggregation"):
        tokens = aggregate_tokens(result.associations, result.assignment, fd, result.centroids)
    return Stage1(derivs, fd, ia, ida, result, tokens)


def training_labels(stage1, gt, cfg, num_classes):
    res = stage1.clustering
    soft = soft_labels(res.assignment, res.associations, gt, num_classes, cfg.label_mode)
    target = one_hot(hard_labels(soft), num_classes) if cfg.supervision == "hard" else soft
    return soft, target


def write_assignment(assignment, path):
    if assignment.num_centers >= IGNORE:
        raise ValueError(f"{assignment.num_centers} centers do not fit a 16-bit assignment map")
    write_label_map(LabelMap(assignment.indices), path)


def read_assignment(path, num_centers=None):
    ids = read_label_map(path).class_ids
    return AssignmentMap(ids, num_centers if num_centers is not None else int(ids.max()) + 1)


def infer_num_classes(gt):
    ids = gt.class_ids[gt.class_ids != IGNORE]
    if not ids.size:
        raise ValueError("label map has no labeled pixels")
    return int(ids.max()) + 1


# -- manifest ---------------------------------------------------------------


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class Manifest:
    root: Path
    artifacts: list = field(default_factory=list)

    def add(self, name, *paths):
        files = [
            {"path": Path(p).relative_to(self.root).as_posix(), "sha256": sha256_file(p), "bytes": Path(p).stat().st_size}
            for p in paths
        ]
        self.artifacts.append({"name": name, "files": files})

    def to_json(self):
        return json.dumps({"artifacts": self.artifacts}, indent=2, sort_keys=True) + "\n"

    def write(self, path):
        Path(path).write_text(self.to_json())


def _stage(name):
    """Re-raise any exception from the wrapped block tagged with ``name``."""

    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and not isinstance(exc, PipelineError):
                raise PipelineError(name, str(exc)) from exc
            return False

    return _Ctx()


def run_pipeline(cfg):
    """Run every stage, writing each artifact as soon as it exists.

    Returns the manifest dict; ``manifest.json`` in the output directory holds
    the same content.  Any failure is raised as ``PipelineError`` tagged with
    the stage name, and artifacts written so far stay on disk.
    """
    with _stage("config"):
        for label, path in (("cube", cfg.cube), ("labels", cfg.labels)):
            if path is None:
                raise ValueError(f"no {label} path configured")
            hdr = Path(path)
            if not hdr.exists():
                raise FileNotFoundError(f"{label} file not found: {hdr}")
        if cfg.checkpoint is not None and not Path(cfg.checkpoint).exists():
            raise FileNotFoundError(f"checkpoint file not found: {cfg.checkpoint}")
        if cfg.palette is not None and not Path(cfg.palette).exists():
            raise FileNotFoundError(f"palette file not found: {cfg.palette}")
        cfg.validate()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out)

    with _stage("load"):
        cube = read_cube(cfg.cube)
        gt = read_label_map(cfg.labels, shape=(cube.height, cube.width))
        num_classes = cfg.num_classes or infer_num_classes(gt)
        gt.validate(num_classes)

    with _stage("derive"):
        derivs = compute_derivatives(cube, cfg)
        paths = []
        for order, dcube in derivs.items():
            p = out / f"derivative_{order}.hdr"
            write_cube(dcube, p)
            paths += [p, p.with_suffix(".raw")]
        manifest.add("derivatives", *paths)

    with _stage("features"):
        fd, ia, ida = compute_features(cube, derivs, cfg)
        write_cube(fd.as_cube(), out / "semantic.hdr")
        manifest.add("features", out / "semantic.hdr", out / "semantic.raw")

    with _stage("cluster"):
        result = cluster(fd, ia, ida, cfg.cluster, cfg.seed)
        write_assignment(result.assignment, out / "assignment.pgm")
        weights = assigned_weights(result.associations, result.assignment)
        write_cube(HsiCube(weights.reshape(cube.height, cube.width, 1)), out / "assignment_weights.hdr")
        manifest.add("assignment", out / "assignment.pgm", out / "assignment_weights.hdr", out / "assignment_weights.raw")

    with _stage("aggregate"):
        tokens = aggregate_tokens(result.associations, result.assignment, fd, result.centroids)
        write_cube(HsiCube(tokens.features[:, None, :]), out / "tokens.hdr")
        manifest.add("tokens", out / "tokens.hdr", out / "tokens.raw")
    with _stage("soft-labels"):
        soft, target = training_labels(Stage1(derivs, fd, ia, ida, result, tokens), gt, cfg, num_classes)
        write_soft_labels_csv(soft, out / "soft_labels.csv")
        manifest.add("soft_labels", out / "soft_labels.csv")

    ckpt = out / "classifier.ckpt"
    with _stage("train"):
        if cfg.checkpoint is not None:
            params = clf.load_checkpoint(cfg.checkpoint)
            clf.save_checkpoint(params, ckpt)
            manifest.add("checkpoint", ckpt, ckpt.with_suffix(".raw"))
        else:
            trained = clf.train([(tokens, target)], cfg.train, cfg.model)
            clf.save_checkpoint(trained.params, ckpt)
            clf.write_train_log(trained.history, out / "train_log.csv")
            manifest.add("checkpoint", ckpt, ckpt.with_suffix(".raw"), out / "train_log.csv")

    with _stage("predict"):
        # predict from the stored float32 weights so the CLI reproduces this map
        params = clf.load_checkpoint(ckpt)
        token_classes = clf.predict_tokens(tokens, params)
        pred = project_to_pixels(token_classes, result.assignment)
        palette = read_palette(cfg.palette) if cfg.palette else default_palette(num_classes)
        write_label_map(pred, out / "class_map.pgm")
        write_color_map(pred, palette, out / "class_map.ppm")
        manifest.add("class_map", out / "class_map.pgm", out / "class_map.ppm")

    with _stage("eval"):
        cm = confusion(pred, gt, num_classes)
        report = metrics(cm)
        write_metrics_csv(report, out / "metrics.csv")
        write_confusion_csv(cm, out / "confusion.csv")
        manifest.add("metrics", out / "metrics.csv", out / "confusion.csv")

    manifest.write(out / "manifest.json")
    log.info("pipeline done: OA %.4f kappa %.4f", report.oa, report.kappa)
    return json.loads(manifest.to_json())


# -- benchmarking -------------------------------------------------------------

STAGES = ("derivatives", "features", "clustering", "aggregation", "forward")


@dataclass
class BenchReport:
    stage_ms: dict  # median wall-clock per stage, plus "total"
    pixels_per_second: float
    op_counts: dict  # stage -> {"adds", "mults", "exps"}
    repeats: int


def _matmul_ops(rows, inner, cols):
    return {"adds": rows * inner * cols, "mults": rows * inner * cols, "exps": 0}


def _sum_ops(*counts):
    out = {"adds": 0, "mults": 0, "exps": 0}
    for c in counts:
        for k in out:
            out[k] += c[k]
    return out


def op_counts(height, width, bands, cfg, num_classes):
    """Analytic arithmetic counts per stage; a pure function of shapes and config."""
    n = height * width
    c = cfg.token_dim
    deriv = []
    for order in cfg.derivative_orders:
        nb = bands - order * cfg.step
        deriv.append({"adds": order * n * nb, "mults": order * n * nb, "exps": 0})
    feats = [_matmul_ops(n, bands, cfg.semantic_dim), _matmul_ops(n, bands, c)]
    if cfg.provider == "local-avg":
        feats.append({"adds": 9 * n * bands, "mults": n * bands, "exps": 0})
    if cfg.semantic_dim != c:
        feats.append(_matmul_ops(n, cfg.semantic_dim, c))
    for order in cfg.derivative_orders:
        feats.append(_matmul_ops(n, bands - order * cfg.step, c))
    grid = Grid(height, width, cfg.cluster.grid)
    window_centers = (candidate_centers(grid, cfg.cluster.per_cell, cfg.cluster.window) >= 0).sum(axis=1)
    pairs = int(window_centers.sum())
    n_maps = 2 + (1 if cfg.derivative_orders else 0)
    assoc = association_op_count(n, window_centers, c)
    assoc["adds"] = pairs * n_maps * c
    update = {"adds": pairs * (c + 1), "mults": pairs * c, "exps": pairs}
    passes = cfg.cluster.iterations + 1
    clustering = _sum_ops(*([assoc] * passes), *([update] * cfg.cluster.iterations))
    aggregation = {"adds": n * (c + 1), "mults": n * c, "exps": 0}
    m = cfg.cluster.num_centers
    hidden = cfg.model.mlp_ratio * c
    block = _sum_ops(
        _matmul_ops(m, c, 3 * c), _matmul_ops(m, c, m), _matmul_ops(m, m, c),
        _matmul_ops(m, c, c), _matmul_ops(m, c, hidden), _matmul_ops(m, hidden, c),
    )
    block["exps"] = cfg.model.heads * m * m + m * hidden
    head = _matmul_ops(m, c, num_classes)
    head["exps"] = m * num_classes
    forward = _sum_ops(*([block] * cfg.model.blocks), head)
    return {
        "derivatives": _sum_ops(*deriv),
        "features": _sum_ops(*feats),
        "clustering": clustering,
        "aggregation": aggregation,
        "forward": forward,
    }


def bench(cfg, repeats=3, cube=None, num_classes=None):
    """Median-of-``repeats`` stage timings for stage 1 plus the classifier
    forward pass (weights from ``cfg.checkpoint`` or a fresh seeded init)."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if cube is None:
        cube = read_cube(cfg.cube)
    if num_classes is None:
        if cfg.num_classes:
            num_classes = cfg.num_classes
        elif cfg.labels is not None:
            num_classes = infer_num_classes(read_label_map(cfg.labels))
        else:
            raise ValueError("bench needs num_classes or a label map")
    if cfg.checkpoint is not None:
        params = clf.load_checkpoint(cfg.checkpoint)
    else:
        params = clf.init_params(cfg.token_dim, num_classes, cfg.model.heads, cfg.model.blocks, cfg.model.mlp_ratio, cfg.seed)
    runs = []
    for _ in range(repeats):
        timer = _Timer()
        t0 = time.perf_counter()
        stage1 = encode(cube, cfg, timer)
        with timer("forward"):
            clf.forward(stage1.tokens, params)
        timer.times["total"] = time.perf_counter() - t0
        runs.append(timer.times)
    stage_ms = {k: round(1000 * statistics.median(r[k] for r in runs), 3) for k in STAGES + ("total",)}
    total_s = max(stage_ms["total"] / 1000, 1e-9)
    return BenchReport(
        stage_ms=stage_ms,
        pixels_per_second=cube.num_pixels / total_s,
        op_counts=op_counts(cube.height, cube.width, cube.bands, cfg, num_classes),
        repeats=repeats,
    )
