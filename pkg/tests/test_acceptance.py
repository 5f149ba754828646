"""Acceptance criteria, one test each, at the stated tolerances.

Every test prints a single ``PASS``/``FAIL`` line (also collected into the
terminal summary) before asserting.
"""

import json
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from conftest import ACCEPTANCE_LINES
from supertoken import classifier as clf
from supertoken.cluster import AssignmentMap, CentroidSet, ClusterConfig, compute_associations, update_centers
from supertoken.config import load_config
from supertoken.derivative import first_derivative, second_derivative
from supertoken.evaluate import metrics
from supertoken.features import FeatureMap
from supertoken.hsi_io import (
    IGNORE, HsiCube, LabelMap, SceneSpec, make_synthetic_scene, quadrant_layout, read_class_map,
    separated_spectra, write_cube, write_label_map,
)
from supertoken.pipeline import encode, read_assignment, run_pipeline
from supertoken.soft_label import soft_labels


def verdict(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


# -- shared synthetic scene (criteria 7, 8, 10, 11) -----------------------------------

SCENE_SEED = 0
PIPELINE_SEED = 0


def synthetic_scene():
    """64x64x16, four classes at pairwise L2 >= 1, sigma 0.05, quadrant borders
    deliberately off the 8x8 cluster grid."""
    spectra = separated_spectra(4, 16, 1.0, seed=SCENE_SEED)
    regions = quadrant_layout(64, 64, row_split=29, col_split=37)
    return make_synthetic_scene(SceneSpec(64, 64, 16, 4, spectra, 0.05, regions, SCENE_SEED))


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    cube, gt = synthetic_scene()
    write_cube(cube, root / "scene.hdr")
    write_label_map(gt, root / "gt.pgm")
    base = {
        "input.cube": str(root / "scene.hdr"), "input.labels": str(root / "gt.pgm"), "seed": str(PIPELINE_SEED),
        "cluster.grid": "8", "cluster.per_cell": "1", "cluster.iters": "4",
        "train.epochs": "200", "train.lr": "1e-3", "train.batch": "1",
    }
    variants = {
        "soft": {},
        "soft-repeat": {},
        "hard": {"labels.supervision": "hard"},
        "no-derivative": {"derive.orders": "none"},
    }
    out = {}
    for name, extra in variants.items():
        settings = dict(base, **extra)
        settings["output.dir"] = str(root / name)
        t0 = time.perf_counter()
        with threadpool_limits(limits=1):
            run_pipeline(load_config(None, settings))
        seconds = time.perf_counter() - t0
        rows = dict(line.split(",") for line in (root / name / "metrics.csv").read_text().splitlines()[1:])
        out[name] = {"dir": root / name, "seconds": seconds, "oa": float(rows["oa"]), "kappa": float(rows["kappa"])}
    return out


# -- 1 -------------------------------------------------------------------------------


def test_criterion_1_derivative_properties():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        h, w, d = rng.integers(1, 9), rng.integers(1, 9), rng.integers(5, 17)
        x, y = rng.uniform(-1, 1, size=(2, h, w, d))
        a, b = rng.uniform(-2, 2, size=2)
        step = int(rng.integers(1, (d - 1) // 2 + 1))
        for fn in (first_derivative, second_derivative):
            lin = fn(a * x + b * y, step) - (a * fn(x, step) + b * fn(y, step))
            worst = max(worst, np.abs(lin).max())
            const = fn(np.full((h, w, d), rng.uniform(-5, 5)), step)
            worst = max(worst, np.abs(const).max())
        comp = second_derivative(x, step) - first_derivative(first_derivative(x, step), step)
        worst = max(worst, np.abs(comp).max())
    elapsed = time.perf_counter() - t0
    verdict(1, worst <= 1e-12 and elapsed < 5.0, f"max error {worst:.2e} (<= 1e-12), {elapsed:.2f}s (< 5s)")


# -- 2 -------------------------------------------------------------------------------


def test_criterion_2_clustering_oracles():
    rng = np.random.default_rng(202)
    worst_assoc = worst_update = 0.0
    for _ in range(100):
        h, w = rng.integers(1, 17, size=2)
        c = int(rng.integers(1, 9))
        f = int(rng.integers(1, min(h, w, 2) + 1))
        m = int(rng.integers(1, 8 // (f * f) + 1))
        fd, ia, ida = (FeatureMap(h, w, rng.normal(scale=0.3, size=(h * w, c))) for _ in range(3))
        p = rng.normal(scale=0.5, size=(f * f * m, c))
        cfg = ClusterConfig(grid=f, per_cell=m, window=f)
        a = compute_associations(fd, ia, ida, CentroidSet(p, np.zeros((len(p), 2), int), m), cfg)
        x = fd.rows + ia.rows + ida.rows
        dense = np.exp(-((x[:, None, :] - p[None]) ** 2).sum(axis=2))
        worst_assoc = max(worst_assoc, np.abs(a.to_dense() - dense).max())
        oracle = (dense / dense.sum(axis=0, keepdims=True)).T @ fd.rows
        worst_update = max(worst_update, np.abs(update_centers(a, fd).features - oracle).max())
    ok = worst_assoc <= 1e-12 and worst_update <= 1e-12
    verdict(2, ok, f"association {worst_assoc:.2e}, center update {worst_update:.2e} (<= 1e-12) over 100 instances")


# -- 3 -------------------------------------------------------------------------------


def test_criterion_3_structural_counts():
    rng = np.random.default_rng(303)
    failures = []
    for h, w in ((32, 32), (33, 47), (64, 64)):
        cube = HsiCube(rng.normal(size=(h, w, 8)).astype(np.float32))
        n = encode(cube, load_config(None, {"cluster.grid": "16", "cluster.per_cell": "4"})).tokens.count
        if n != 1024:
            failures.append(f"{h}x{w}: {n}")
    cube = HsiCube(rng.normal(size=(128, 128, 16)).astype(np.float32))
    for f in (4, 8, 16, 32):
        for m in (1, 4, 9, 16):
            n = encode(cube, load_config(None, {"cluster.grid": str(f), "cluster.per_cell": str(m)})).tokens.count
            if n != f * f * m:
                failures.append(f"F={f} M={m}: {n}")
    verdict(3, not failures, "1024 tokens at F=16 M=4; F^2*M on the 4x4 ablation grid" + (f" [{failures}]" if failures else ""))


# -- 4 -------------------------------------------------------------------------------


def test_criterion_4_soft_label_rows():
    rng = np.random.default_rng(404)
    worst_sum, mismatches = 0.0, 0
    for _ in range(1000):
        h, w = rng.integers(1, 11, size=2)
        tokens, classes = int(rng.integers(1, 20)), int(rng.integers(1, 8))
        assign = rng.integers(0, tokens, size=(h, w))
        gt = rng.integers(0, classes, size=(h, w))
        gt[rng.random((h, w)) < 0.1] = IGNORE
        lab = soft_labels(AssignmentMap(assign, tokens), None, LabelMap(gt), classes)
        counts = np.zeros((tokens, classes))
        for t, g in zip(assign.ravel(), gt.ravel()):
            if g != IGNORE:
                counts[t, g] += 1
        totals = counts.sum(axis=1)
        expect = np.divide(counts, totals[:, None], out=np.zeros_like(counts), where=totals[:, None] > 0)
        mismatches += int(not (np.array_equal(lab.rows, expect) and np.array_equal(lab.valid, totals > 0)))
        if lab.valid.any():
            worst_sum = max(worst_sum, np.abs(lab.rows[lab.valid].sum(axis=1) - 1).max())
    verdict(4, worst_sum <= 1e-9 and mismatches == 0, f"row-sum error {worst_sum:.2e} (<= 1e-9), {mismatches} oracle mismatches")


# -- 5 -------------------------------------------------------------------------------


def test_criterion_5_gradient_check():
    rng = np.random.default_rng(505)
    params = clf.init_params(32, 5, heads=4, blocks=2, seed=5)
    tokens = rng.normal(size=(16, 32))
    labels = rng.dirichlet(np.ones(5), size=16)
    t0 = time.perf_counter()
    report = clf.grad_check(params, (tokens, labels), coords=200, h=1e-5, seed=5)
    elapsed = time.perf_counter() - t0
    ok = report.max_rel_error <= 1e-5 and elapsed < 30 and len(report.coords) >= 200
    verdict(5, ok, f"max relative error {report.max_rel_error:.2e} over {len(report.coords)} coords (<= 1e-5), {elapsed:.2f}s (< 30s)")


# -- 6 -------------------------------------------------------------------------------


def test_criterion_6_attention_contracts():
    rng = np.random.default_rng(606)
    worst_row = worst_perm = 0.0
    for i in range(100):
        m = int(rng.integers(1, 24))
        params = clf.init_params(16, 3, heads=4, blocks=2, seed=i)
        x = rng.normal(size=(m, 16))
        for att in clf.attention_maps(x, params):
            worst_row = max(worst_row, np.abs(att.sum(axis=2) - 1).max())
        perm = rng.permutation(m)
        worst_perm = max(worst_perm, np.abs(clf.forward(x[perm], params) - clf.forward(x, params)[perm]).max())
    ok = worst_row <= 1e-9 and worst_perm <= 1e-9
    verdict(6, ok, f"attention row-sum error {worst_row:.2e}, permutation diff {worst_perm:.2e} (<= 1e-9)")


# -- 7 -------------------------------------------------------------------------------


def test_criterion_7_end_to_end_accuracy(runs):
    r = runs["soft"]
    ok = r["oa"] >= 0.95 and r["kappa"] >= 0.93 and r["seconds"] < 60
    verdict(7, ok, f"OA {r['oa']:.4f} (>= 0.95), kappa {r['kappa']:.4f} (>= 0.93), {r['seconds']:.1f}s single-threaded (< 60s)")


# -- 8 -------------------------------------------------------------------------------


def test_criterion_8_region_consistency(runs):
    broken = 0
    checked = 0
    for r in runs.values():
        pred = read_class_map(r["dir"] / "class_map.pgm").class_ids.ravel()
        assign = read_assignment(r["dir"] / "assignment.pgm").flat()
        for tok in np.unique(assign):
            checked += 1
            broken += int(len(np.unique(pred[assign == tok])) != 1)
    verdict(8, broken == 0, f"{broken} of {checked} supertokens span more than one class across {len(runs)} predictions")


# -- 9 -------------------------------------------------------------------------------


def test_criterion_9_metric_golden_values():
    r = metrics(np.array([[2, 1], [0, 3]]))
    golden = [abs(r.oa - 0.8333), abs(r.kappa - 0.6667), abs(r.miou - 0.7083), abs(r.f1[0] - 0.8), abs(r.f1[1] - 0.8571)]
    p = metrics(np.diag([5, 3, 8]))
    perfect = (p.oa, p.aa, p.kappa, p.miou, p.cf1) == (1.0, 1.0, 1.0, 1.0, 1.0) and (p.f1 == 1.0).all()
    ok = max(golden) <= 1e-4 and perfect
    verdict(9, ok, f"golden deviation {max(golden):.1e} (<= 1e-4); perfect matrix gives exactly 1: {perfect}")


# -- 10 ------------------------------------------------------------------------------


def test_criterion_10_manifest_determinism(runs):
    a = (runs["soft"]["dir"] / "manifest.json").read_bytes()
    b = (runs["soft-repeat"]["dir"] / "manifest.json").read_bytes()
    n = len(json.loads(a)["artifacts"])
    verdict(10, a == b, f"two seeded single-threaded runs give byte-identical manifests ({n} artifacts)")


# -- 11 ------------------------------------------------------------------------------


def test_criterion_11_ablation_directions(runs):
    soft, hard, no_d = runs["soft"]["oa"], runs["hard"]["oa"], runs["no-derivative"]["oa"]
    ok = soft >= hard and soft >= no_d - 0.01
    verdict(11, ok, f"soft OA {soft:.4f} >= hard {hard:.4f}; with first derivative {soft:.4f} vs without {no_d:.4f} (drop <= 0.01)")
