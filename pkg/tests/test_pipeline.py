import json

import numpy as np
import pytest

from conftest import small_scene
from supertoken.config import load_config
from supertoken.hsi_io import read_class_map, write_cube, write_label_map
from supertoken.pipeline import (
    PipelineError, bench, encode, op_counts, read_assignment, run_pipeline, write_assignment,
)

ARTIFACTS = ["derivatives", "features", "assignment", "tokens", "soft_labels", "checkpoint", "class_map", "metrics"]


def make_inputs(tmp_path):
    cube, labels = small_scene()
    write_cube(cube, tmp_path / "scene.hdr")
    write_label_map(labels, tmp_path / "gt.pgm")
    return cube, labels


def small_config(tmp_path, out="out", **extra):
    settings = {
        "input.cube": str(tmp_path / "scene.hdr"), "input.labels": str(tmp_path / "gt.pgm"),
        "output.dir": str(tmp_path / out), "cluster.grid": "4", "cluster.per_cell": "1",
        "features.dim": "8", "features.token_dim": "8", "model.heads": "2", "model.blocks": "1",
        "train.epochs": "20", "train.batch": "1", "train.lr": "1e-3",
    }
    settings.update(extra)
    return load_config(None, settings)


def test_pipeline_writes_all_artifacts(tmp_path):
    make_inputs(tmp_path)
    manifest = run_pipeline(small_config(tmp_path))
    assert [a["name"] for a in manifest["artifacts"]] == ARTIFACTS
    for art in manifest["artifacts"]:
        for f in art["files"]:
            assert (tmp_path / "out" / f["path"]).stat().st_size == f["bytes"]
    assert json.loads((tmp_path / "out" / "manifest.json").read_text()) == manifest


def test_pipeline_is_deterministic(tmp_path):
    make_inputs(tmp_path)
    run_pipeline(small_config(tmp_path, "a"))
    run_pipeline(small_config(tmp_path, "b"))
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_pipeline_region_consistency(tmp_path):
    make_inputs(tmp_path)
    run_pipeline(small_config(tmp_path))
    pred = read_class_map(tmp_path / "out" / "class_map.pgm").class_ids.ravel()
    assign = read_assignment(tmp_path / "out" / "assignment.pgm").flat()
    for tok in np.unique(assign):
        assert len(np.unique(pred[assign == tok])) == 1


def test_missing_cube_fails_before_compute(tmp_path):
    cfg = small_config(tmp_path)
    with pytest.raises(PipelineError, match="scene.hdr") as info:
        run_pipeline(cfg)
    assert info.value.stage == "config"
    assert not (tmp_path / "out").exists()


def test_stage_errors_are_tagged(tmp_path):
    make_inputs(tmp_path)
    cfg = small_config(tmp_path, **{"cluster.grid": "64"})
    with pytest.raises(PipelineError) as info:
        run_pipeline(cfg)
    assert info.value.stage == "cluster"
    # artifacts from earlier stages stay on disk
    assert (tmp_path / "out" / "semantic.hdr").exists()


def test_checkpoint_reuse(tmp_path):
    make_inputs(tmp_path)
    run_pipeline(small_config(tmp_path, "a"))
    cfg = small_config(tmp_path, "b", **{"input.checkpoint": str(tmp_path / "a" / "classifier.ckpt")})
    run_pipeline(cfg)
    assert (tmp_path / "a" / "class_map.pgm").read_bytes() == (tmp_path / "b" / "class_map.pgm").read_bytes()
    assert not (tmp_path / "b" / "train_log.csv").exists()


@pytest.mark.parametrize("grid, per_cell", [(4, 1), (4, 4), (8, 1), (2, 9)])
def test_token_count(grid, per_cell):
    cube, _ = small_scene()
    cfg = load_config(None, {"cluster.grid": str(grid), "cluster.per_cell": str(per_cell), "features.dim": "8", "features.token_dim": "8"})
    assert encode(cube, cfg).tokens.count == grid * grid * per_cell


def test_projection_used_only_when_dims_differ():
    cube, _ = small_scene()
    same = encode(cube, load_config(None, {"cluster.grid": "2", "features.dim": "8", "features.token_dim": "8"}))
    diff = encode(cube, load_config(None, {"cluster.grid": "2", "features.dim": "6", "features.token_dim": "8"}))
    assert same.semantic.dim == diff.semantic.dim == 8


def test_assignment_roundtrip(tmp_path):
    from supertoken.cluster import AssignmentMap

    a = AssignmentMap(np.array([[0, 3], [1023, 7]]), 1024)
    write_assignment(a, tmp_path / "a.pgm")
    back = read_assignment(tmp_path / "a.pgm", 1024)
    assert np.array_equal(back.indices, a.indices) and back.num_centers == 1024


def test_bench_counters(tmp_path):
    cube, _ = small_scene()
    cfg = load_config(None, {"cluster.grid": "4", "cluster.per_cell": "1", "features.dim": "8", "features.token_dim": "8", "model.heads": "2"})
    one = bench(cfg, repeats=1, cube=cube, num_classes=4)
    three = bench(cfg, repeats=3, cube=cube, num_classes=4)
    assert one.op_counts == three.op_counts
    assert all(v >= 0 for v in three.stage_ms.values())
    assert three.stage_ms["total"] >= max(three.stage_ms[s] for s in ("derivatives", "features", "clustering"))
    assert three.pixels_per_second > 0
    with pytest.raises(ValueError):
        bench(cfg, repeats=0, cube=cube, num_classes=4)


def test_association_ops_scale_with_area():
    cfg = load_config(None, {"cluster.grid": "4", "cluster.per_cell": "4"})
    a = op_counts(32, 32, 16, cfg, 4)["clustering"]
    b = op_counts(32, 64, 16, cfg, 4)["clustering"]
    assert all(b[k] == 2 * a[k] for k in a)


def test_tokens_agree_across_thread_counts():
    from threadpoolctl import threadpool_limits

    cube, _ = small_scene()
    cfg = load_config(None, {"cluster.grid": "4", "cluster.per_cell": "4", "features.dim": "8", "features.token_dim": "8"})
    with threadpool_limits(limits=1):
        one = encode(cube, cfg)
    many = encode(cube, cfg)
    assert np.array_equal(one.clustering.assignment.indices, many.clustering.assignment.indices)
    np.testing.assert_allclose(many.tokens.features, one.tokens.features, rtol=1e-9, atol=0)
