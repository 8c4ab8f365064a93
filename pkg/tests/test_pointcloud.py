import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from distdpo import metrics
from distdpo.pointcloud import (PointCloudError, SceneRecipe, ScenePair, XYZParseError,
                                as_cloud, load_scene_dir, load_xyz, replicate_scan,
                                save_scene, save_xyz, synth_scene, voxelize)


def test_replicate_identity():
    out = replicate_scan([(1, 2, 3)], 1)
    np.testing.assert_array_equal(out, [[1, 2, 3]])


def test_replicate_copy_major():
    scan = np.array([[0.0, 0, 0], [1, 1, 1]])
    out = replicate_scan(scan, 3)
    assert out.shape == (6, 3)
    for k in range(3):
        np.testing.assert_array_equal(out[2 * k:2 * k + 2], scan)


def test_replicate_dense_scan_size():
    scan = np.random.default_rng(0).normal(size=(1000, 3))
    assert replicate_scan(scan, 10).shape == (10000, 3)


@pytest.mark.parametrize("K", [0, -1, 1.5])
def test_replicate_rejects_bad_K(K):
    with pytest.raises(PointCloudError):
        replicate_scan([(0, 0, 0)], K)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(0, 20), K=st.integers(1, 64))
def test_replicate_count(n, K):
    c = np.random.default_rng(n).normal(size=(n, 3))
    assert replicate_scan(c, K).shape[0] == K * n


@pytest.mark.parametrize("pts, cells", [
    ([(0.1, 0.1, 0.1)], {(0, 0, 0)}),
    ([(-0.1, 0, 0)], {(-1, 0, 0)}),
    ([(0.1, 0.1, 0.1), (0.2, 0.2, 0.2)], {(0, 0, 0)}),
])
def test_voxelize_examples(pts, cells):
    assert voxelize(pts, 0.5).occupied == cells


@pytest.mark.parametrize("res", [0.0, -0.5])
def test_voxelize_rejects_resolution(res):
    with pytest.raises(PointCloudError):
        voxelize([(0, 0, 0)], res)


def test_voxelize_permutation_invariant(rng):
    c = rng.uniform(-3, 3, size=(200, 3))
    a = voxelize(c, 0.2)
    b = voxelize(c[rng.permutation(200)], 0.2)
    assert a.occupied == b.occupied
    assert voxelize(c, 0.2) == a


def test_as_cloud_rejects_nan():
    with pytest.raises(PointCloudError):
        as_cloud([(0, np.nan, 0)])


def test_synth_deterministic():
    rec = SceneRecipe()
    a, b = synth_scene(rec, 3), synth_scene(rec, 3)
    np.testing.assert_array_equal(a.sparse, b.sparse)
    np.testing.assert_array_equal(a.ground_truth, b.ground_truth)
    assert not np.array_equal(a.ground_truth, synth_scene(rec, 4).ground_truth)


@pytest.mark.parametrize("family", ["ground-boxes", "two-clusters"])
def test_synth_sparse_is_subset(family):
    scene = synth_scene(SceneRecipe(family=family, n_gt=512, n_sparse=64), 7)
    assert scene.sparse.shape == (64, 3)
    gt_rows = {tuple(r) for r in scene.ground_truth.tolist()}
    assert all(tuple(r) in gt_rows for r in scene.sparse.tolist())
    # multiset inclusion: sparse rows come from distinct ground-truth indices
    gt_list = scene.ground_truth.tolist()
    for r in scene.sparse.tolist():
        gt_list.remove(r)


def test_synth_two_clusters_cd_positive():
    scene = synth_scene(SceneRecipe(family="two-clusters", n_gt=200, n_sparse=20), 1)
    assert metrics.chamfer(scene.sparse, scene.ground_truth) > 0


def test_recipe_rejects_n_above_m():
    with pytest.raises(PointCloudError):
        SceneRecipe(n_gt=10, n_sparse=11)


def test_scene_pair_invariants():
    with pytest.raises(PointCloudError):
        ScenePair(np.zeros((3, 3)), np.zeros((2, 3)))
    with pytest.raises(PointCloudError):
        ScenePair(np.zeros((0, 3)), np.zeros((2, 3)))


def test_load_xyz_basic(tmp_path):
    p = tmp_path / "a.xyz"
    p.write_text("# header\n0 0 0\n1 2 3\n")
    np.testing.assert_array_equal(load_xyz(p), [[0, 0, 0], [1, 2, 3]])


def test_load_xyz_empty(tmp_path):
    p = tmp_path / "e.xyz"
    p.write_text("")
    assert load_xyz(p).shape == (0, 3)


@pytest.mark.parametrize("body, lineno", [("a b c\n", 1), ("0 0 0\n1 2\n", 2), ("0 0 0\n#c\n1 x 2\n", 3)])
def test_load_xyz_parse_error_line(tmp_path, body, lineno):
    p = tmp_path / "bad.xyz"
    p.write_text(body)
    with pytest.raises(XYZParseError) as exc:
        load_xyz(p)
    assert exc.value.lineno == lineno


def test_xyz_round_trip(tmp_path, rng):
    c = rng.normal(scale=50.0, size=(100, 3))
    p = tmp_path / "r.xyz"
    save_xyz(c, p, header="test cloud")
    back = load_xyz(p)
    np.testing.assert_allclose(back, c, rtol=1e-12, atol=0)
    np.testing.assert_array_equal(back, c)


def test_scene_dir_round_trip(tmp_path):
    scenes = [synth_scene(SceneRecipe(n_gt=64, n_sparse=8), s) for s in range(3)]
    for s in scenes:
        save_scene(s, tmp_path)
    back = load_scene_dir(tmp_path)
    assert len(back) == 3
    by_id = {s.scene_id: s for s in back}
    for s in scenes:
        np.testing.assert_array_equal(by_id[s.scene_id].ground_truth, s.ground_truth)
