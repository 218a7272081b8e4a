import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from traverse_da.core import Frame, PointCloud, Provenance, transform_cloud
from traverse_da.ingest import (
    DatasetError,
    TraversalStore,
    aggregate_scans,
    box_from_json,
    box_to_json,
    build_all_stores,
    class_counts,
    load_manifest,
    load_scenes,
    read_boxes,
    read_pose,
    read_xyz,
    voxel_downsample,
    write_boxes,
    write_pose,
    write_xyz,
)
from traverse_da.synthgen import WorldSpec, generate

from conftest import box, random_pose

coords = hnp.arrays(np.float64, st.tuples(st.integers(0, 30), st.just(3)),
                    elements=st.floats(-1e4, 1e4, allow_nan=False))


@settings(max_examples=50, deadline=None)
@given(coords)
def test_xyz_round_trip(tmp_path_factory, pts):
    p = tmp_path_factory.mktemp("xyz") / "c.xyz"
    write_xyz(p, pts)
    back = read_xyz(p)
    assert back.shape == pts.shape
    assert np.all(np.abs(back - pts) <= 5e-7 + 1e-12 * np.abs(pts))


@pytest.mark.parametrize(
    "text, line",
    [("1 2 3\n4 5\n", 2), ("1 2 3\n1 2 x\n", 2), ("1 2 nan\n", 1), ("1 2 3 4\n", 1), ("1\t2 3\n", 1)],
)
def test_malformed_xyz_names_the_line(tmp_path, text, line):
    p = tmp_path / "bad.xyz"
    p.write_text(text)
    with pytest.raises(DatasetError, match=f":{line}:"):
        read_xyz(p)


def test_empty_xyz(tmp_path):
    p = tmp_path / "e.xyz"
    p.write_text("")
    assert read_xyz(p).shape == (0, 3)


def test_pose_round_trip(tmp_path, rng):
    pose = random_pose(rng)
    write_pose(tmp_path / "p.json", pose)
    assert read_pose(tmp_path / "p.json") == pose
    (tmp_path / "bad.json").write_text(json.dumps({"rotation": np.eye(3).tolist()}))
    with pytest.raises(DatasetError):
        read_pose(tmp_path / "bad.json")
    (tmp_path / "skew.json").write_text(json.dumps({"rotation": (2 * np.eye(3)).tolist(), "translation": [0, 0, 0]}))
    with pytest.raises(DatasetError):
        read_pose(tmp_path / "skew.json")


def test_boxes_round_trip(tmp_path):
    boxes = [box(center=(1, 2, 3), size=(4, 2, 1.5), yaw=0.3), box(cls=2, yaw=-1.0)]
    write_boxes(tmp_path / "b.json", boxes)
    assert read_boxes(tmp_path / "b.json") == boxes
    d = box_to_json(boxes[0])
    assert d["class"] == "Car"
    det = box_from_json({**d, "score": 0.25}, Provenance.DETECTION)
    assert det.confidence == 0.25 and det.provenance == Provenance.DETECTION
    (tmp_path / "bad.json").write_text(json.dumps([{"center": [0, 0, 0], "size": [1, 1, 1], "yaw": 0, "class": "Truck"}]))
    with pytest.raises(DatasetError):
        read_boxes(tmp_path / "bad.json")
    (tmp_path / "neg.json").write_text(json.dumps([{"center": [0, 0, 0], "size": [-1, 1, 1], "yaw": 0, "class": "Car"}]))
    with pytest.raises(DatasetError):
        read_boxes(tmp_path / "neg.json")


# --- manifests ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def written(tmp_path_factory):
    ds = generate(WorldSpec(seed=7, n_locations=2, traversals=3, scans_per_traversal=3, density=3, max_range=25))
    root = tmp_path_factory.mktemp("ds")
    return ds, ds.write(root), root


def test_manifest_loads_and_sorts(written):
    ds, m, root = written
    assert list(m.locations) == sorted(m.locations)
    assert [r.scene_id for r in m.scenes] == sorted(r.scene_id for r in m.scenes)
    assert m.traversal_ids("loc000") == ["t00", "t01", "t02"]
    with pytest.raises(KeyError):
        m.scene("nope")
    assert load_manifest(root, require_pp=True).scenes == m.scenes


def _edit_manifest(root, tmp_path, fn):
    raw = json.loads((root / "manifest.json").read_text())
    fn(raw)
    out = tmp_path / "m"
    out.mkdir()
    for item in root.iterdir():
        if item.name != "manifest.json":
            (out / item.name).symlink_to(item)
    (out / "manifest.json").write_text(json.dumps(raw))
    return out


@pytest.mark.parametrize(
    "edit, error",
    [
        (lambda r: r.pop("scenes"), DatasetError),
        (lambda r: r["scenes"].append(dict(r["scenes"][0])), DatasetError),
        (lambda r: r["scenes"][0].update(location="elsewhere"), DatasetError),
        (lambda r: r["scenes"][0].update(scan_index=99), DatasetError),
        (lambda r: r["locations"][0]["traversals"][0]["scans"][0].update(cloud="missing.xyz"), FileNotFoundError),
    ],
)
def test_manifest_errors(written, tmp_path, edit, error):
    _, _, root = written
    with pytest.raises(error):
        load_manifest(_edit_manifest(root, tmp_path, edit))


def test_missing_and_invalid_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path)
    (tmp_path / "manifest.json").write_text("{")
    with pytest.raises(DatasetError):
        load_manifest(tmp_path)


def test_require_pp_rejects_single_traversal(written, tmp_path):
    _, _, root = written

    def single(r):
        r["locations"][0]["traversals"] = r["locations"][0]["traversals"][:1]
        lid = r["locations"][0]["id"]
        keep = r["locations"][0]["traversals"][0]["id"]
        r["scenes"] = [s for s in r["scenes"] if s["location"] != lid or s["traversal"] == keep]

    out = _edit_manifest(root, tmp_path, single)
    load_manifest(out)
    with pytest.raises(DatasetError):
        load_manifest(out, require_pp=True)


def test_disk_stores_match_memory(written):
    ds, m, _ = written
    disk = build_all_stores(m, threads=2)
    mem = ds.stores()
    assert list(disk) == list(mem)
    for lid in disk:
        for tid in disk[lid].traversal_ids:
            a, b = disk[lid].clouds[tid].points, mem[lid].clouds[tid].points
            assert a.shape == b.shape and np.max(np.abs(a - b)) < 1e-5
    scenes = load_scenes(m)
    assert class_counts(scenes)["Car"] == sum(len(s.gt_boxes) for s in ds.scenes())


# --- aggregation -------------------------------------------------------------------


def test_aggregate_scans_is_world_concatenation(rng):
    clouds = [PointCloud(rng.normal(size=(20, 3))) for _ in range(3)]
    poses = [random_pose(rng) for _ in range(3)]
    agg = aggregate_scans(clouds, poses)
    assert agg.frame == Frame.WORLD
    ref = np.concatenate([transform_cloud(c, p).points for c, p in zip(clouds, poses)])
    assert np.array_equal(agg.points, ref)


def test_voxel_downsample_keeps_first_per_voxel():
    pts = np.array([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2], [1.5, 0, 0], [0.3, 0.05, 0.9]])
    out = voxel_downsample(pts, 1.0)
    assert out.tolist() == [[0.1, 0.1, 0.1], [1.5, 0, 0]]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 2.0))
def test_voxel_downsample_one_per_cell(seed, voxel):
    pts = np.random.default_rng(seed).uniform(-5, 5, (200, 3))
    out = voxel_downsample(pts, voxel)
    cells = np.floor(out / voxel)
    assert len(np.unique(cells, axis=0)) == len(out) == len(np.unique(np.floor(pts / voxel), axis=0))


def test_store_validation():
    w = PointCloud(np.zeros((1, 3)), Frame.WORLD)
    with pytest.raises(DatasetError):
        TraversalStore("l", {"a": w})
    with pytest.raises(DatasetError):
        TraversalStore("l", {"a": w, "b": PointCloud(np.zeros((1, 3)))})
    s = TraversalStore("l", {"a": w, "b": w})
    assert s.index("a", 0.3) is s.index("a", 0.3) and s.T == 2
    assert not math.isnan(s.index("b", 0.3).count_within_many(np.zeros((1, 3)))[0])
