import filecmp
import itertools
import math

import numpy as np
import pytest

from traverse_da.core import points_in_box
from traverse_da.evaluation import bev_intersection
from traverse_da.ingest import load_manifest, load_scene
from traverse_da.ppscore import count_matrix
from traverse_da.synthgen import (
    DYNAMIC,
    GROUND,
    STATIC,
    DomainShiftSpec,
    WorldSpec,
    generate,
    generate_dataset,
    oracle_masks,
    shift_from_dict,
    world_from_dict,
)

SMALL = WorldSpec(seed=11, n_locations=2, traversals=3, scans_per_traversal=4, density=4, max_range=30)


def tree_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(tree_equal(a / d, b / d) for d in cmp.common_dirs)


def test_write_is_byte_identical(tmp_path):
    generate_dataset(SMALL, DomainShiftSpec(), tmp_path / "a")
    generate_dataset(SMALL, DomainShiftSpec(), tmp_path / "b", threads=3)
    assert tree_equal(tmp_path / "a", tmp_path / "b")


def test_manifest_counts(tmp_path):
    m = generate_dataset(SMALL, None, tmp_path / "d")
    assert len(m.locations) == 2
    assert all(len(t) == 3 for t in m.locations.values())
    assert len(m.scenes) == 2 * 3 * 4


def test_written_scene_matches_memory(tmp_path):
    ds = generate(SMALL)
    m = ds.write(tmp_path / "d")
    rec = ds.scene_records[5]
    mem = ds.scene(rec)
    disk = load_scene(load_manifest(tmp_path / "d"), rec.scene_id)
    assert np.max(np.abs(mem.cloud.points - disk.cloud.points)) <= 5e-7  # 6 decimals on disk
    assert len(disk.gt_boxes) == len(mem.gt_boxes)
    masks = oracle_masks(m)
    assert np.array_equal(masks[rec.scene_id][0], ds.mask(rec.scene_id)[0])


def test_masks_align_with_clouds():
    ds = generate(SMALL)
    masks = oracle_masks(ds)
    for s in ds.scenes():
        kinds, oids = masks[s.scene_id]
        assert len(kinds) == len(oids) == len(s.cloud)
        assert set(np.unique(kinds)) <= {GROUND, STATIC, DYNAMIC}
        assert np.all((oids >= 0) == (kinds == DYNAMIC))


def test_dynamic_points_belong_to_their_box():
    ds = generate(SMALL)
    for s in ds.scenes():
        kinds, oids = ds.mask(s.scene_id)
        pts = s.world_cloud().points
        boxes = ds.objects[s.location_id][s.traversal_id]
        for b in boxes:
            inside = points_in_box(b, pts)
            assert not np.any(inside & (kinds == STATIC))
        for b in s.gt_boxes:
            assert np.count_nonzero(points_in_box(b, pts)) >= SMALL.min_gt_points


def test_static_world_persists_across_traversals():
    world = WorldSpec(seed=3, n_locations=1, density=40, max_range=30, class_frequency=(0.0, 0.0, 0.0))
    ds = generate(world)
    stores = ds.stores()
    for s in ds.scenes():
        kinds, _ = ds.mask(s.scene_id)
        assert not np.any(kinds == DYNAMIC)
        c = count_matrix(stores[s.location_id], s.world_cloud().points[kinds != GROUND], 0.5)
        assert np.all(c > 0)


def test_car_scale_shift_on_mean_length():
    world = WorldSpec(seed=5, n_locations=4)
    src = [b.size[0] for s in generate(world).scenes() for b in s.gt_boxes if b.cls == 0]
    tgt = [b.size[0] for s in generate(world, DomainShiftSpec(1.15)).scenes() for b in s.gt_boxes if b.cls == 0]
    assert len(src) >= 200 and len(tgt) >= 200
    assert np.mean(tgt) / np.mean(src) == pytest.approx(1.15, rel=0.02)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_objects_never_overlap_and_move(seed):
    world = WorldSpec(seed=seed, n_locations=2, class_frequency=(6.0, 2.0, 2.0))
    ds = generate(world)
    for lid, travs in ds.objects.items():
        for boxes in travs.values():
            for a, b in itertools.combinations(boxes, 2):
                assert bev_intersection(a, b) == 0.0
        tids = list(travs)
        for t1, t2 in itertools.combinations(tids, 2):
            for a in travs[t1]:
                for b in travs[t2]:
                    assert math.dist(a.center[:2], b.center[:2]) >= world.min_displacement


def test_spec_dicts():
    w = world_from_dict({"seed": 4, "hedge_height": [1.0, 2.0]})
    assert w.hedge_height == (1.0, 2.0)
    with pytest.raises(ValueError):
        world_from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        shift_from_dict({"car_scale": 0})
    with pytest.raises(ValueError):
        WorldSpec(traversals=1)
