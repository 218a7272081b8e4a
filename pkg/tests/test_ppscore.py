import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from traverse_da.core import Frame, PointCloud, Pose6DoF, Scene
from traverse_da.ingest import TraversalStore
from traverse_da.ppscore import (
    PPConfig,
    count_vector,
    normalize_counts,
    pp_score,
    pp_scores,
    score_cloud,
    score_scene,
)

counts_st = st.lists(st.integers(0, 50), min_size=2, max_size=8)


def store_from(arrays, loc="L"):
    return TraversalStore(loc, {f"t{i}": PointCloud(a, Frame.WORLD) for i, a in enumerate(arrays)})


def test_count_vector_examples():
    far = np.full((1, 3), 100.0)
    ring = np.array([[0.1, 0, 0], [-0.1, 0, 0], [0, 0.1, 0], [0, -0.1, 0]])
    s = store_from([np.vstack([ring, far])] * 3)
    assert count_vector(s, (0, 0, 0)).tolist() == [4, 4, 4]
    assert count_vector(s, (50, 50, 50)).tolist() == [0, 0, 0]
    assert count_vector(s, (0, 0, 0), exclude="t1").tolist() == [4, 4]


def test_exclusion_needs_two_remaining():
    s = store_from([np.zeros((1, 3))] * 2)
    with pytest.raises(ValueError):
        count_vector(s, (0, 0, 0), exclude="t0")


def test_normalize_examples():
    assert normalize_counts([4, 4, 0, 0]).tolist() == [0.5, 0.5, 0, 0]
    assert normalize_counts([7, 0, 0]).tolist() == [1, 0, 0]
    assert normalize_counts([0, 0]).tolist() == [0, 0]


def test_score_examples():
    assert pp_score([1, 1, 1, 1, 1]) == 1.0
    assert pp_score([7, 0, 0]) == 0.0
    assert pp_score([0, 0, 0]) == 0.0
    assert pp_score([4, 4, 0, 0]) == 0.5
    assert pp_score([3, 3, 3, 0, 0]) == pytest.approx(math.log(3) / math.log(5), abs=1e-15)


def test_score_against_direct_entropy(rng):
    c = rng.integers(0, 20, (200, 5))
    c[0] = 0
    got = pp_scores(c)
    for row, tau in zip(c, got):
        s = row.sum()
        if s == 0:
            assert tau == 0.0
            continue
        p = row[row > 0] / s
        assert tau == pytest.approx(-(p * np.log(p)).sum() / math.log(5), abs=1e-12)


@given(counts_st)
def test_tau_in_unit_interval(c):
    assert 0.0 <= pp_score(c) <= 1.0


@given(counts_st, st.randoms(use_true_random=False))
def test_permutation_invariance(c, rnd):
    perm = list(c)
    rnd.shuffle(perm)
    assert pp_score(perm) == pp_score(c)


@given(counts_st, st.integers(1, 100))
def test_scaling_invariance(c, k):
    assert pp_score([k * v for v in c]) == pytest.approx(pp_score(c), abs=1e-12)


@given(st.integers(2, 8), st.integers(1, 1000))
def test_uniform_is_one(T, v):
    assert pp_score([v] * T) == 1.0


@given(st.integers(2, 8), st.integers(1, 1000), st.integers(0, 7))
def test_single_nonzero_is_zero(T, v, at):
    c = [0] * T
    c[at % T] = v
    assert pp_score(c) == 0.0


def test_wall_scene_scores_near_one(rng):
    # an equally dense wall in every traversal
    def wall():
        y = rng.uniform(-2, 2, 4000)
        z = rng.uniform(0, 2, 4000)
        return np.column_stack([np.full(4000, 5.0) + rng.normal(0, 0.01, 4000), y, z])

    store = store_from([wall() for _ in range(5)])
    pose = Pose6DoF.identity()
    q = wall()[:300]
    sc = Scene("s", "L", "t0", PointCloud(q[(np.abs(q[:, 1]) < 1.5) & (q[:, 2] > 0.4) & (q[:, 2] < 1.6)]), pose)
    f = score_scene(sc, store)
    assert f.tau.min() >= 0.9 and f.tau.max() <= 1.0


def test_dynamic_and_empty_points_score_zero():
    base = np.zeros((5, 3))
    obj = np.array([[10.0, 0, 0]] * 3)
    store = store_from([np.vstack([base, obj]), base + 0.01, base - 0.01])
    f = score_cloud(PointCloud(np.array([[10.0, 0, 0], [50.0, 0, 0]]), Frame.WORLD), store)
    assert f.tau.tolist() == [0.0, 0.0]
    assert f.counts[0].tolist() == [3, 0, 0]
    assert f.probs[1].tolist() == [0.0, 0.0, 0.0]


def test_score_scene_location_mismatch():
    store = store_from([np.zeros((1, 3))] * 2, loc="A")
    sc = Scene("s", "B", "t0", PointCloud(np.zeros((1, 3))), Pose6DoF.identity())
    with pytest.raises(ValueError):
        score_scene(sc, store)
    with pytest.raises(KeyError):
        score_scene(sc, {"A": store})


def test_sensor_frame_cloud_rejected():
    store = store_from([np.zeros((1, 3))] * 2)
    with pytest.raises(ValueError):
        score_cloud(PointCloud(np.zeros((1, 3)), Frame.SENSOR), store)


def test_exclude_self_uses_other_traversals():
    base = np.zeros((4, 3))
    store = store_from([base, base, base])
    sc = Scene("s", "L", "t1", PointCloud(np.zeros((1, 3))), Pose6DoF.identity())
    f = score_scene(sc, store, PPConfig(exclude_self=True))
    assert f.traversal_ids == ("t0", "t2") and f.T == 2
    assert f.tau.tolist() == [1.0]


def test_threaded_counts_identical(rng):
    arrays = [rng.uniform(0, 5, (3000, 3)) for _ in range(3)]
    store = store_from(arrays)
    q = PointCloud(rng.uniform(0, 5, (9000, 3)), Frame.WORLD)
    a = score_cloud(q, store)
    from traverse_da.ppscore import score_points

    b = score_points(store, q.points, PPConfig(), threads=3)
    assert np.array_equal(a.counts, b.counts) and np.array_equal(a.tau, b.tau)


def test_config_validation():
    with pytest.raises(ValueError):
        PPConfig(radius=0)
    with pytest.raises(ValueError):
        PPConfig(max_traversals=1)
