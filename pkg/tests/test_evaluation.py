import csv
import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from traverse_da.core import Pose6DoF
from traverse_da.evaluation import (
    Criterion,
    EvalConfig,
    average_precision,
    bev_intersection,
    bev_iou,
    center_distance,
    clip_polygon,
    headline,
    iou_3d,
    match_detections,
    metric_report,
    polygon_area,
    pr_curves,
    write_metrics,
    write_pr_csv,
)

from conftest import box, det


def envelope_ap(tp, n_gt, positions=40, exact=False):
    """Brute force: mean over r of the max precision at any recall >= r.

    Recall comparisons use exact fractions. With exact=False the selected
    precisions are float quotients averaged by numpy, which makes the result
    bit-comparable with a vectorised implementation.
    """
    hits = 0
    pts = []
    for k, t in enumerate(tp, 1):
        hits += bool(t)
        pts.append((Fraction(hits, n_gt), hits, k))
    picked = []
    for i in range(1, positions + 1):
        r = Fraction(i, positions)
        cands = [(Fraction(h, k) if exact else h / k) for rec, h, k in pts if rec >= r]
        picked.append(max(cands, default=0))
    if exact:
        return float(sum(picked, Fraction(0)) / positions)
    return float(np.mean(np.asarray(picked, dtype=np.float64)))


def mc_bev_iou(a, b, rng, n=200_000):
    ca, cb = a.bev_corners(), b.bev_corners()
    lo = np.minimum(ca.min(0), cb.min(0))
    hi = np.maximum(ca.max(0), cb.max(0))
    pts = rng.uniform(lo, hi, (n, 2))

    def inside(bx, p):
        c, s = math.cos(bx.yaw), math.sin(bx.yaw)
        d = p - np.asarray(bx.center[:2])
        u = d @ np.array([c, s])
        v = d @ np.array([-s, c])
        return (np.abs(u) <= bx.size[0] / 2) & (np.abs(v) <= bx.size[1] / 2)

    ia, ib = inside(a, pts), inside(b, pts)
    return np.count_nonzero(ia & ib) / max(np.count_nonzero(ia | ib), 1)


def random_box(rng):
    return box(center=(*rng.uniform(-2, 2, 2), 0.0), size=(*rng.uniform(0.5, 4, 2), 1.0), yaw=float(rng.uniform(-math.pi, math.pi)))


# --- geometry ----------------------------------------------------------------------


def test_hand_cases():
    a = box(size=(1, 1, 1))
    b = box(center=(0.5, 0, 0), size=(1, 1, 1))
    assert abs(bev_iou(a, b) - 1 / 3) < 1e-12
    za = box(center=(0, 0, 0.5), size=(1, 1, 1))
    zb = box(center=(0, 0, 1.0), size=(1, 1, 1))
    assert bev_iou(za, zb) == pytest.approx(1.0, abs=1e-12)
    assert abs(iou_3d(za, zb) - 1 / 3) < 1e-12
    g = box()
    d = det(center=(1.5, 0, 0))
    assert center_distance(d, g) == 1.5
    assert not match_detections([d], [g], Criterion("distance", 1.0))[1][0]
    assert match_detections([d], [g], Criterion("distance", 2.0))[1][0]


def test_polygon_helpers():
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    assert polygon_area(sq) == 1.0
    assert polygon_area(sq[::-1]) == -1.0  # signed by orientation
    inter = clip_polygon(sq, sq + 0.5)
    assert polygon_area(inter) == pytest.approx(0.25, abs=1e-12)
    assert len(clip_polygon(sq, sq + 5)) == 0


def test_identical_and_disjoint():
    a = box(size=(4, 2, 1.5), yaw=0.3)
    assert bev_iou(a, a) == pytest.approx(1.0, abs=1e-12)
    assert iou_3d(a, a) == pytest.approx(1.0, abs=1e-12)
    assert bev_iou(a, box(center=(50, 0, 0))) == 0.0
    assert bev_intersection(a, box(center=(50, 0, 0))) == 0.0


def test_iou_against_monte_carlo(rng):
    for _ in range(20):
        a, b = random_box(rng), random_box(rng)
        assert abs(bev_iou(a, b) - mc_bev_iou(a, b, rng)) < 1e-2


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_iou_invariances(seed):
    rng = np.random.default_rng(seed)
    a, b = random_box(rng), random_box(rng)
    v = bev_iou(a, b)
    assert abs(v - bev_iou(b, a)) < 1e-12
    flipped = box(center=a.center, size=a.size, yaw=a.yaw + math.pi)
    assert abs(v - bev_iou(flipped, b)) < 1e-12
    pose = Pose6DoF.from_yaw(float(rng.uniform(-3, 3)), rng.uniform(-100, 100, 3))
    assert abs(v - bev_iou(a.transformed(pose), b.transformed(pose))) < 1e-9
    assert 0.0 <= v <= 1.0


# --- matching ----------------------------------------------------------------------


def test_match_one_per_gt():
    g = box()
    d1, d2 = det(conf=0.9), det(center=(0.1, 0, 0), conf=0.4)
    dets, tp, which, _, used = match_detections([d2, d1], [g], Criterion("bev", 0.5))
    assert dets[0] is d1 and tp.tolist() == [True, False]
    assert which.tolist() == [0, -1] and used.tolist() == [True]


def test_iou_threshold_is_inclusive():
    g = box(size=(1, 1, 1))
    d = det(center=(0.5, 0, 0), size=(1, 1, 1))
    assert match_detections([d], [g], Criterion("bev", 1 / 3 - 1e-9))[1][0]
    assert not match_detections([d], [g], Criterion("bev", 1 / 3 + 1e-9))[1][0]


def test_frontal_only_drops_rear_boxes():
    pose = Pose6DoF.identity()
    g = [box(center=(10, 0, 0)), box(center=(-10, 0, 0))]
    d = [det(center=(-10, 0, 0), conf=0.9)]
    _, tp, _, gts, _ = match_detections(d, g, Criterion("bev", 0.5), frontal_only=True, pose=pose)
    assert len(tp) == 0 and len(gts) == 1
    with pytest.raises(ValueError):
        match_detections(d, g, Criterion("bev", 0.5), frontal_only=True)
    with pytest.raises(ValueError):
        Criterion("volume", 0.5)


# --- average precision -------------------------------------------------------------


def test_ap_examples():
    assert average_precision([True] * 3, 3) == 1.0
    assert average_precision([], 5) == 0.0
    assert math.isnan(average_precision([], 0))
    assert average_precision([True, False, True], 2) == pytest.approx(5 / 6, abs=1e-15)
    assert average_precision([True, False, True], 2) == envelope_ap([True, False, True], 2)
    with pytest.raises(ValueError):
        average_precision([], -1)


def test_ap_matches_envelope_oracle(rng):
    for _ in range(50):
        n = int(rng.integers(1, 30))
        tp = rng.random(n) < rng.uniform(0.1, 0.9)
        n_gt = int(tp.sum() + rng.integers(0, 5)) or 1
        assert average_precision(tp, n_gt) == envelope_ap(tp, n_gt)
        assert abs(average_precision(tp, n_gt) - envelope_ap(tp, n_gt, exact=True)) < 1e-15


@settings(max_examples=200)
@given(st.lists(st.booleans(), max_size=25), st.integers(0, 5))
def test_ap_monotone(seq, extra):
    n_gt = sum(seq) + extra + 1
    base = average_precision(seq, n_gt)
    assert average_precision(seq + [True], n_gt) >= base - 1e-15
    assert average_precision(seq + [False], n_gt) <= base + 1e-15


# --- reports -----------------------------------------------------------------------


def _gts():
    return {
        "a": [box(center=(10, 0, 0), size=(4, 2, 1.5)), box(center=(40, 5, 0), size=(4, 2, 1.5))],
        "b": [box(center=(60, -3, 0), size=(4, 2, 1.5)), box(center=(5, 1, 0), size=(0.7, 0.7, 1.7), cls=1)],
    }


def _as_dets(gts, keep=lambda b: True):
    return {k: [det(center=b.center, size=b.size, yaw=b.yaw, cls=b.cls, conf=0.9) for b in v if keep(b)] for k, v in gts.items()}


def test_perfect_detector_scores_one():
    gts = _gts()
    rep = metric_report(_as_dets(gts), gts)
    for cls, table in rep.items():
        for name, cell in table.items():
            if cell["num_gt"]:
                assert all(cell[m] == 1.0 for m in cell if m != "num_gt")
            else:
                assert all(cell[m] is None for m in cell if m != "num_gt")
    assert rep["Car"]["0-80"]["num_gt"] == 3 and rep["Cyclist"]["0-80"]["num_gt"] == 0


def test_near_field_detector_bins():
    gts = _gts()
    rep = metric_report(_as_dets(gts, lambda b: math.hypot(*b.center[:2]) < 30), gts)
    car = rep["Car"]
    assert car["0-30"]["ap_bev_primary"] > 0
    assert car["30-50"]["ap_bev_primary"] == 0 and car["50-80"]["ap_bev_primary"] == 0
    assert list(car) == ["0-30", "30-50", "50-80", "0-80"]


def test_report_files(tmp_path):
    gts = _gts()
    dets = _as_dets(gts)
    rep = metric_report(dets, gts)
    write_metrics(tmp_path / "m.json", rep)
    assert json.loads((tmp_path / "m.json").read_text()) == rep
    curves = pr_curves(dets, gts)
    write_pr_csv(tmp_path / "pr.csv", curves["Car"])
    rows = list(csv.reader(open(tmp_path / "pr.csv")))
    assert rows[0] == ["confidence", "precision", "recall"] and len(rows) == 4
    assert headline(rep) == 1.0
    assert math.isnan(headline(rep, "Cyclist"))


def test_eval_config_validation():
    with pytest.raises(ValueError):
        EvalConfig(iou_primary=(0.7, 0.0, 0.5))
    with pytest.raises(ValueError):
        EvalConfig(depth_bins=((30.0, 0.0),))
    assert EvalConfig().bin_names == ("0-30", "30-50", "50-80", "0-80")
