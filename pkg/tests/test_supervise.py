import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from traverse_da.core import LabelSource, PointLabelSet
from traverse_da.supervise import (
    FBSConfig,
    FocalConfig,
    fbs_rewrite,
    focal_loss,
    focal_loss_grad,
    labels_from_boxes,
    sigmoid,
)

from conftest import det

STATES = [(0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1)]


def _branch(tau, y, cfg):
    if tau > cfg.tau_upper:
        return (0, 0, 0)
    if tau < cfg.tau_lower and not any(y):
        return (1, 1, 1)
    return tuple(y)


def test_fbs_examples():
    cases = [(0.9, (1, 0, 0), (0, 0, 0)), (0.1, (0, 0, 0), (1, 1, 1)), (0.5, (0, 1, 0), (0, 1, 0)), (0.1, (1, 0, 0), (1, 0, 0))]
    for tau, y, expect in cases:
        out = fbs_rewrite(PointLabelSet(np.array([y])), np.array([tau]))
        assert tuple(out.labels[0]) == expect
        assert out.source == LabelSource.REWRITTEN_FBS


def test_fbs_truth_table():
    cfg = FBSConfig()
    d = 1e-9
    grid = [0.0, cfg.tau_lower - d, cfg.tau_lower, 0.5, cfg.tau_upper, cfg.tau_upper + d, 1.0]
    taus, ys = [], []
    for t in grid:
        for y in STATES:
            taus.append(t)
            ys.append(y)
    out = fbs_rewrite(PointLabelSet(np.array(ys)), np.array(taus), cfg)
    assert len(taus) == 28
    for t, y, o in zip(taus, ys, out.labels):
        assert tuple(o) == _branch(t, y, cfg)


@settings(max_examples=50)
@given(st.lists(st.tuples(st.floats(0, 1), st.sampled_from(STATES)), min_size=1, max_size=30))
def test_fbs_idempotent_and_degenerate_identity(rows):
    tau = np.array([r[0] for r in rows])
    y = PointLabelSet(np.array([r[1] for r in rows]))
    once = fbs_rewrite(y, tau)
    assert np.array_equal(fbs_rewrite(once, tau).labels, once.labels)
    ident = fbs_rewrite(y, tau, FBSConfig(tau_upper=1 + 1e-9, tau_lower=0.0))
    assert np.array_equal(ident.labels, y.labels)


def test_fbs_rejects_misaligned():
    with pytest.raises(ValueError):
        fbs_rewrite(PointLabelSet(np.zeros((2, 3))), np.zeros(3))
    with pytest.raises(ValueError):
        FBSConfig(tau_upper=0.3, tau_lower=0.3)


def test_labels_from_boxes_examples():
    pts = np.array([[0, 0, 0], [10, 0, 0]], dtype=float)
    out = labels_from_boxes(pts, [det(cls=0, conf=0.4)])
    assert out.labels.tolist() == [[1, 0, 0], [0, 0, 0]]
    both = [det(cls=1, conf=0.4), det(cls=0, conf=0.9)]
    assert labels_from_boxes(pts[:1], both).labels.tolist() == [[1, 0, 0]]


def test_labels_from_boxes_against_two_box_oracle(rng):
    for _ in range(50):
        a = det(center=tuple(rng.uniform(-0.5, 0.5, 3)), cls=int(rng.integers(3)), conf=float(rng.choice([0.3, 0.6])))
        b = det(center=tuple(rng.uniform(-0.5, 0.5, 3)), cls=int(rng.integers(3)), conf=float(rng.choice([0.3, 0.6])))
        pts = rng.uniform(-1, 1, (40, 3))
        got = labels_from_boxes(pts, [a, b]).labels
        from traverse_da.core import points_in_box

        ia, ib = points_in_box(a, pts), points_in_box(b, pts)
        for k in range(len(pts)):
            inside = [x for x, m in ((a, ia[k]), (b, ib[k])) if m]
            expect = [0, 0, 0]
            if inside:
                best = max(inside, key=lambda x: x.confidence)  # max keeps the first on ties
                expect[best.cls] = 1
            assert got[k].tolist() == expect


def test_focal_hand_value():
    v = focal_loss(np.array([0.5, 0.5, 0.5]), np.array([1, 0, 0]), FocalConfig(0.25, 2.0))
    assert abs(v - 0.1875 * math.log(2)) < 1e-12


def test_focal_perfect_prediction():
    eps = 1e-7
    p = np.array([1 - eps, eps, eps])
    y = np.array([1, 0, 0])
    assert focal_loss(p, y) < 1e-12
    assert np.all(np.abs(focal_loss_grad(p, y)) < 1e-5)


def test_focal_gamma_zero_is_bce(rng):
    p = rng.uniform(0.01, 0.99, (20, 3))
    y = rng.integers(0, 2, (20, 3))
    bce = -(y * np.log(p) + (1 - y) * np.log(1 - p)).sum(axis=1)
    assert np.allclose(focal_loss(p, y, FocalConfig(1.0, 0.0)), bce, atol=1e-10, rtol=0)
    cfg = FocalConfig(0.25, 0.0)
    assert np.allclose(focal_loss_grad(p, y, cfg), 0.25 * (p - y), atol=1e-12)


@pytest.mark.parametrize("gamma", [0.0, 1.0, 2.0])
def test_focal_gradient_finite_differences(gamma, rng):
    cfg = FocalConfig(0.25, gamma)
    h = 1e-6
    z = rng.uniform(-4, 4, (100, 3))
    y = rng.integers(0, 2, (100, 3))
    g = focal_loss_grad(sigmoid(z), y, cfg)
    for c in range(3):
        zp, zm = z.copy(), z.copy()
        zp[:, c] += h
        zm[:, c] -= h
        # difference only the perturbed class so the others add no cancellation noise
        one = slice(c, c + 1)
        fd = (focal_loss(sigmoid(zp[:, one]), y[:, one], cfg) - focal_loss(sigmoid(zm[:, one]), y[:, one], cfg)) / (2 * h)
        rel = np.abs(fd - g[:, c]) / np.maximum(np.abs(g[:, c]), 1e-8)
        assert rel.max() < 1e-5


@given(st.floats(1e-6, 1 - 1e-6), st.integers(0, 1), st.floats(0, 3))
def test_focal_nonnegative(p, y, gamma):
    assert focal_loss(np.array([p]), np.array([y]), FocalConfig(0.25, gamma)) >= 0


def test_focal_config_validation():
    with pytest.raises(ValueError):
        FocalConfig(alpha=0)
    with pytest.raises(ValueError):
        FocalConfig(gamma=-1)


def test_sigmoid_matches_exp_form(rng):
    z = rng.uniform(-30, 30, 1000)
    assert np.allclose(sigmoid(z), 1 / (1 + np.exp(-z)), atol=1e-15, rtol=1e-12)


@pytest.mark.parametrize("gamma", [0.0, 0.5, 2.0])
def test_fused_loss_and_grad_match_separate(gamma, rng):
    from traverse_da.supervise import focal_loss_and_grad

    cfg = FocalConfig(0.25, gamma)
    p = rng.uniform(0, 1, (500, 3))
    y = rng.integers(0, 2, (500, 3))
    loss, grad = focal_loss_and_grad(p, y, cfg)
    assert np.allclose(loss, focal_loss(p, y, cfg), rtol=1e-13, atol=0)
    assert np.allclose(grad, focal_loss_grad(p, y, cfg), rtol=1e-13, atol=1e-300)
