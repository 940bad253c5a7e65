import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import confusion_pixelwise, depth_errors_pixelwise, miou_pixelwise
from xtasc.errors import EmptyMaskError
from xtasc.metrics import (MetricError, MetricsReport, build_report, confusion_matrix, delta_m, depth_errors,
                           miou_pixacc, report_delta_m)


def test_confusion_perfect_and_ignored():
    gt = np.array([[0, 1], [2, 1]])
    conf = confusion_matrix(gt, gt, 3)
    assert np.array_equal(conf, np.diag(np.diag(conf))) and conf.trace() == 4
    assert not confusion_matrix(gt, np.full((2, 2), 255), 3).any()


def test_confusion_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        c = int(rng.integers(2, 5))
        p, g = rng.integers(0, c, (2, 4, 4))
        g[rng.random(g.shape) < 0.2] = 255
        np.testing.assert_array_equal(confusion_matrix(p, g, c), confusion_pixelwise(p, g, c))


def test_miou_hand_example():
    conf = confusion_matrix(np.array([[0, 0], [1, 1]]), np.array([[0, 1], [1, 1]]), 2)
    miou, acc, per = miou_pixacc(conf)
    assert per == pytest.approx([1 / 2, 2 / 3])
    assert miou == pytest.approx(7 / 12) and acc == 0.75


def test_miou_perfect_and_absent_class():
    conf = confusion_matrix(np.zeros((3, 3), int), np.zeros((3, 3), int), 2)
    miou, acc, per = miou_pixacc(conf)
    assert (miou, acc) == (1.0, 1.0) and per[1] is None


def test_miou_empty():
    with pytest.raises(MetricError):
        miou_pixacc(np.zeros((3, 3)))


def test_miou_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        c = int(rng.integers(2, 7))
        p, g = rng.integers(0, c, (2, 2, 5, 6))
        g[rng.random(g.shape) < 0.2] = 255
        g.flat[0] = 0
        miou, acc, _ = miou_pixacc(confusion_matrix(p, g, c))
        om, oa = miou_pixelwise(p, g, c)
        assert miou == pytest.approx(om, rel=1e-6) and acc == pytest.approx(oa, rel=1e-6)


def test_depth_errors_trivial():
    gt = np.full((3, 3), 2.0)
    assert depth_errors(gt, gt) == (0.0, 0.0)
    assert depth_errors(np.full((3, 3), 3.0), gt) == (1.0, 0.5)


def test_depth_errors_match_oracle():
    rng = np.random.default_rng(2)
    for _ in range(50):
        pred = rng.uniform(0, 1, (2, 4, 4))
        gt = rng.uniform(0.1, 1, (2, 4, 4))
        gt[rng.random(gt.shape) < 0.5] = 0
        gt.flat[0] = 0.4
        a, r = depth_errors(pred, gt)
        oa, orr = depth_errors_pixelwise(pred, gt)
        assert a == pytest.approx(oa, rel=1e-6) and r == pytest.approx(orr, rel=1e-6)


def test_depth_errors_bad_masks():
    with pytest.raises(EmptyMaskError):
        depth_errors(np.ones(4), np.zeros(4))
    with pytest.raises(MetricError):
        depth_errors(np.ones(4), np.zeros(4), valid_mask=np.ones(4, bool))


def test_delta_m_examples():
    assert delta_m([1, 2, 3, 4], [1, 2, 3, 4], [0, 0, 1, 1]) == 0
    assert delta_m([55, 90, 0.018, 20], [50, 90, 0.02, 20], [0, 0, 1, 1]) == pytest.approx(5.0)
    with pytest.raises(MetricError):
        delta_m([1, 2], [0, 2], [0, 0])
    with pytest.raises(MetricError):
        delta_m([1, 2], [1, 2, 3], [0, 0])


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 100), st.floats(0.01, 100))
def test_delta_m_single_metric_sign_flips(m, b):
    d1, d2 = delta_m([m], [b], [0]), delta_m([b], [m], [0])
    assert (d1 > 0) == (d2 < 0) and (d1 == 0) == (d2 == 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.1, 10), min_size=4, max_size=4), st.integers(0, 3), st.floats(0.01, 5))
def test_delta_m_monotone(base, i, bump):
    flags = [0, 0, 1, 1]
    up = list(base)
    up[i] += bump
    change = delta_m(up, base, flags) - delta_m(base, base, flags)
    assert change > 0 if flags[i] == 0 else change < 0


def test_report_delta_against_self_is_zero():
    r = MetricsReport(0.5, 0.9, 0.02, 0.2)
    assert report_delta_m(r, r) == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_metrics_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    p, g = rng.integers(0, 4, (2, 3, 5))
    g.flat[0] = 1
    dp, dg = rng.uniform(0.1, 1, (2, 3, 5))
    perm = rng.permutation(p.size)
    a = build_report(p, g, dp, dg, 4).to_dict()
    b = build_report(p.ravel()[perm], g.ravel()[perm], dp.ravel()[perm], dg.ravel()[perm], 4).to_dict()
    for k in ("miou", "pix_acc"):
        assert a[k] == pytest.approx(b[k], rel=1e-15)
    assert a["abs_err"] == pytest.approx(b["abs_err"], rel=1e-12)
    assert a["per_class_iou"] == b["per_class_iou"]


def test_ignored_pixels_do_not_move_metrics():
    rng = np.random.default_rng(3)
    p, g = rng.integers(0, 3, (2, 4, 4))
    base = miou_pixacc(confusion_matrix(p, g, 3))
    p2 = np.concatenate([p.ravel(), rng.integers(0, 3, 20)])
    g2 = np.concatenate([g.ravel(), np.full(20, 255)])
    assert miou_pixacc(confusion_matrix(p2, g2, 3)) == base
