import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from patchdepth.errors import NumericalError
from patchdepth.evaluation import (
    METRIC_COLUMNS,
    aggregate,
    confidence_calibration,
    d1_all,
    depth_metrics,
    disparity_mae,
    read_metrics_csv,
    spearman,
    write_metrics_csv,
)


def test_identity():
    g = np.array([[1.0, 5.0], [20.0, 70.0]])
    m = depth_metrics(g, g)
    assert (m.abs_rel, m.sq_rel, m.rmse, m.rmse_log) == (0.0, 0.0, 0.0, 0.0)
    assert (m.delta1, m.delta2, m.delta3) == (1.0, 1.0, 1.0)
    assert m.n_valid == 4


def test_single_pixel():
    m = depth_metrics(np.array([2.0]), np.array([1.0]))
    assert m.abs_rel == 1.0 and m.sq_rel == 1.0 and m.rmse == 1.0
    assert m.rmse_log == math.log(2.0)
    assert m.delta1 == 0.0 and m.delta2 == 0.0 and m.delta3 == 0.0


def test_two_pixels():
    m = depth_metrics(np.array([1.2, 0.9]), np.array([1.0, 1.0]))
    assert m.abs_rel == pytest.approx(0.15, abs=1e-15)
    assert m.delta1 == 1.0


def test_delta_threshold_is_strict():
    m = depth_metrics(np.array([1.25]), np.array([1.0]))
    assert m.delta1 == 0.0 and m.delta2 == 1.0


def test_cap_and_floor():
    gt = np.array([10.0, 60.0, 90.0, 0.0])
    pred = np.array([0.0, 200.0, 5.0, 3.0])
    m80 = depth_metrics(pred, gt, cap=80)
    m50 = depth_metrics(pred, gt, cap=50)
    assert m80.n_valid == 2 and m50.n_valid == 1
    # prediction 0 is floored to 1e-3, 200 clamped to the cap
    assert m50.abs_rel == pytest.approx((10 - 1e-3) / 10)
    assert m80.rmse == pytest.approx(math.sqrt(((10 - 1e-3) ** 2 + 20.0**2) / 2))


def test_no_valid_pixels():
    with pytest.raises(NumericalError):
        depth_metrics(np.ones(3), np.zeros(3))
    with pytest.raises(NumericalError):
        d1_all(np.ones(3), np.ones(3), np.zeros(3, bool))


def test_d1_rule():
    assert d1_all(np.array([10.0]), np.array([10.0])) == 0.0
    assert d1_all(np.array([14.0]), np.array([10.0])) == 1.0
    assert d1_all(np.array([104.0]), np.array([100.0])) == 0.0
    assert d1_all(np.array([14.0, 104.0, 10.0, 2.0]), np.array([10.0, 100.0, 10.0, 10.0])) == 0.5


def test_disparity_mae_masked():
    mask = np.array([True, False])
    assert disparity_mae(np.array([3.0, 100.0]), np.array([1.0, 1.0]), mask) == 2.0


positive = arrays(np.float64, 12, elements=st.floats(0.5, 70.0))


@settings(max_examples=100, deadline=None)
@given(positive, positive, st.floats(0.1, 1.1))
def test_scale_behaviour(pred, gt, c):
    # keep everything inside the cap after scaling so clipping plays no part
    a = depth_metrics(pred, gt, cap=1e6)
    b = depth_metrics(c * pred, c * gt, cap=1e6)
    assert b.abs_rel == pytest.approx(a.abs_rel, rel=1e-10, abs=1e-12)
    assert b.rmse_log == pytest.approx(a.rmse_log, rel=1e-10, abs=1e-12)
    assert b.rmse == pytest.approx(c * a.rmse, rel=1e-10, abs=1e-12)
    assert b.sq_rel == pytest.approx(c * a.sq_rel, rel=1e-10, abs=1e-12)


def test_scale_behaviour_on_random_inputs(rng):
    pred = rng.uniform(0.5, 50, 1000)
    gt = rng.uniform(0.5, 50, 1000)
    a = depth_metrics(pred, gt, cap=1e6)
    for c in (0.5, 2.0, 7.3):
        b = depth_metrics(c * pred, c * gt, cap=1e6)
        assert abs(b.abs_rel - a.abs_rel) <= 1e-10 * a.abs_rel
        assert abs(b.rmse_log - a.rmse_log) <= 1e-10 * a.rmse_log
        assert abs(b.rmse - c * a.rmse) <= 1e-10 * c * a.rmse
        assert abs(b.sq_rel - c * a.sq_rel) <= 1e-10 * c * a.sq_rel
        # ratios are exactly preserved unless a product lands on a threshold
        assert abs(b.delta1 - a.delta1) <= 1e-3


@settings(max_examples=200, deadline=None)
@given(positive, positive)
def test_delta_monotone_and_ranges(pred, gt):
    m = depth_metrics(pred, gt)
    assert 0 <= m.delta1 <= m.delta2 <= m.delta3 <= 1
    assert min(m.abs_rel, m.sq_rel, m.rmse, m.rmse_log) >= 0
    assert 0 <= d1_all(pred, gt) <= 1


def test_aggregate_is_pixel_weighted(rng):
    p1, g1 = rng.uniform(1, 10, 30), rng.uniform(1, 10, 30)
    p2, g2 = rng.uniform(1, 10, 70), rng.uniform(1, 10, 70)
    agg = aggregate([depth_metrics(p1, g1), depth_metrics(p2, g2)])
    whole = depth_metrics(np.r_[p1, p2], np.r_[g1, g2])
    for c in ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3"):
        assert getattr(agg, c) == pytest.approx(getattr(whole, c), rel=1e-12)
    assert agg.n_valid == 100


def test_metrics_csv_round_trip(tmp_path, rng):
    rows = [(f"img{i}", depth_metrics(rng.uniform(1, 9, 20), rng.uniform(1, 9, 20), d1=0.1 * i)) for i in range(3)]
    total = aggregate([m for _, m in rows])
    write_metrics_csv(tmp_path / "m.csv", rows, total)
    header = (tmp_path / "m.csv").read_text().splitlines()[0]
    assert header == ",".join(("image",) + METRIC_COLUMNS)
    back = read_metrics_csv(tmp_path / "m.csv")
    assert [n for n, _ in back] == ["img0", "img1", "img2", "aggregate"]
    assert back[1][1] == rows[1][1]
    assert back[-1][1] == total


def test_calibration_constant_confidence(rng):
    gt = rng.uniform(1, 10, 200)
    pred = gt * rng.uniform(0.8, 1.2, 200)
    rep = confidence_calibration(np.full(200, 0.7), pred, gt, n_bins=10)
    assert rep.spearman == 0.0
    assert np.allclose(rep.bin_abs_rel, rep.bin_abs_rel[0])


def test_calibration_perfect_ranking(rng):
    gt = np.full(500, 4.0)
    pred = gt + rng.uniform(0, 2, 500)
    err = np.abs(pred - gt) / gt
    rep = confidence_calibration(-err, pred, gt, n_bins=10)
    assert rep.spearman == pytest.approx(1.0)
    assert rep.bin_abs_rel[0] > rep.bin_abs_rel[-1]
    assert all(a >= b for a, b in zip(rep.bin_abs_rel, rep.bin_abs_rel[1:]))


def test_calibration_needs_enough_pixels():
    with pytest.raises(NumericalError):
        confidence_calibration(np.ones(5), np.ones(5), np.ones(5), n_bins=10)


def test_spearman_matches_rank_formula(rng):
    a, b = rng.random(50), rng.random(50)
    ra, rb = np.argsort(np.argsort(a)), np.argsort(np.argsort(b))
    n = 50
    expect = 1 - 6 * np.sum((ra - rb) ** 2) / (n * (n * n - 1))
    assert spearman(a, b) == pytest.approx(expect, abs=1e-12)
