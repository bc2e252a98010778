import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import loop_bhattacharyya, loop_correlation, loop_segmentation
from sua.core import ParameterError, ShapeError
from sua.metrics import (TABLE_KEYS, MetricReport, bhattacharyya, correlation, distribution_metrics,
                         histogram, mean_histogram, segmentation_metrics)


def test_hand_case_bhattacharyya():
    assert bhattacharyya([.5, .5, 0, 0], [0, .5, .5, 0]) == pytest.approx(0.70711, abs=1e-5)
    assert bhattacharyya([.5, .5, 0, 0], [.5, .5, 0, 0]) == pytest.approx(0.0, abs=1e-7)
    assert bhattacharyya([1, 0], [0, 1]) == pytest.approx(1.0)


def test_histogram_oracle_and_edges():
    img = np.array([[0.0, 0.3, 0.5, 1.0]])
    h = histogram(img, bins=4)
    np.testing.assert_allclose(h, [0.25, 0.25, 0.25, 0.25])
    assert histogram(np.full((8, 8), 1.0), bins=10)[-1] == 1.0
    assert histogram(np.full((8, 8), 0.5), bins=10)[5] == 1.0
    mask = np.array([[True, False, False, True]])
    np.testing.assert_allclose(histogram(img, 4, mask=mask), [0.5, 0, 0, 0.5])
    with pytest.raises(ParameterError):
        histogram(img, bins=1)


def test_histogram_counts_match_loop():
    gen = np.random.default_rng(0)
    img = gen.random((13, 11))
    bins = 16
    counts = [0] * bins
    for v in img.ravel():
        counts[min(int(v * bins), bins - 1)] += 1
    np.testing.assert_allclose(histogram(img, bins), np.array(counts) / img.size)


def test_distribution_metrics_random_against_loops():
    gen = np.random.default_rng(1)
    for _ in range(100):
        n = int(gen.integers(2, 40))
        h1 = gen.random(n) * (gen.random(n) > 0.3)
        h2 = gen.random(n)
        h1[0] += 1e-3
        h1 /= h1.sum()
        h2 /= h2.sum()
        assert bhattacharyya(h1, h2) == pytest.approx(loop_bhattacharyya(h1, h2), abs=1e-10)
        assert correlation(h1, h2) == pytest.approx(loop_correlation(h1, h2), abs=1e-10)


def test_correlation_flat_histogram_is_nan():
    assert math.isnan(correlation([0.25] * 4, [0.1, 0.2, 0.3, 0.4]))
    assert correlation([0.1, 0.2, 0.3, 0.4], [0.1, 0.2, 0.3, 0.4]) == pytest.approx(1.0)


def test_histogram_length_mismatch():
    with pytest.raises(ParameterError):
        bhattacharyya([0.5, 0.5], [1.0, 0.0, 0.0])


def test_segmentation_random_against_counting():
    gen = np.random.default_rng(2)
    for _ in range(100):
        c = int(gen.integers(2, 5))
        pred = gen.integers(0, c, (16, 16))
        gt = gen.integers(0, c, (16, 16))
        ref = loop_segmentation(pred, gt, c)
        rep = segmentation_metrics(pred, gt, c)
        for key, val in ref.items():
            assert getattr(rep, key) == pytest.approx(val, abs=1e-10)
        assert rep.mIoU == pytest.approx(np.mean([s["IoU"] for s in rep.per_class.values()]))
        for s in rep.per_class.values():
            assert s["IoU"] == pytest.approx(s["Dice"] / (2 - s["Dice"]), abs=1e-12)


def test_segmentation_perfect_and_empty_cases():
    gt = np.zeros((8, 8), int)
    gt[2:5, 2:5] = 1
    rep = segmentation_metrics(gt, gt)
    assert (rep.Dice, rep.mIoU, rep.Sen, rep.Spe, rep.FDR, rep.Acc) == (1.0, 1.0, 1.0, 1.0, 0.0, 1.0)
    empty = segmentation_metrics(np.zeros_like(gt), gt)
    assert empty.Dice == 0.0 and empty.Sen == 0.0 and empty.FDR == 0.0
    nothing = segmentation_metrics(np.zeros_like(gt), np.zeros_like(gt))
    assert math.isnan(nothing.Dice)
    with pytest.raises(ShapeError):
        segmentation_metrics(gt, gt[:4])


def test_report_json_has_exactly_table_keys():
    rep = MetricReport(D_Bhat=0.1, Corr=float("nan"), Acc=1.0, Dice=0.5, mIoU=1 / 3, Sen=1, Spe=1, FDR=0)
    data = json.loads(rep.to_json())
    assert tuple(data) == TABLE_KEYS
    assert data["Corr"] is None


def test_distribution_metrics_is_mean_of_calls():
    gen = np.random.default_rng(3)
    imgs = [gen.random((8, 8)) for _ in range(4)]
    ref = mean_histogram([gen.random((8, 8)) ** 2 for _ in range(3)], 8)
    d, c = distribution_metrics(imgs, ref, 8)
    assert d == pytest.approx(np.mean([bhattacharyya(histogram(i, 8), ref) for i in imgs]))
    assert c == pytest.approx(np.mean([correlation(histogram(i, 8), ref) for i in imgs]))


hists = arrays(np.float64, st.integers(2, 32), elements=st.floats(0, 1)).filter(lambda h: h.sum() > 1e-3)


@settings(max_examples=60, deadline=None)
@given(hists, st.data())
def test_bhattacharyya_properties(h1, data):
    h2 = data.draw(arrays(np.float64, h1.shape, elements=st.floats(0, 1)).filter(lambda h: h.sum() > 1e-3))
    h1 = h1 / h1.sum()
    h2 = h2 / h2.sum()
    d = bhattacharyya(h1, h2)
    assert 0.0 <= d <= 1.0
    assert d == pytest.approx(bhattacharyya(h2, h1), abs=1e-12)
    assert bhattacharyya(h1, h1) < 1e-6


@settings(max_examples=60, deadline=None)
@given(arrays(np.int64, (6, 7), elements=st.integers(0, 2)), arrays(np.int64, (6, 7), elements=st.integers(0, 2)))
def test_segmentation_properties(pred, gt):
    rep = segmentation_metrics(pred, gt, 3)
    if math.isnan(rep.Dice):
        assert not (pred > 0).any() and not (gt > 0).any()
        return
    for key in ("Acc", "Dice", "mIoU", "Sen", "Spe", "FDR"):
        assert 0.0 <= getattr(rep, key) <= 1.0
    assert rep.mIoU <= rep.Dice + 1e-12
    swapped = segmentation_metrics(gt, pred, 3)
    assert swapped.Dice == pytest.approx(rep.Dice)
