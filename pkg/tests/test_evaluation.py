import itertools
import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mrialign.evaluation import (BinaryPredictions, ComparisonError, DegenerateTestError,
                                 HeatmapEvalConfig, InvalidGroundTruthError, MetricsReport,
                                 UndefinedMetricError, auc, confusion_counts, dice,
                                 evaluate_experiment, explainability_scores, mean_std,
                                 paired_t_test, precision_recall_f1, student_t_two_sided_p)
from reference_values import T_TABLE


def brute_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def test_auc_examples():
    assert auc(BinaryPredictions([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])) == 1.0
    assert auc(BinaryPredictions([0.5, 0.5], [1, 0])) == 0.5
    assert auc(BinaryPredictions([0.8, 0.2, 0.4, 0.6], [1, 1, 0, 0])) == 0.5


def test_auc_single_class_undefined():
    with pytest.raises(UndefinedMetricError):
        auc(BinaryPredictions([0.1, 0.7], [1, 1]))


scored = st.integers(2, 200).flatmap(lambda n: st.tuples(
    hnp.arrays(np.float64, n, elements=st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]) | st.floats(0, 1)),
    hnp.arrays(np.int64, n, elements=st.integers(0, 1))))


@given(scored)
def test_auc_matches_pairwise_oracle(data):
    scores, labels = data
    assume(0 < labels.sum() < len(labels))
    assert abs(auc(BinaryPredictions(scores, labels)) - brute_auc(scores, labels)) <= 1e-12


def test_prf_examples():
    # TP=2, FP=1, FN=1, TN=1
    p = precision_recall_f1(BinaryPredictions([0.9, 0.8, 0.7, 0.1, 0.2], [1, 1, 0, 1, 0]))
    assert (p.precision, p.recall, p.f1) == pytest.approx((2 / 3, 2 / 3, 2 / 3), abs=1e-15)
    perfect = precision_recall_f1(BinaryPredictions([0.9, 0.1], [1, 0]))
    assert tuple(perfect) == (1.0, 1.0, 1.0)
    silent = precision_recall_f1(BinaryPredictions([0.1, 0.2, 0.3], [1, 0, 1]))
    assert tuple(silent) == (0.0, 0.0, 0.0)
    assert "precision" in silent.undefined


@given(scored)
def test_prf_matches_confusion_oracle(data):
    scores, labels = data
    pred = [s >= 0.5 for s in scores]
    tp = sum(1 for p, l in zip(pred, labels) if p and l == 1)
    fp = sum(1 for p, l in zip(pred, labels) if p and l == 0)
    fn = sum(1 for p, l in zip(pred, labels) if not p and l == 1)
    out = precision_recall_f1(BinaryPredictions(scores, labels))
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    assert confusion_counts(BinaryPredictions(scores, labels))[:3] == (tp, fp, fn)
    assert out.precision == pytest.approx(prec, abs=1e-15)
    assert out.recall == pytest.approx(rec, abs=1e-15)
    assert out.f1 == pytest.approx(f1, abs=1e-15)


def test_dice_examples():
    a = np.zeros((4, 4), bool)
    a[0, :] = True
    assert dice(a, a) == 1.0
    b = np.zeros((4, 4), bool)
    b[3, :] = True
    assert dice(a, b) == 0.0
    c = np.zeros((4, 4), bool)
    c[0, :2] = c[1, :2] = True
    assert dice(a, c) == 0.5
    assert dice(np.zeros(3), np.zeros(3), return_flag=True) == (0.0, True)
    with pytest.raises(ValueError):
        dice(np.zeros(3), np.zeros(4))


@given(hnp.arrays(bool, (3, 4, 2)), hnp.arrays(bool, (3, 4, 2)))
def test_dice_symmetric_and_bounded(a, b):
    assert dice(a, b) == dice(b, a)
    assert 0.0 <= dice(a, b) <= 1.0


def test_explainability_examples():
    mask = np.zeros((4, 4, 4), np.uint8)
    mask[1, :2] = 1
    mask[2] = 1
    assert explainability_scores(mask.astype(float), mask) == (1.0, 1.0)
    assert explainability_scores(np.zeros((4, 4, 4)), mask) == (0.0, 0.0)
    heat = np.zeros((4, 4, 4))
    heat[2] = 1.0
    d2, d3 = explainability_scores(heat, mask)
    assert d2 == 1.0
    assert abs(d3 - 0.8) < 1e-15
    with pytest.raises(InvalidGroundTruthError):
        explainability_scores(heat, np.zeros((4, 4, 4)))


def test_slice_ties_go_to_lowest_index():
    mask = np.zeros((4, 2, 2), np.uint8)
    mask[1] = mask[3] = 1
    heat = np.zeros((4, 2, 2))
    heat[1] = 1.0
    assert explainability_scores(heat, mask)[0] == 1.0


@given(st.integers(0, 2**31), st.floats(0.1, 10), st.floats(-0.5, 0.5))
def test_explainability_invariant_to_crossing_preserving_maps(seed, gain, shift):
    r = np.random.default_rng(seed)
    heat = r.random((4, 4, 4))
    mask = (r.random((4, 4, 4)) > 0.6).astype(np.uint8)
    mask[0, 0, 0] = 1
    tau = HeatmapEvalConfig().threshold
    rescaled = tau + gain * (heat - tau)  # affine map fixing tau
    assert explainability_scores(rescaled, mask) == explainability_scores(heat, mask)
    monotone = np.where(heat >= tau, tau + (heat - tau) ** 2 + abs(shift), heat * 0.5)
    assert explainability_scores(monotone, mask) == explainability_scores(heat, mask)


def test_ttest_examples():
    assert paired_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == (0.0, 1.0)
    t, p = paired_t_test([1.0, 2.0, 3.0, 4.0, 5.0], [0.0] * 5)
    assert t == pytest.approx(3 / (math.sqrt(2.5) / math.sqrt(5)), abs=1e-12)
    assert abs(p - 0.0132) < 1e-4
    with pytest.raises(DegenerateTestError):
        paired_t_test([2.0, 3.0], [1.0, 2.0])
    with pytest.raises(ComparisonError):
        paired_t_test([1.0, 2.0], [1.0])


@pytest.mark.parametrize("t,df,p", T_TABLE)
def test_t_distribution_reference_table(t, df, p):
    assert abs(student_t_two_sided_p(t, df) - p) < 1e-3
    assert abs(student_t_two_sided_p(-t, df) - p) < 1e-3


@given(st.floats(-1e3, 1e3), st.floats(0.5, 500))
def test_p_value_in_unit_interval(t, df):
    assert 0.0 <= student_t_two_sided_p(t, df) <= 1.0


def test_aggregation_examples():
    assert mean_std([0.7]) == (0.7, 0.0)
    mu, sd = mean_std([0.7, 0.8, 0.9])
    assert mu == pytest.approx(0.8, abs=1e-15)
    assert sd == pytest.approx(math.sqrt(0.02 / 3), abs=1e-12)
    assert round(sd, 4) == 0.0816


def _report():
    rows = [{"auc": a, "precision": 0.5, "recall": 0.5, "f1": 0.5, "dice2d": 0.1, "dice3d": d}
            for a, d in [(0.7, 0.1), (0.8, 0.2), (0.9, 0.3)]]
    other = [dict(r, auc=r["auc"] - g) for r, g in zip(rows, (0.1, 0.05, 0.2))]
    report = MetricsReport()
    report.add(evaluate_experiment("pre", rows, rows))
    report.add(evaluate_experiment("rnd", other, other))
    report.compare("pre", "rnd", "external", ["auc"])
    return report


def test_report_round_trip_and_byte_stable():
    report = _report()
    again = MetricsReport.from_dict(report.to_dict())
    assert again.to_json() == report.to_json()
    assert report.table_csv("external") == _report().table_csv("external")
    assert report.table_csv("external").splitlines()[0].startswith("experiment,auc_mean,auc_std")
    assert "0.800 (0.082)" in report.render_table("internal")


def test_compare_rejects_unequal_folds():
    report = _report()
    report.add(evaluate_experiment("short", [{"auc": 0.5}], [{"auc": 0.5}]))
    with pytest.raises(ComparisonError):
        report.compare("pre", "short", "external", ["auc"])
