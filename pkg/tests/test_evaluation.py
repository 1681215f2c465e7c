import csv
import io

import pytest
from hypothesis import given, settings, strategies as st

from funcbound.errors import EncodingMismatch, SchemaError
from funcbound.evaluation import (
    CSV_COLUMNS, EvalReport, Metrics, compare, delta, evaluate_run, macro_average, micro_average,
    reports_to_csv, score_boundaries, score_starts, unsafe_accuracy,
)
from funcbound.ground_truth import from_pairs, from_starts, pair_boundaries, to_byte_labels


def test_small_example():
    m = score_starts({4, 10}, {6, 10})
    assert (m.tp, m.fp, m.fn) == (1, 1, 1)
    assert m.precision == m.recall == m.f1 == 0.5


def test_perfect():
    m = score_starts({1, 2, 3}, {1, 2, 3})
    assert m.precision == m.recall == m.f1 == 1.0


def test_empty_prediction():
    m = score_starts(set(), {1, 2})
    assert (m.tp, m.fp, m.fn) == (0, 0, 2)
    assert m.undefined_precision and not m.undefined_recall
    assert m.precision == 0.0 and m.f1 == 0.0


def test_nothing_at_all():
    m = score_starts(set(), set())
    assert m.undefined_precision and m.undefined_recall
    assert m.f1 == 0.0


def test_unsafe_accuracy():
    assert unsafe_accuracy({4, 10}, {6, 10}, 24) == pytest.approx(22 / 24)
    with pytest.raises(ValueError):
        unsafe_accuracy({1, 2, 3}, {4}, 2)


def test_tolerance_is_opt_in():
    assert score_starts({5}, {6}).tp == 0
    m = score_starts({5, 7}, {6}, tolerance=1)
    assert (m.tp, m.fp, m.fn) == (1, 1, 0)
    with pytest.raises(ValueError):
        score_starts({1}, {1}, tolerance=-1)


def test_boundaries_old_encoding():
    gt = from_pairs("f5", "x64", "exclusive_end", [(2, 5), (5, 8)])
    detected = pair_boundaries(to_byte_labels(gt)).pairs
    assert detected == [(2, 8)]
    m = score_boundaries((detected, "exclusive_end"), gt)
    assert (m.tp, m.fp, m.fn) == (0, 1, 2)


def test_boundaries_new_encoding():
    gt = from_pairs("f5", "x64", "inclusive_end", [(2, 4), (5, 7)])
    detected = pair_boundaries(to_byte_labels(gt)).pairs
    assert score_boundaries((detected, "inclusive_end"), gt).f1 == 1.0


def test_boundaries_off_by_one():
    m = score_boundaries([(2, 5), (6, 9)], [(2, 5), (6, 10)])
    assert (m.tp, m.fp, m.fn) == (1, 1, 1)


def test_boundaries_encoding_mismatch():
    gt = from_pairs("x", "x64", "inclusive_end", [(2, 4)])
    with pytest.raises(EncodingMismatch):
        score_boundaries(([(2, 5)], "exclusive_end"), gt)
    with pytest.raises(EncodingMismatch):
        score_boundaries(from_starts("x", "x64", [2]), [(2, 4)])


sets = st.sets(st.integers(0, 60), max_size=25)


@settings(max_examples=300, deadline=None)
@given(sets, sets)
def test_swap_symmetry(a, b):
    m1, m2 = score_starts(a, b), score_starts(b, a)
    assert m1.tp == m2.tp and m1.fp == m2.fn and m1.fn == m2.fp


@settings(max_examples=300, deadline=None)
@given(sets, sets)
def test_f1_formula(pred, gt):
    m = score_starts(pred, gt)
    p, r = m.precision, m.recall
    want = 2 * p * r / (p + r) if p + r else 0.0
    assert abs(m.f1 - want) < 1e-12


@settings(max_examples=300, deadline=None)
@given(sets, sets, st.integers(0, 60))
def test_adding_predictions(pred, gt, x):
    base = score_starts(pred, gt)
    if x in pred:
        return
    after = score_starts(pred | {x}, gt)
    if base.undefined_precision:
        return
    if x in gt:
        assert after.f1 >= base.f1 - 1e-12
    else:
        assert after.f1 <= base.f1 + 1e-12


def _report(sid, det, pred, gt, wall=0.0):
    return evaluate_run(sid, from_starts(sid, "x64", gt), pred, det, wall_time=wall, config={"d": det})


def test_report_round_trip():
    r = _report("s1", "tree", {1, 2, 5}, {1, 2, 3}, wall=0.125)
    text = r.dumps()
    back = EvalReport.loads(text)
    assert back == r
    assert back.dumps() == text


def test_report_counts_checked():
    with pytest.raises(ValueError):
        EvalReport("s", "d", Metrics.from_counts(1, 1, 1), prediction_count=5, gt_count=2)


def test_report_schema_errors():
    d = _report("s", "d", {1}, {1}).to_dict()
    with pytest.raises(SchemaError):
        EvalReport.from_dict({**d, "version": 99})
    bad = dict(d)
    del bad["metrics"]
    with pytest.raises(SchemaError):
        EvalReport.from_dict(bad)


def test_compare_table():
    reps = [_report("s1", "tree", {1, 2}, {1, 2}), _report("s1", "heur", {1}, {1, 2}),
            _report("s2", "tree", {3}, {4})]
    rows = compare(reps)
    assert [r["sample_id"] for r in rows] == ["s1", "s2"]
    assert rows[0]["tree"] == 1.0
    assert rows[0]["heur"] == pytest.approx(2 / 3)
    assert rows[1]["heur"] is None


def test_delta():
    clean = _report("s1", "clean", {1, 2}, {1, 2})
    rnd = _report("s1", "random", {1, 7}, {1, 2})
    d = delta(clean, rnd)
    assert d["f1_delta"] == pytest.approx(0.5 - 1.0)


def test_averages():
    reps = [_report("a", "d", {1, 2}, {1, 2}), _report("b", "d", set(), {5, 6, 7, 8})]
    micro = micro_average(reps)
    assert (micro.tp, micro.fp, micro.fn) == (2, 0, 4)
    assert micro.f1 == pytest.approx(2 * 1 * (1 / 3) / (1 + 1 / 3))
    macro = macro_average(reps)
    assert macro["f1"] == pytest.approx(0.5)
    assert macro_average([])["n"] == 0


def test_csv_export():
    reps = [_report("b", "d", {1}, {1}), _report("a", "d", {2}, {1})]
    rows = list(csv.reader(io.StringIO(reports_to_csv(reps))))
    assert rows[0] == CSV_COLUMNS
    assert [r[0] for r in rows[1:]] == ["a", "b"]
