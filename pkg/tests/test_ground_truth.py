import json

import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_sample
from funcbound.errors import DuplicateStart, EncodingMismatch, SchemaError, StartOutsideImage
from funcbound.ground_truth import (
    E, N, S, ConflictRule, Encoding, adapt_ground_truth, convert_encoding, dumps_ground_truth, from_pairs,
    load_ground_truth, pair_boundaries, parse_ground_truth, to_byte_labels,
)
from funcbound.pe import parse_pe


def _jsonl(encoding, records, machine="x64"):
    lines = [json.dumps({"sample_id": "t", "machine": machine, "encoding": encoding})]
    lines += [json.dumps(r) for r in records]
    return "\n".join(lines) + "\n"


def test_load_starts_only(tmp_path):
    p = tmp_path / "gt.jsonl"
    p.write_text(_jsonl("starts_only", [{"start": 6}, {"start": 10}]))
    gt = load_ground_truth(p)
    assert len(gt) == 2
    assert gt.starts == {6, 10}
    assert gt.encoding is Encoding.STARTS_ONLY


def test_empty_records():
    gt = parse_ground_truth(_jsonl("exclusive_end", []))
    assert len(gt) == 0


def test_duplicate_start():
    with pytest.raises(DuplicateStart):
        parse_ground_truth(_jsonl("starts_only", [{"start": 6}, {"start": 6}]))


@pytest.mark.parametrize("text", [
    "",
    "not json\n",
    json.dumps({"sample_id": "t", "machine": "x64"}) + "\n",
    _jsonl("bogus", []),
    _jsonl("starts_only", [{"start": -1}]),
    _jsonl("starts_only", [{"start": "0x10"}]),
    _jsonl("starts_only", [{"end": 3}]),
    _jsonl("starts_only", [{"start": 1, "end": 3}]),
    _jsonl("exclusive_end", [{"start": 5, "end": 5}]),
    _jsonl("starts_only", [], machine="arm"),
])
def test_schema_errors(text):
    with pytest.raises(SchemaError):
        parse_ground_truth(text)


def test_start_outside_image(sample):
    img = parse_pe(sample.pe_bytes)
    with pytest.raises(StartOutsideImage):
        parse_ground_truth(_jsonl("starts_only", [{"start": 0x7FFF0000}]), img)


def test_round_trip(sample):
    text = dumps_ground_truth(sample.ground_truth)
    assert parse_ground_truth(text) == sample.ground_truth


def test_labels_adjacent_end_wins():
    gt = from_pairs("f5", "x64", "exclusive_end", [(2, 5), (5, 8)])
    lab = to_byte_labels(gt)
    assert (lab.at(2), lab.at(5), lab.at(8)) == (S, E, E)
    assert lab.conflicts == 1
    assert str(lab) == "NNSNNENNE"


def test_labels_start_wins():
    gt = from_pairs("f5", "x64", "exclusive_end", [(2, 5), (5, 8)])
    lab = to_byte_labels(gt, ConflictRule.START_WINS)
    assert lab.at(5) == S


def test_labels_single_record():
    lab = to_byte_labels(from_pairs("x", "x64", "exclusive_end", [(2, 5)]))
    assert lab.positions(S) == [2]
    assert lab.positions(E) == [5]
    assert lab.positions(N) == [0, 1, 3, 4]


def test_labels_need_ends():
    gt = parse_ground_truth(_jsonl("starts_only", [{"start": 6}]))
    with pytest.raises(EncodingMismatch):
        to_byte_labels(gt)


def _labels(size, starts=(), ends=()):
    gt = from_pairs("x", "x64", "exclusive_end", [])
    lab = to_byte_labels(gt, size=size)
    for s in starts:
        lab.labels[s] = S
    for e in ends:
        lab.labels[e] = E
    return lab


def test_pair_adjacent_example():
    assert pair_boundaries(_labels(9, [2], [5, 8])).pairs == [(2, 8)]


def test_pair_separate():
    assert pair_boundaries(_labels(10, [2, 6], [5, 9])).pairs == [(2, 5), (6, 9)]


def test_pair_dropped_end():
    res = pair_boundaries(_labels(4, [], [3]))
    assert res.pairs == []
    assert res.dropped_ends == 1


@pytest.mark.parametrize("src,dst,before,after,flag", [
    ("exclusive_end", "inclusive_end", (2, 5), (2, 4), False),
    ("inclusive_end", "exclusive_end", (2, 4), (2, 5), False),
    ("exclusive_end", "inclusive_end", (7, 8), (7, 7), True),
])
def test_convert(src, dst, before, after, flag):
    gt = convert_encoding(from_pairs("x", "x64", src, [before]), dst)
    rec = gt.records[0]
    assert (rec.start, rec.end) == after
    assert rec.one_byte_conflict is flag
    assert gt.encoding is Encoding.parse(dst)


def test_convert_from_starts_only_fails():
    gt = parse_ground_truth(_jsonl("starts_only", [{"start": 6}]))
    with pytest.raises(EncodingMismatch):
        convert_encoding(gt, "inclusive_end")


def test_adapt_adjacent():
    gt = adapt_ground_truth(from_pairs("x", "x64", "exclusive_end", [(2, 5), (5, 8)]))
    assert gt.pairs() == [(2, 8)]


def test_adapt_identity_without_adjacency():
    gt = from_pairs("x", "x64", "exclusive_end", [(2, 5), (6, 9)])
    assert adapt_ground_truth(gt).pairs() == [(2, 5), (6, 9)]


def test_adapt_empty():
    assert len(adapt_ground_truth(from_pairs("x", "x64", "exclusive_end", []))) == 0


def test_adapt_needs_exclusive():
    with pytest.raises(EncodingMismatch):
        adapt_ground_truth(from_pairs("x", "x64", "inclusive_end", [(2, 4)]))


def _disjoint_pairs(gaps_and_sizes, min_gap=0):
    pairs, pos = [], 0
    for gap, size in gaps_and_sizes:
        start = pos + gap + min_gap
        pairs.append((start, start + size))
        pos = start + size
    return pairs


layouts = st.lists(st.tuples(st.integers(0, 6), st.integers(1, 8)), max_size=20)


@settings(max_examples=200, deadline=None)
@given(layouts)
def test_convert_involution(layout):
    gt = from_pairs("x", "x64", "exclusive_end", _disjoint_pairs(layout))
    back = convert_encoding(convert_encoding(gt, "inclusive_end"), "exclusive_end")
    for a, b in zip(gt.records, back.records):
        assert (a.start, a.end) == (b.start, b.end)


@settings(max_examples=200, deadline=None)
@given(layouts)
def test_pairing_recovers_non_adjacent(layout):
    pairs = _disjoint_pairs(layout, min_gap=1)
    gt = from_pairs("x", "x64", "exclusive_end", pairs)
    assert pair_boundaries(to_byte_labels(gt)).pairs == pairs


@settings(max_examples=200, deadline=None)
@given(layouts)
def test_adapt_identity_property(layout):
    gt = from_pairs("x", "x64", "exclusive_end", _disjoint_pairs(layout, min_gap=1))
    assert adapt_ground_truth(gt).pairs() == gt.pairs()


def test_generated_gt_matches_image():
    s = make_sample(seed=31, function_count=10)
    img = parse_pe(s.pe_bytes)
    s.ground_truth.check_against(img)
    assert s.ground_truth.starts == {f.start for f in s.functions}
