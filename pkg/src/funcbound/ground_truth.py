"""Function ground truth: records, end encodings, S/E/N byte labels and boundary pairing.

End encodings:

* ``exclusive_end``: end is the first byte after the function (BAP style).
* ``inclusive_end``: end is the last byte that still belongs to the function.
* ``starts_only``: no ends at all.
"""
from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .errors import DuplicateStart, EncodingMismatch, SchemaError, StartOutsideImage
from .pe import Machine

log = logging.getLogger(__name__)


class Encoding(str, enum.Enum):
    EXCLUSIVE = "exclusive_end"
    INCLUSIVE = "inclusive_end"
    STARTS_ONLY = "starts_only"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        aliases = {"exclusive": cls.EXCLUSIVE, "inclusive": cls.INCLUSIVE,
                   "starts-only": cls.STARTS_ONLY, "starts": cls.STARTS_ONLY}
        try:
            return aliases.get(value) or cls(value)
        except ValueError:
            raise SchemaError(f"unknown encoding {value!r}") from None


class ConflictRule(str, enum.Enum):
    END_WINS = "end_wins"
    START_WINS = "start_wins"


# byte label values
N, S, E = 0, 1, 2
LABEL_CHARS = "NSE"


@dataclass(frozen=True)
class FunctionRecord:
    start: int
    end: int | None = None
    one_byte_conflict: bool = False


@dataclass(frozen=True)
class GroundTruth:
    sample_id: str
    machine: Machine
    encoding: Encoding
    records: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "machine", Machine(self.machine))
        object.__setattr__(self, "encoding", Encoding.parse(self.encoding))
        recs = tuple(sorted(self.records, key=lambda r: r.start))
        object.__setattr__(self, "records", recs)
        seen = set()
        for r in recs:
            if r.start in seen:
                raise DuplicateStart(f"start {r.start} listed twice in {self.sample_id}")
            seen.add(r.start)
            if self.encoding is Encoding.STARTS_ONLY or r.end is None:
                continue
            if self.encoding is Encoding.EXCLUSIVE and not r.start < r.end:
                raise SchemaError(f"exclusive record ({r.start}, {r.end}) needs start < end")
            if self.encoding is Encoding.INCLUSIVE and not r.start <= r.end:
                raise SchemaError(f"inclusive record ({r.start}, {r.end}) needs start <= end")

    def __len__(self):
        return len(self.records)

    @property
    def starts(self):
        return frozenset(r.start for r in self.records)

    @property
    def has_ends(self):
        return self.encoding is not Encoding.STARTS_ONLY and any(r.end is not None for r in self.records)

    def pairs(self):
        return [(r.start, r.end) for r in self.records if r.end is not None]

    def exclusive_ranges(self):
        """(start, exclusive end) for every record that has an end."""
        if self.encoding is Encoding.STARTS_ONLY:
            return []
        bump = 1 if self.encoding is Encoding.INCLUSIVE else 0
        return [(r.start, r.end + bump) for r in self.records if r.end is not None]

    @property
    def one_byte_conflicts(self):
        return sum(r.one_byte_conflict for r in self.records)

    def check_against(self, image):
        """Raise StartOutsideImage for starts outside the image; warn (and keep) starts
        that are mapped but not executable."""
        for r in self.records:
            sec = image.section_for_rva(r.start)
            if sec is None:
                raise StartOutsideImage(f"start {r.start:#x} of {self.sample_id} is not mapped")
            if not sec.executable:
                log.warning("start %#x of %s lies in non-executable section %s",
                            r.start, self.sample_id, sec.name)
        return self


def from_starts(sample_id, machine, starts: Iterable[int]) -> GroundTruth:
    return GroundTruth(sample_id, machine, Encoding.STARTS_ONLY, tuple(FunctionRecord(s) for s in starts))


def from_pairs(sample_id, machine, encoding, pairs) -> GroundTruth:
    encoding = Encoding.parse(encoding)
    flag = encoding is Encoding.INCLUSIVE
    return GroundTruth(sample_id, machine, encoding,
                       tuple(FunctionRecord(s, e, flag and s == e) for s, e in pairs))


# --- JSON-lines I/O -------------------------------------------------------

def _parse_rva(value, what, lineno):
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise SchemaError(f"line {lineno}: {what} must be an unsigned integer, got {value!r}")
    return value


def parse_ground_truth(text: str, image=None) -> GroundTruth:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise SchemaError("ground truth file is empty (header line required)")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise SchemaError(f"line 1: {exc}") from exc
    if not isinstance(header, dict) or not {"sample_id", "machine", "encoding"} <= header.keys():
        raise SchemaError("line 1: header needs sample_id, machine and encoding")
    try:
        machine = Machine(header["machine"])
    except ValueError:
        raise SchemaError(f"line 1: unknown machine {header['machine']!r}") from None
    encoding = Encoding.parse(header["encoding"])

    records = []
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"line {lineno}: {exc}") from exc
        if not isinstance(obj, dict) or "start" not in obj:
            raise SchemaError(f"line {lineno}: record needs a start")
        start = _parse_rva(obj["start"], "start", lineno)
        end = obj.get("end")
        if end is not None:
            end = _parse_rva(end, "end", lineno)
            if encoding is Encoding.STARTS_ONLY:
                raise SchemaError(f"line {lineno}: starts_only ground truth cannot carry ends")
        if start in seen:
            raise DuplicateStart(f"line {lineno}: start {start} already listed")
        seen.add(start)
        flag = encoding is Encoding.INCLUSIVE and end == start
        records.append(FunctionRecord(start, end, flag))
    gt = GroundTruth(str(header["sample_id"]), machine, encoding, tuple(records))
    if image is not None:
        gt.check_against(image)
    return gt


def load_ground_truth(path, image=None) -> GroundTruth:
    return parse_ground_truth(Path(path).read_text(), image)


def dumps_ground_truth(gt: GroundTruth) -> str:
    out = [json.dumps({"sample_id": gt.sample_id, "machine": gt.machine.value,
                       "encoding": gt.encoding.value})]
    for r in gt.records:
        out.append(json.dumps({"start": r.start, "end": r.end}))
    return "\n".join(out) + "\n"


def save_ground_truth(gt: GroundTruth, path):
    Path(path).write_text(dumps_ground_truth(gt))


# --- byte labels and pairing ---------------------------------------------

@dataclass(frozen=True)
class ByteLabels:
    base: int
    labels: np.ndarray = field(repr=False)
    conflicts: int = 0

    def __len__(self):
        return len(self.labels)

    def at(self, rva):
        return int(self.labels[rva - self.base])

    def positions(self, label):
        return [self.base + int(i) for i in np.flatnonzero(self.labels == label)]

    def __str__(self):
        return "".join(LABEL_CHARS[v] for v in self.labels)


class BoundaryPairs(NamedTuple):
    pairs: list
    dropped_ends: int = 0
    dropped_starts: int = 0


def to_byte_labels(gt: GroundTruth, conflict_rule=ConflictRule.END_WINS, base=None, size=None) -> ByteLabels:
    """One S/E/N label per byte. Ends are placed where the encoding puts them:
    the byte after the function (exclusive) or its last byte (inclusive)."""
    if gt.encoding is Encoding.STARTS_ONLY:
        raise EncodingMismatch("starts_only ground truth has no ends to label")
    conflict_rule = ConflictRule(conflict_rule)
    starts = [r.start for r in gt.records]
    ends = [r.end for r in gt.records if r.end is not None]
    if base is None:
        base = 0
    if size is None:
        size = max(starts + ends, default=base - 1) + 1 - base
    labels = np.zeros(max(size, 0), dtype=np.uint8)

    def inside(p):
        return 0 <= p - base < len(labels)

    first, second = (S, E) if conflict_rule is ConflictRule.END_WINS else (E, S)
    marks = {S: starts, E: ends}
    for p in marks[first]:
        if inside(p):
            labels[p - base] = first
    conflicts = 0
    for p in marks[second]:
        if inside(p):
            if labels[p - base] == first:
                conflicts += 1
            labels[p - base] = second
    return ByteLabels(base, labels, conflicts)


def _pair_events(events):
    """``events`` is an address-ordered iterable of (rva, label)."""
    pairs = []
    dropped_ends = dropped_starts = 0
    cur_start = cur_end = None
    for pos, lab in events:
        if lab == S:
            if cur_start is not None:
                if cur_end is None:
                    dropped_starts += 1
                else:
                    pairs.append((cur_start, cur_end))
            cur_start, cur_end = pos, None
        elif lab == E:
            if cur_start is None:
                dropped_ends += 1
            else:
                cur_end = pos
    if cur_start is not None:
        if cur_end is None:
            dropped_starts += 1
        else:
            pairs.append((cur_start, cur_end))
    return BoundaryPairs(pairs, dropped_ends, dropped_starts)


def pair_boundaries(labels: ByteLabels) -> BoundaryPairs:
    """Couple each start with the last end seen before the next start.

    Ends that precede every start are dropped and counted, as are starts that
    never see an end.
    """
    idx = np.flatnonzero(labels.labels != N)
    return _pair_events((labels.base + int(i), int(labels.labels[i])) for i in idx)


def convert_encoding(gt: GroundTruth, target) -> GroundTruth:
    target = Encoding.parse(target)
    if target is gt.encoding:
        return gt
    if target is Encoding.STARTS_ONLY:
        return GroundTruth(gt.sample_id, gt.machine, target, tuple(FunctionRecord(r.start) for r in gt.records))
    if gt.encoding is Encoding.STARTS_ONLY:
        raise EncodingMismatch("cannot derive ends from starts_only ground truth")
    delta = -1 if target is Encoding.INCLUSIVE else 1
    records = []
    for r in gt.records:
        if r.end is None:
            records.append(r)
            continue
        end = r.end + delta
        flag = (end == r.start) if target is Encoding.INCLUSIVE else (end - r.start == 1)
        records.append(FunctionRecord(r.start, end, flag))
    return replace(gt, encoding=target, records=tuple(records))


def adapt_ground_truth(gt: GroundTruth) -> GroundTruth:
    """Rebuild the label-conflicted ground truth: split records into start and end
    sets, drop every start that is also an end, then re-pair."""
    if gt.encoding is not Encoding.EXCLUSIVE:
        raise EncodingMismatch("adapt_ground_truth expects exclusive_end ground truth")
    starts = {r.start for r in gt.records}
    ends = {r.end for r in gt.records if r.end is not None}
    starts -= ends
    events = sorted([(s, S) for s in starts] + [(e, E) for e in ends])
    paired = _pair_events(events)
    return from_pairs(gt.sample_id, gt.machine, Encoding.EXCLUSIVE, paired.pairs)
