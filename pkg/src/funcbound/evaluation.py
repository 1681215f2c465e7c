"""Per-byte start metrics, boundary-pair metrics and run reports."""
from __future__ import annotations

import bisect
import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field

from .errors import EncodingMismatch, SchemaError
from .ground_truth import Encoding

log = logging.getLogger(__name__)

REPORT_VERSION = 1


@dataclass(frozen=True)
class Metrics:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    undefined_precision: bool = False
    undefined_recall: bool = False

    @classmethod
    def from_counts(cls, tp, fp, fn):
        up, ur = tp + fp == 0, tp + fn == 0
        p = 0.0 if up else tp / (tp + fp)
        r = 0.0 if ur else tp / (tp + fn)
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return cls(tp, fp, fn, p, r, f1, up, ur)

    def __add__(self, other):
        return Metrics.from_counts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def to_dict(self):
        return asdict(self)


def _match_with_tolerance(predicted, gt, k):
    """Greedy one-to-one matching within +-k bytes, nearest first."""
    gt_sorted = sorted(gt)
    used = set()
    tp = 0
    for p in sorted(predicted):
        lo = bisect.bisect_left(gt_sorted, p - k)
        best = None
        for g in gt_sorted[lo:bisect.bisect_right(gt_sorted, p + k)]:
            if g not in used and (best is None or abs(g - p) < abs(best - p)):
                best = g
        if best is not None:
            used.add(best)
            tp += 1
    return tp


def score_starts(predicted, gt_starts, tolerance: int = 0) -> Metrics:
    """Exact per-byte start matching. ``tolerance`` > 0 is a non-default relaxation."""
    predicted, gt_starts = set(predicted), set(gt_starts)
    if tolerance < 0:
        raise ValueError("tolerance must be >= 0")
    if tolerance == 0:
        tp = len(predicted & gt_starts)
    else:
        tp = _match_with_tolerance(predicted, gt_starts, tolerance)
    return Metrics.from_counts(tp, len(predicted) - tp, len(gt_starts) - tp)


def unsafe_accuracy(predicted, gt_starts, total_bytes: int) -> float:
    """Byte accuracy. Dominated by the negative class; for illustration only."""
    m = score_starts(predicted, gt_starts)
    tn = total_bytes - m.tp - m.fp - m.fn
    if total_bytes <= 0 or tn < 0:
        raise ValueError("total_bytes is smaller than the labelled positions")
    return (m.tp + tn) / total_bytes


def _pairs_and_encoding(x):
    if hasattr(x, "pairs") and hasattr(x, "encoding"):
        return set(x.pairs()), Encoding.parse(x.encoding)
    if isinstance(x, tuple) and len(x) == 2 and isinstance(x[1], (str, Encoding)):
        return set(map(tuple, x[0])), Encoding.parse(x[1])
    return set(map(tuple, x)), None


def score_boundaries(predicted_pairs, gt_pairs, encoding=None) -> Metrics:
    """Exact (start, end) matching.

    Either argument may be a GroundTruth, a ``(pairs, encoding)`` tuple or a
    bare iterable of pairs. Declared encodings must agree.
    """
    pred, e1 = _pairs_and_encoding(predicted_pairs)
    gt, e2 = _pairs_and_encoding(gt_pairs)
    declared = {e for e in (e1, e2, Encoding.parse(encoding) if encoding else None) if e is not None}
    if len(declared) > 1:
        raise EncodingMismatch(f"boundary pairs use different encodings: {sorted(d.value for d in declared)}")
    if Encoding.STARTS_ONLY in declared:
        raise EncodingMismatch("starts_only data has no boundary pairs")
    tp = len(pred & gt)
    return Metrics.from_counts(tp, len(pred) - tp, len(gt) - tp)


def config_digest(config) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EvalReport:
    sample_id: str
    detector_id: str
    metrics: Metrics
    config_digest: str = ""
    wall_time: float = 0.0
    prediction_count: int = 0
    gt_count: int = 0
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        m = self.metrics
        if m.tp + m.fp != self.prediction_count or m.tp + m.fn != self.gt_count:
            raise ValueError("report counts disagree with its metrics")

    def to_dict(self):
        d = asdict(self)
        d["version"] = REPORT_VERSION
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.pop("version", REPORT_VERSION) != REPORT_VERSION:
            raise SchemaError("unsupported report version")
        try:
            d["metrics"] = Metrics(**d["metrics"])
            return cls(**d)
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed report: {exc}") from exc

    @classmethod
    def loads(cls, text):
        return cls.from_dict(json.loads(text))


def evaluate_run(sample_id, gt, predicted, detector_id, wall_time=0.0, config=None, tolerance=0) -> EvalReport:
    starts = gt.starts if hasattr(gt, "starts") else set(gt)
    predicted = set(predicted)
    config = dict(config or {})
    if tolerance:
        config["tolerance"] = tolerance
    m = score_starts(predicted, starts, tolerance)
    return EvalReport(sample_id, detector_id, m, config_digest(config), float(wall_time),
                      m.tp + m.fp, m.tp + m.fn, config)


def micro_average(reports) -> Metrics:
    total = Metrics()
    for r in reports:
        total = total + r.metrics
    return total


def macro_average(reports) -> dict:
    reports = list(reports)
    if not reports:
        return {"precision": 0.0, "recall": 0.0, "f1": 0.0, "n": 0}
    n = len(reports)
    return {
        "precision": sum(r.metrics.precision for r in reports) / n,
        "recall": sum(r.metrics.recall for r in reports) / n,
        "f1": sum(r.metrics.f1 for r in reports) / n,
        "n": n,
    }


def compare(reports) -> list:
    """Rows keyed by sample_id with one F1 column per detector, sorted for stable output."""
    detectors = sorted({r.detector_id for r in reports})
    by_sample = {}
    for r in reports:
        by_sample.setdefault(r.sample_id, {})[r.detector_id] = r.metrics.f1
    rows = []
    for sid in sorted(by_sample):
        row = {"sample_id": sid}
        row.update({d: by_sample[sid].get(d) for d in detectors})
        rows.append(row)
    return rows


def delta(baseline: EvalReport, variant: EvalReport) -> dict:
    if baseline.sample_id != variant.sample_id:
        log.warning("delta between different samples %s / %s", baseline.sample_id, variant.sample_id)
    return {
        "sample_id": baseline.sample_id,
        "baseline": baseline.detector_id,
        "variant": variant.detector_id,
        "precision_delta": variant.metrics.precision - baseline.metrics.precision,
        "recall_delta": variant.metrics.recall - baseline.metrics.recall,
        "f1_delta": variant.metrics.f1 - baseline.metrics.f1,
    }


CSV_COLUMNS = ["sample_id", "detector_id", "precision", "recall", "f1", "tp", "fp", "fn", "wall_time"]


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in sorted(reports, key=lambda r: (r.sample_id, r.detector_id)):
        m = r.metrics
        w.writerow([r.sample_id, r.detector_id, f"{m.precision:.6f}", f"{m.recall:.6f}", f"{m.f1:.6f}",
                    m.tp, m.fp, m.fn, f"{r.wall_time:.6f}"])
    return buf.getvalue()
