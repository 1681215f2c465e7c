"""Score thresholding, threshold calibration and the class-imbalance prior."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import DegenerateCounts, EmptyValidation

log = logging.getLogger(__name__)

GRID = np.round(np.arange(101) * 0.01, 2)


@dataclass(frozen=True)
class ClassifierThreshold:
    t: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0 or math.isnan(self.t):
            raise ValueError(f"threshold must lie in [0, 1], got {self.t}")


@dataclass(frozen=True)
class ImbalancePrior:
    pos: int
    neg: int
    b0: float


@dataclass
class SweepResult:
    best_t: float
    best_f1: float
    table: list = field(default_factory=list)  # dicts with t, tp, fp, fn, precision, recall, f1
    degenerate: bool = False

    def __iter__(self):
        # unpacks as (best t, table)
        return iter((self.best_t, self.table))


def classify(predictions, threshold) -> set:
    """RVAs whose score is strictly above the threshold."""
    t = threshold.t if isinstance(threshold, ClassifierThreshold) else ClassifierThreshold(threshold).t
    return {p.rva for p in predictions if p.score > t}


def _f1(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return p, r, (2 * p * r / (p + r) if p + r else 0.0)


def sweep_scores(scores, labels, grid=GRID) -> SweepResult:
    """Grid search over thresholds given flat score and boolean label arrays.

    ``labels`` marks candidates that are true starts. Starts that were never
    candidates can be passed as extra entries with score 0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    pos_scores = np.sort(scores[labels])
    neg_scores = np.sort(scores[~labels])
    n_pos = len(pos_scores)
    table = []
    best = None
    for t in grid:
        t = float(t)
        tp = n_pos - int(np.searchsorted(pos_scores, t, side="right"))
        fp = len(neg_scores) - int(np.searchsorted(neg_scores, t, side="right"))
        fn = n_pos - tp
        p, r, f = _f1(tp, fp, fn)
        table.append({"t": t, "tp": tp, "fp": fp, "fn": fn, "precision": p, "recall": r, "f1": f})
        if best is None or f > best[1]:
            best = (t, f)
    degenerate = best[1] == 0.0
    if degenerate:
        log.warning("threshold sweep is degenerate: F1 is 0 at every threshold")
    return SweepResult(best[0], best[1], table, degenerate)


def sweep_threshold(model, validation, grid=GRID) -> SweepResult:
    """Pick the threshold with the best F1 over ``validation`` (ties go to the smallest t)."""
    from .prefix_tree import score_array

    validation = list(validation)
    if not validation:
        raise EmptyValidation("validation set is empty")
    all_scores, all_labels = [], []
    for image, gt in validation:
        rvas, scores = score_array(model, image)
        lab = np.isin(rvas, np.fromiter(gt.starts, dtype=np.int64)) if gt.starts else np.zeros(len(rvas), bool)
        missing = len(gt.starts) - int(lab.sum())
        all_scores += [scores, np.zeros(missing)]
        all_labels += [lab, np.ones(missing, dtype=bool)]
    return sweep_scores(np.concatenate(all_scores), np.concatenate(all_labels), grid)


def imbalance_prior(gt, image=None, total_bytes=None) -> ImbalancePrior:
    """b0 = ln(pos / neg) over the executable bytes of ``image``."""
    if total_bytes is None:
        if image is None:
            raise ValueError("need an image or total_bytes")
        total_bytes = sum(e - s for s, e in image.executable_ranges())
        pos = sum(1 for s in gt.starts if image.is_executable(s))
    else:
        pos = len(gt.starts)
    neg = total_bytes - pos
    if pos <= 0 or neg <= 0:
        raise DegenerateCounts(f"cannot form a prior from pos={pos}, neg={neg}")
    return ImbalancePrior(pos, neg, math.log(pos / neg))
