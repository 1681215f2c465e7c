"""Estimator-style wrappers so detectors compose with scikit-learn tooling.

``X`` is a sequence of PeImage objects and ``y`` the matching GroundTruth
sequence. ``predict`` returns one set of start RVAs per image.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from ..errors import EmptyCorpus
from ..ground_truth import GroundTruth
from ..padding import PaddingConfig, randomize_padding
from ..pe import PeImage
from .heuristic import HeuristicOptions, heuristic_detect
from .prefix_tree import PrefixTreeConfig, PrefixTreeModel, score_array, score_candidates, train_prefix_tree
from .threshold import ClassifierThreshold, sweep_threshold


def check_images(X):
    X = list(X)
    for i, img in enumerate(X):
        if not isinstance(img, PeImage):
            raise TypeError(f"X[{i}] is {type(img).__name__}, expected PeImage")
    return X


def check_corpus(X, y):
    X = check_images(X)
    y = list(y)
    if len(X) != len(y):
        raise ValueError(f"X has {len(X)} images but y has {len(y)} ground truths")
    for i, gt in enumerate(y):
        if not isinstance(gt, GroundTruth):
            raise TypeError(f"y[{i}] is {type(gt).__name__}, expected GroundTruth")
    if not X:
        raise EmptyCorpus("no training images")
    return X, y


def check_is_fitted(est, attr):
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")


def _mean_f1(predicted, y):
    from ..evaluation import score_starts
    return float(np.mean([score_starts(p, gt.starts).f1 for p, gt in zip(predicted, y)]))


class PrefixTreeClassifier(ClassifierMixin, BaseEstimator):
    """Weighted prefix tree over raw bytes with a calibrated score threshold.

    ``threshold=None`` calibrates on the training corpus via the 0.01 grid.
    """

    def __init__(self, depth=16, context_window=0, min_support=10, alignment=None, threshold=None):
        self.depth = depth
        self.context_window = context_window
        self.min_support = min_support
        self.alignment = alignment
        self.threshold = threshold

    def _config(self):
        return PrefixTreeConfig(self.depth, self.context_window, self.min_support, self.alignment)

    def fit(self, X, y):
        X, y = check_corpus(X, y)
        self.model_ = train_prefix_tree(list(zip(X, y)), self._config())
        if self.threshold is None:
            self.sweep_ = sweep_threshold(self.model_, list(zip(X, y)))
            self.threshold_ = self.sweep_.best_t
        else:
            self.threshold_ = ClassifierThreshold(self.threshold).t
        return self

    @classmethod
    def from_model(cls, model: PrefixTreeModel, threshold: float):
        c = model.config
        est = cls(c.depth, c.context_window, c.min_support, c.alignment, threshold)
        est.model_ = model
        est.threshold_ = ClassifierThreshold(threshold).t
        return est

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return [score_candidates(self.model_, img) for img in check_images(X)]

    def predict(self, X):
        check_is_fitted(self, "model_")
        out = []
        for img in check_images(X):
            rvas, scores = score_array(self.model_, img)
            out.append({int(r) for r in rvas[scores > self.threshold_]})
        return out

    def score(self, X, y, sample_weight=None):
        """Mean per-image F1 of start detection."""
        return _mean_f1(self.predict(X), y)


class HeuristicDetector(BaseEstimator):
    """Recursive descent with optional gap analysis; ``fit`` is a no-op."""

    def __init__(self, gap_heuristic=False, prologue_patterns=False, pdata_seeds=True):
        self.gap_heuristic = gap_heuristic
        self.prologue_patterns = prologue_patterns
        self.pdata_seeds = pdata_seeds

    def fit(self, X=None, y=None):
        self.options_ = HeuristicOptions(self.gap_heuristic, self.prologue_patterns, self.pdata_seeds)
        return self

    def predict(self, X):
        opts = getattr(self, "options_", None) or self.fit().options_
        return [heuristic_detect(img, opts) for img in check_images(X)]

    def score(self, X, y):
        return _mean_f1(self.predict(X), y)


class PaddingRandomizer(TransformerMixin, BaseEstimator):
    """Maps (PeImage, GroundTruth) pairs to the same pairs with randomized padding."""

    def __init__(self, lookback=20, padding_values=(0xCC,), seed=0, exclude_original=False):
        self.lookback = lookback
        self.padding_values = padding_values
        self.seed = seed
        self.exclude_original = exclude_original

    def fit(self, X=None, y=None):
        self.config_ = PaddingConfig(self.lookback, frozenset(self.padding_values), self.seed,
                                     self.exclude_original)
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        out = []
        for image, gt in X:
            res = randomize_padding(image, gt, self.config_)
            out.append((res.image(), gt))
        return out
