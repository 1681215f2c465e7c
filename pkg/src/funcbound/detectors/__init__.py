from .estimators import HeuristicDetector, PaddingRandomizer, PrefixTreeClassifier
from .heuristic import HeuristicOptions, heuristic_detect
from .prefix_tree import (Prediction, PrefixTreeConfig, PrefixTreeModel, score_array, score_candidates,
                          train_prefix_tree)
from .threshold import (ClassifierThreshold, ImbalancePrior, SweepResult, classify, imbalance_prior,
                        sweep_scores, sweep_threshold)

__all__ = [
    "ClassifierThreshold", "HeuristicDetector", "HeuristicOptions", "ImbalancePrior", "PaddingRandomizer",
    "Prediction", "PrefixTreeClassifier", "PrefixTreeConfig", "PrefixTreeModel", "SweepResult",
    "classify", "heuristic_detect", "imbalance_prior", "score_array", "score_candidates",
    "sweep_scores", "sweep_threshold", "train_prefix_tree",
]
