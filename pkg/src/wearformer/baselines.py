"""Non-neural baselines over handcrafted features: a minimal exact-greedy
gradient-boosted-trees classifier (standard and expert feature variants),
plus the wiring that runs them alongside the CNN-only ablation on identical
example sets.

The booster fits depth-limited regression trees to logistic-loss
gradient/hessian statistics with exact greedy splits on sorted feature
values. No regularization beyond a minimum leaf size and shrinkage; split
thresholds are always values observed in the training data (x <= t goes
left), and ties break toward the lowest feature index, then the lowest
threshold.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .data import Dataset, SplitResult, SplitSpec, temporal_split
from .errors import ValidationError
from .evaluation import PredictionSet, evaluate_model
from .features import (FEATURE_NAMES, STANDARD_FEATURE_NAMES, FeatureWindow,
                       feature_windows_for_split)
from .model import ModelConfig
from .training import NeuralScorer, TrainConfig, prepare_model, train

FEATURE_SETS = ("standard", "standard+expert")


@dataclass(frozen=True)
class GBDTConfig:
    n_rounds: int = 200
    max_depth: int = 4
    learning_rate: float = 0.1
    min_samples_leaf: int = 5
    feature_set: str = "standard+expert"
    seed: int = 0

    def validate(self) -> None:
        if self.n_rounds < 1:
            raise ValidationError(f"n_rounds {self.n_rounds} must be >= 1")
        if self.max_depth < 1:
            raise ValidationError(f"max_depth {self.max_depth} must be >= 1")
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate {self.learning_rate} must be > 0")
        if self.min_samples_leaf < 1:
            raise ValidationError("min_samples_leaf must be >= 1")
        if self.feature_set not in FEATURE_SETS:
            raise ValidationError(f"feature_set {self.feature_set!r} not in {FEATURE_SETS}")


@dataclass
class TreeNode:
    """Internal node (feature/threshold/children) or leaf (value)."""

    feature: int = -1
    threshold: float = 0.0
    gain: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    value: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def predict(self, x: np.ndarray) -> float:
        node = self
        while not node.is_leaf:
            node = node.left if x[node.feature] <= node.threshold else node.right
        return node.value

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {"value": self.value}
        return {"feature": self.feature, "threshold": self.threshold, "gain": self.gain,
                "left": self.left.to_dict(), "right": self.right.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "TreeNode":
        if "value" in d:
            return cls(value=float(d["value"]))
        return cls(feature=int(d["feature"]), threshold=float(d["threshold"]),
                   gain=float(d.get("gain", 0.0)),
                   left=cls.from_dict(d["left"]), right=cls.from_dict(d["right"]))

    def leaves(self) -> int:
        return 1 if self.is_leaf else self.left.leaves() + self.right.leaves()


@dataclass
class TreeEnsemble:
    base_score: float          # prior log-odds
    shrinkage: float
    trees: list[TreeNode] = field(default_factory=list)
    n_features: int = 0
    feature_names: list[str] = field(default_factory=list)
    train_losses: list[float] = field(default_factory=list)

    def predict_margin(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        if single:
            X = X[None]
        if X.shape[1] != self.n_features:
            raise ValidationError(
                f"feature vector length {X.shape[1]} != training length {self.n_features}")
        margins = np.full(len(X), self.base_score)
        for tree in self.trees:
            margins += self.shrinkage * np.array([tree.predict(x) for x in X])
        return margins[0:1] if single else margins

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return expit(self.predict_margin(X))

    def feature_importance(self) -> np.ndarray:
        """Total split gain per feature."""
        total = np.zeros(self.n_features)

        def walk(node: TreeNode) -> None:
            if not node.is_leaf:
                total[node.feature] += node.gain
                walk(node.left)
                walk(node.right)

        for tree in self.trees:
            walk(tree)
        return total

    def to_json(self, path: str | Path, extra: dict | None = None) -> None:
        doc = {
            "format_version": 1,
            "base_score": self.base_score,
            "shrinkage": self.shrinkage,
            "n_features": self.n_features,
            "feature_names": self.feature_names,
            "trees": [t.to_dict() for t in self.trees],
        }
        if extra:
            doc["extra"] = extra
        with open(Path(path), "w") as f:
            json.dump(doc, f, sort_keys=True)
            f.write("\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "TreeEnsemble":
        with open(Path(path)) as f:
            doc = json.load(f)
        if doc.get("format_version") != 1:
            raise ValidationError(f"{path}: unsupported ensemble format")
        return cls(base_score=float(doc["base_score"]), shrinkage=float(doc["shrinkage"]),
                   trees=[TreeNode.from_dict(t) for t in doc["trees"]],
                   n_features=int(doc["n_features"]),
                   feature_names=list(doc.get("feature_names", [])))


@dataclass
class _Split:
    feature: int
    threshold: float
    gain: float


def _best_split(X: np.ndarray, g: np.ndarray, h: np.ndarray, rows: np.ndarray,
                min_leaf: int) -> _Split | None:
    """Exact greedy search; returns None when no admissible split exists.

    Gain is the standard Newton objective GL^2/HL + GR^2/HR - G^2/H. The
    threshold is the largest value routed left. Ties keep the first
    candidate in (feature asc, threshold asc) order.
    """
    g_total = g[rows].sum()
    h_total = h[rows].sum()
    parent = g_total * g_total / h_total
    best: _Split | None = None
    n = len(rows)
    for f in range(X.shape[1]):
        values = X[rows, f]
        order = np.argsort(values, kind="mergesort")
        xs = values[order]
        if xs[0] == xs[-1]:
            continue  # constant feature: never split
        gs = np.cumsum(g[rows][order])
        hs = np.cumsum(h[rows][order])
        # candidate boundaries between distinct adjacent values
        cut = np.flatnonzero(xs[:-1] != xs[1:])
        if min_leaf > 0:
            cut = cut[(cut + 1 >= min_leaf) & (n - cut - 1 >= min_leaf)]
        if not len(cut):
            continue
        gl = gs[cut]
        hl = hs[cut]
        gr = g_total - gl
        hr = h_total - hl
        gains = gl * gl / hl + gr * gr / hr - parent
        local = int(np.argmax(gains))  # first max = lowest threshold
        if best is None or gains[local] > best.gain:
            best = _Split(feature=f, threshold=float(xs[cut[local]]),
                          gain=float(gains[local]))
    return best


def _build_tree(X: np.ndarray, g: np.ndarray, h: np.ndarray, rows: np.ndarray,
                depth: int, config: GBDTConfig) -> TreeNode:
    if depth >= config.max_depth or len(rows) < 2 * config.min_samples_leaf:
        return _leaf(g, h, rows)
    split = _best_split(X, g, h, rows, config.min_samples_leaf)
    if split is None or split.gain <= 0.0:
        return _leaf(g, h, rows)
    mask = X[rows, split.feature] <= split.threshold
    left = _build_tree(X, g, h, rows[mask], depth + 1, config)
    right = _build_tree(X, g, h, rows[~mask], depth + 1, config)
    return TreeNode(feature=split.feature, threshold=split.threshold, gain=split.gain,
                    left=left, right=right)


def _leaf(g: np.ndarray, h: np.ndarray, rows: np.ndarray) -> TreeNode:
    return TreeNode(value=float(-g[rows].sum() / h[rows].sum()))


def logistic_loss(margins: np.ndarray, y: np.ndarray) -> float:
    """Mean log(1 + e^F) - y*F, computed stably."""
    return float(np.mean(np.maximum(margins, 0.0) + np.log1p(np.exp(-np.abs(margins)))
                         - y * margins))


def gbdt_train(X: np.ndarray, y: np.ndarray, config: GBDTConfig,
               feature_names: Sequence[str] = ()) -> TreeEnsemble:
    """Gradient boosting on logistic loss from the prior log-odds."""
    config.validate()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValidationError(f"X {X.shape} and y {y.shape} disagree")
    if len(X) < 2:
        raise ValidationError("need at least 2 training examples")
    pos = y.sum()
    if pos == 0 or pos == len(y):
        raise ValidationError("single-class training data")
    base_rate = pos / len(y)
    ensemble = TreeEnsemble(base_score=float(np.log(base_rate / (1.0 - base_rate))),
                            shrinkage=config.learning_rate,
                            n_features=X.shape[1],
                            feature_names=list(feature_names))
    margins = np.full(len(y), ensemble.base_score)
    rows = np.arange(len(y))
    for _ in range(config.n_rounds):
        p = expit(margins)
        g = p - y
        h = p * (1.0 - p)
        tree = _build_tree(X, g, h, rows, 0, config)
        ensemble.trees.append(tree)
        margins += config.learning_rate * np.array([tree.predict(x) for x in X])
        ensemble.train_losses.append(logistic_loss(margins, y))
    return ensemble


def gbdt_predict(ensemble: TreeEnsemble, X: np.ndarray) -> np.ndarray:
    """Scores in (0,1): sigmoid of base score plus shrunk leaf sums."""
    return ensemble.predict_proba(X)


def export_feature_importance(ensemble: TreeEnsemble, path: str | Path) -> None:
    importance = ensemble.feature_importance()
    names = ensemble.feature_names or [f"f{i}" for i in range(ensemble.n_features)]
    with open(Path(path), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["feature", "total_gain"])
        for name, gain in zip(names, importance):
            writer.writerow([name, repr(float(gain))])


# ---------------------------------------------------------------------------
# feature-set plumbing + the baseline suite
# ---------------------------------------------------------------------------

def feature_column_indices(feature_set: str) -> np.ndarray:
    """Column indices into the 92-long (4-day x 23) feature window vector."""
    n_day = len(FEATURE_NAMES)
    n_std = len(STANDARD_FEATURE_NAMES)
    if feature_set == "standard":
        cols = [d * n_day + i for d in range(4) for i in range(n_std)]
    elif feature_set == "standard+expert":
        cols = list(range(4 * n_day))
    else:
        raise ValidationError(f"feature_set {feature_set!r} not in {FEATURE_SETS}")
    return np.asarray(cols, dtype=np.int64)


def feature_column_names(feature_set: str) -> list[str]:
    cols = feature_column_indices(feature_set)
    n_day = len(FEATURE_NAMES)
    return [f"day-{4 - c // n_day}.{FEATURE_NAMES[c % n_day]}" for c in cols]


def feature_matrix(windows: Sequence[FeatureWindow], feature_set: str
                   ) -> tuple[np.ndarray, np.ndarray]:
    cols = feature_column_indices(feature_set)
    if not windows:
        return np.empty((0, len(cols))), np.empty(0, dtype=np.int64)
    X = np.stack([w.vector for w in windows])[:, cols]
    y = np.array([1 if w.label else 0 for w in windows], dtype=np.int64)
    return X, y


class GBDTScorer:
    """Evaluation adapter mirroring NeuralScorer for feature windows."""

    def __init__(self, ensemble: TreeEnsemble, feature_set: str):
        self.ensemble = ensemble
        self.cols = feature_column_indices(feature_set)

    def encode_batch(self, windows: Sequence[FeatureWindow]) -> np.ndarray:
        return np.stack([w.vector for w in windows])[:, self.cols]

    def score_encoded(self, encoded: np.ndarray) -> np.ndarray:
        return self.ensemble.predict_proba(encoded)


def train_gbdt_baseline(train_windows: Sequence[FeatureWindow], config: GBDTConfig
                        ) -> TreeEnsemble:
    X, y = feature_matrix(train_windows, config.feature_set)
    return gbdt_train(X, y, config, feature_names=feature_column_names(config.feature_set))


def run_baseline_suite(dataset: Dataset, spec: SplitSpec, task: str,
                       model_config: ModelConfig, train_config: TrainConfig,
                       gbdt_config: GBDTConfig | None = None,
                       resolution_minutes: int = 1, normalize: bool = True,
                       log=None) -> dict[str, PredictionSet]:
    """Train gbdt_standard, gbdt_expert, and the CNN-only ablation on the
    same split and score the same test examples as the main model would."""
    base_gbdt = gbdt_config or GBDTConfig()
    split = temporal_split(dataset, spec, task)
    f_train, _f_tuning, f_test = feature_windows_for_split(dataset, split)

    results: dict[str, PredictionSet] = {}
    period = (spec.boundary_day, dataset.day_of(dataset.n_days))
    for feature_set, name in (("standard", "gbdt_standard"),
                              ("standard+expert", "gbdt_expert")):
        cfg = GBDTConfig(n_rounds=base_gbdt.n_rounds, max_depth=base_gbdt.max_depth,
                         learning_rate=base_gbdt.learning_rate,
                         min_samples_leaf=base_gbdt.min_samples_leaf,
                         feature_set=feature_set, seed=base_gbdt.seed)
        ensemble = train_gbdt_baseline(f_train, cfg)
        results[name] = evaluate_model(GBDTScorer(ensemble, feature_set), f_test,
                                       task=task, model_name=name, period=period)

    cnn_config = ModelConfig.from_dict({**model_config.to_dict(), "arch": "cnn_only"})
    params = prepare_model(cnn_config, split.train, resolution_minutes, normalize,
                           train_config.seed)
    trained, _report = train(params, split.train, split.tuning, train_config, log=log,
                             train_period=(dataset.start_day, spec.boundary_day))
    results["cnn_only"] = evaluate_model(NeuralScorer(trained), split.test,
                                         task=task, model_name="cnn_only", period=period)
    return results
