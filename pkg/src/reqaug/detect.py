"""Anomaly detection: BBPE tokenizer on the unified data, an MLM trained on
normal traffic only, a random forest over embedding + likelihood features,
and a percentile-calibrated decision threshold.

The forest probability is the fraction of trees voting abnormal; a request is
flagged when that fraction strictly exceeds the calibrated threshold, which
bounds the false-positive rate on the calibration normals by construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentedDatastore
from .errors import EmptyCalibrationSet, EmptyCorpus, SingleClassInput
from .ingest import ABNORMAL, NORMAL, RawRequestRecord, RequestCorpus
from .lm.bbpe import BbpeTokenizer, load_tokenizer, save_tokenizer, train_bbpe
from .lm.mlm import (
    LanguageModel,
    LmConfig,
    load_model,
    save_model,
    sentence_embedding,
    token_nll,
    train_mlm,
)

CLASS_ORDER = (NORMAL, ABNORMAL)


@dataclass
class FeatureVector:
    """Sentence embedding plus negative-log-likelihood statistics."""

    sentence_embedding: np.ndarray
    nll_mean: float
    nll_max: float
    nll_std: float
    entity_count: int

    def as_array(self) -> np.ndarray:
        return np.concatenate([
            np.asarray(self.sentence_embedding, dtype=np.float64),
            np.array([self.nll_mean, self.nll_max, self.nll_std,
                      float(self.entity_count)], dtype=np.float64),
        ])

    @property
    def dimension(self) -> int:
        return len(self.sentence_embedding) + 4


@dataclass
class ForestConfig:
    n_trees: int = 100
    max_depth: int | None = None
    min_leaf: int = 1
    features_per_split: int | None = None  # defaults to ceil(sqrt(dim))
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be at least 1")


@dataclass
class _Node:
    feature: int = -1
    threshold: float = 0.0
    left: "_Node | None" = None
    right: "_Node | None" = None
    leaf_class: int | None = None


@dataclass
class RandomForest:
    trees: list[_Node]
    config: ForestConfig
    n_features: int


@dataclass
class DetectorModel:
    tokenizer: BbpeTokenizer
    mlm: LanguageModel
    forest: RandomForest
    theta: float
    calibration_percentile: float
    audit: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Verdict:
    id: str
    p_abnormal: float
    flagged: str


# --- features -------------------------------------------------------------------


def extract_features(mlm: LanguageModel, request: RawRequestRecord) -> FeatureVector:
    """Concatenate the sentence embedding with mean/max/std of per-token NLL."""
    nlls = np.asarray(token_nll(mlm, request), dtype=np.float64)
    return FeatureVector(
        sentence_embedding=sentence_embedding(mlm, request),
        nll_mean=float(nlls.mean()),
        nll_max=float(nlls.max()),
        nll_std=float(nlls.std()),
        entity_count=len(nlls),
    )


def feature_matrix(features: list[FeatureVector]) -> np.ndarray:
    return np.stack([f.as_array() for f in features])


# --- random forest ----------------------------------------------------------------


def _majority(y: np.ndarray) -> int:
    ones = int(y.sum())
    zeros = len(y) - ones
    return 1 if ones > zeros else 0


def _best_split(x: np.ndarray, y: np.ndarray, min_leaf: int):
    """Lowest weighted Gini impurity over thresholds of one feature."""
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    n = len(ys)
    cum_ones = np.cumsum(ys)
    total_ones = cum_ones[-1]
    cut = np.nonzero(xs[1:] > xs[:-1])[0]  # left side is [0..i]
    if len(cut) == 0:
        return None
    n_left = cut + 1
    n_right = n - n_left
    valid = (n_left >= min_leaf) & (n_right >= min_leaf)
    if not valid.any():
        return None
    cut, n_left, n_right = cut[valid], n_left[valid], n_right[valid]
    left_ones = cum_ones[cut]
    right_ones = total_ones - left_ones
    p1l = left_ones / n_left
    p1r = right_ones / n_right
    gini_left = 1.0 - p1l ** 2 - (1.0 - p1l) ** 2
    gini_right = 1.0 - p1r ** 2 - (1.0 - p1r) ** 2
    weighted = (n_left * gini_left + n_right * gini_right) / n
    best = int(np.argmin(weighted))
    threshold = 0.5 * (xs[cut[best]] + xs[cut[best] + 1])
    return float(weighted[best]), threshold


def _grow(X: np.ndarray, y: np.ndarray, depth: int, config: ForestConfig,
          k_features: int, rng: np.random.Generator) -> _Node:
    if (len(np.unique(y)) == 1
            or len(y) < 2 * config.min_leaf
            or (config.max_depth is not None and depth >= config.max_depth)):
        return _Node(leaf_class=_majority(y))

    candidates = rng.choice(X.shape[1], size=k_features, replace=False)
    best = None  # (gini, feature, threshold)
    for f in candidates:
        split = _best_split(X[:, f], y, config.min_leaf)
        if split is None:
            continue
        gini, threshold = split
        if best is None or gini < best[0]:
            best = (gini, int(f), threshold)
    if best is None:
        return _Node(leaf_class=_majority(y))

    _, feature, threshold = best
    mask = X[:, feature] <= threshold
    return _Node(
        feature=feature,
        threshold=threshold,
        left=_grow(X[mask], y[mask], depth + 1, config, k_features, rng),
        right=_grow(X[~mask], y[~mask], depth + 1, config, k_features, rng),
    )


def _tree_predict(node: _Node, x: np.ndarray) -> int:
    while node.leaf_class is None:
        node = node.left if x[node.feature] <= node.threshold else node.right
    return node.leaf_class


def train_forest(features: list[FeatureVector] | np.ndarray, labels: list[str],
                 config: ForestConfig) -> RandomForest:
    """Bootstrap-aggregated Gini trees with per-node feature subsampling.

    Each tree draws its randomness from a generator seeded by (seed, tree
    index), so adding trees never changes the existing ones.
    """
    X = features if isinstance(features, np.ndarray) else feature_matrix(features)
    if len(X) != len(labels):
        raise ValueError("features and labels differ in length")
    if len(X) < 2:
        raise SingleClassInput("need at least two examples")
    y = np.array([CLASS_ORDER.index(l) for l in labels], dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise SingleClassInput("both classes must be present")

    k = config.features_per_split or math.ceil(math.sqrt(X.shape[1]))
    k = min(k, X.shape[1])
    trees = []
    for t in range(config.n_trees):
        rng = np.random.default_rng([config.seed, t])
        if config.bootstrap:
            idx = rng.integers(0, len(X), size=len(X))
            Xt, yt = X[idx], y[idx]
        else:
            Xt, yt = X, y
        trees.append(_grow(Xt, yt, 0, config, k, rng))
    return RandomForest(trees=trees, config=config, n_features=X.shape[1])


def forest_probability(forest: RandomForest, fv: FeatureVector | np.ndarray) -> float:
    """Fraction of trees voting abnormal."""
    x = fv.as_array() if isinstance(fv, FeatureVector) else np.asarray(fv, dtype=np.float64)
    votes = sum(_tree_predict(tree, x) for tree in forest.trees)
    return votes / len(forest.trees)


def nearest_rank(scores: list[float], percentile: float) -> float:
    """Value at rank ceil(percentile/100 * N) of the sorted sample."""
    if not scores:
        raise EmptyCalibrationSet("no scores to take a percentile of")
    ordered = sorted(scores)
    rank = math.ceil(percentile / 100.0 * len(ordered))
    rank = min(max(rank, 1), len(ordered))
    return ordered[rank - 1]


def calibrate_threshold(forest: RandomForest,
                        normal_features: list[FeatureVector] | np.ndarray,
                        percentile: float = 99.0) -> float:
    """Nearest-rank percentile of forest scores over normal training data."""
    rows = list(normal_features) if isinstance(normal_features, np.ndarray) \
        else normal_features
    if not len(rows):
        raise EmptyCalibrationSet("no normal features to calibrate on")
    return nearest_rank([forest_probability(forest, f) for f in rows], percentile)


def classify(detector: DetectorModel, request: RawRequestRecord) -> Verdict:
    fv = extract_features(detector.mlm, request)
    p = forest_probability(detector.forest, fv)
    flagged = ABNORMAL if p > detector.theta else NORMAL
    return Verdict(id=request.id, p_abnormal=p, flagged=flagged)


# --- end-to-end -------------------------------------------------------------------


def train_detector(datastore: AugmentedDatastore, lm_config: LmConfig,
                   forest_config: ForestConfig,
                   calibration_percentile: float = 99.0) -> DetectorModel:
    """Tokenizer on originals plus synthetics, MLM on the normal subset only,
    forest on every labeled training record, threshold on the normal scores."""
    records = datastore.all_records()
    unified = RequestCorpus(records)
    labels = {r.label for r in records}
    if len(labels) < 2:
        raise SingleClassInput("training data must contain both classes")

    tokenizer = train_bbpe(unified, lm_config.vocab_size, seed=lm_config.seed)
    normal_records = [r for r in records if r.label == NORMAL]
    if not normal_records:
        raise EmptyCorpus("no normal records to train the language model on")
    mlm = train_mlm(tokenizer, RequestCorpus(normal_records), lm_config)

    features = [extract_features(mlm, r) for r in records]
    forest = train_forest(features, [r.label for r in records], forest_config)
    normal_features = [f for f, r in zip(features, records) if r.label == NORMAL]
    theta = calibrate_threshold(forest, normal_features, calibration_percentile)

    audit = {
        "mlm_training_ids": [r.id for r in normal_records],
        "forest_training_size": len(records),
        "calibration_size": len(normal_features),
    }
    return DetectorModel(tokenizer=tokenizer, mlm=mlm, forest=forest, theta=theta,
                         calibration_percentile=calibration_percentile, audit=audit)


# --- persistence --------------------------------------------------------------------


def _node_to_doc(node: _Node) -> dict:
    if node.leaf_class is not None:
        return {"leaf": CLASS_ORDER[node.leaf_class]}
    return {"feature": node.feature, "threshold": node.threshold,
            "left": _node_to_doc(node.left), "right": _node_to_doc(node.right)}


def _node_from_doc(doc: dict) -> _Node:
    if "leaf" in doc:
        return _Node(leaf_class=CLASS_ORDER.index(doc["leaf"]))
    return _Node(feature=doc["feature"], threshold=doc["threshold"],
                 left=_node_from_doc(doc["left"]), right=_node_from_doc(doc["right"]))


def save_forest(forest: RandomForest, path: str | Path) -> None:
    doc = {
        "config": {"n_trees": forest.config.n_trees,
                   "max_depth": forest.config.max_depth,
                   "min_leaf": forest.config.min_leaf,
                   "features_per_split": forest.config.features_per_split,
                   "bootstrap": forest.config.bootstrap,
                   "seed": forest.config.seed},
        "n_features": forest.n_features,
        "trees": [_node_to_doc(t) for t in forest.trees],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def load_forest(path: str | Path) -> RandomForest:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return RandomForest(trees=[_node_from_doc(t) for t in doc["trees"]],
                        config=ForestConfig(**doc["config"]),
                        n_features=doc["n_features"])


def save_detector(detector: DetectorModel, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_tokenizer(detector.tokenizer, directory / "tokenizer")
    save_model(detector.mlm, directory / "mlm")
    save_forest(detector.forest, directory / "forest.json")
    (directory / "calibration.json").write_text(json.dumps(
        {"theta": detector.theta,
         "percentile": detector.calibration_percentile,
         "class_order": list(CLASS_ORDER)}, sort_keys=True), encoding="utf-8")
    (directory / "audit.json").write_text(
        json.dumps(detector.audit, sort_keys=True), encoding="utf-8")


def load_detector(directory: str | Path) -> DetectorModel:
    directory = Path(directory)
    tokenizer = load_tokenizer(directory / "tokenizer")
    mlm = load_model(directory / "mlm", tokenizer)
    forest = load_forest(directory / "forest.json")
    calibration = json.loads((directory / "calibration.json").read_text(encoding="utf-8"))
    audit = json.loads((directory / "audit.json").read_text(encoding="utf-8"))
    return DetectorModel(tokenizer=tokenizer, mlm=mlm, forest=forest,
                         theta=calibration["theta"],
                         calibration_percentile=calibration["percentile"],
                         audit=audit)


def write_verdicts(verdicts: list[Verdict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for v in verdicts:
            fh.write(json.dumps({"id": v.id, "p_abnormal": v.p_abnormal,
                                 "flagged": v.flagged}, sort_keys=True) + "\n")


def read_verdicts(path: str | Path) -> list[Verdict]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").split("\n"):
        if line.strip():
            doc = json.loads(line)
            out.append(Verdict(id=doc["id"], p_abnormal=doc["p_abnormal"],
                               flagged=doc["flagged"]))
    return out
