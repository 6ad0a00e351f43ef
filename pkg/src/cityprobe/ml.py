"""Regressors, k-fold cross-validation and RMSE scoring.

Trees are grown by an exhaustive CART search compiled with numba; forests and
boosting are thin loops around the same builder.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from numba import njit
from scipy.linalg import cho_factor, cho_solve

from .dataset import FoldAssignment, PlaceId, TargetTable
from .errors import (
    ColumnMismatch,
    Empty,
    FoldTooSmall,
    LengthMismatch,
    NoOverlap,
    Singular,
    TooFewRows,
)
from .features import FeatureMatrix

METHODS = ("ExpFeature", "ImpFeature", "DirectAsk", "NoFeature")


# ---------------------------------------------------------------- specs


@dataclass(frozen=True)
class LinearSpec:
    ridge: float = 1e-6
    kind = "Linear"
    rank = 0

    def __post_init__(self):
        if not self.ridge >= 0:
            raise ValueError("ridge must be >= 0")


@dataclass(frozen=True)
class TreeSpec:
    max_depth: int = 6
    min_leaf: int = 2
    kind = "DecisionTree"
    rank = 1

    def __post_init__(self):
        if self.max_depth < 0 or self.min_leaf < 1:
            raise ValueError("need max_depth >= 0 and min_leaf >= 1")


@dataclass(frozen=True)
class ForestSpec:
    n_trees: int = 100
    max_depth: int = 6
    min_leaf: int = 2
    seed: int = 0
    bootstrap: bool = True
    kind = "RandomForest"
    rank = 2

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 0 or self.min_leaf < 1:
            raise ValueError("need n_trees >= 1, max_depth >= 0, min_leaf >= 1")


@dataclass(frozen=True)
class BoostingSpec:
    n_rounds: int = 100
    learning_rate: float = 0.1
    max_depth: int = 6
    min_leaf: int = 2
    seed: int = 0
    kind = "GradientBoosting"
    rank = 3

    def __post_init__(self):
        if self.n_rounds < 0 or not self.learning_rate > 0 or self.max_depth < 0 or self.min_leaf < 1:
            raise ValueError("need n_rounds >= 0, learning_rate > 0, max_depth >= 0, min_leaf >= 1")


@dataclass(frozen=True)
class MeanSpec:
    kind = "MeanBaseline"
    rank = 4


RegressorSpec = LinearSpec | TreeSpec | ForestSpec | BoostingSpec

MODEL_ALIASES = {
    "linear": LinearSpec,
    "tree": TreeSpec,
    "forest": ForestSpec,
    "gbt": BoostingSpec,
}


def spec_to_dict(spec) -> dict:
    return {"kind": spec.kind, **asdict(spec)}


def specs_from_names(names: Sequence[str], seed: int = 0) -> list:
    out = []
    for name in names:
        cls = MODEL_ALIASES.get(name.strip().lower())
        if cls is None:
            raise ValueError(f"unknown model {name!r}; choose from {sorted(MODEL_ALIASES)}")
        out.append(cls(seed=seed) if "seed" in cls.__dataclass_fields__ else cls())
    return out


# ---------------------------------------------------------------- metric


def rmse(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=float).ravel()
    t = np.asarray(targets, dtype=float).ravel()
    if p.shape != t.shape:
        raise LengthMismatch(f"{p.size} predictions vs {t.size} targets")
    if p.size == 0:
        raise Empty("rmse of empty vectors")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(t))):
        raise ValueError("rmse needs finite inputs")
    return float(math.sqrt(np.mean((p - t) ** 2)))


# ---------------------------------------------------------------- CART core


@njit(cache=True)
def _grow(X, y, idx, max_depth, min_leaf, feat_order, n_try):
    max_nodes = feat_order.shape[0]
    feature = np.full(max_nodes, -1, dtype=np.int64)
    threshold = np.zeros(max_nodes)
    left = np.full(max_nodes, -1, dtype=np.int64)
    right = np.full(max_nodes, -1, dtype=np.int64)
    value = np.zeros(max_nodes)

    # stack of (node, start, end, depth)
    stack = np.zeros((max_nodes, 4), dtype=np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = idx.shape[0]
    stack[0, 3] = 0
    top = 1
    n_nodes = 1
    while top > 0:
        top -= 1
        node = stack[top, 0]
        start = stack[top, 1]
        end = stack[top, 2]
        depth = stack[top, 3]
        n = end - start

        s = 0.0
        sq = 0.0
        lo = np.inf
        hi = -np.inf
        for i in range(start, end):
            v = y[idx[i]]
            s += v
            sq += v * v
            lo = min(lo, v)
            hi = max(hi, v)
        # a pure node keeps its exact target instead of a rounded mean
        mean = lo if lo == hi else s / n
        value[node] = mean
        parent_sse = 0.0
        for i in range(start, end):
            d = y[idx[i]] - mean
            parent_sse += d * d
        if depth >= max_depth or n < 2 * min_leaf or parent_sse <= 1e-14 * (1.0 + sq):
            continue

        best_sse = parent_sse
        best_f = -1
        best_thr = 0.0
        xs = np.empty(n)
        ys = np.empty(n)
        for j in range(n_try):
            f = feat_order[node, j]
            for i in range(n):
                xs[i] = X[idx[start + i], f]
            order = np.argsort(xs, kind="mergesort")
            for i in range(n):
                ys[i] = y[idx[start + order[i]]]
            sl = 0.0
            ql = 0.0
            for i in range(1, n):
                v = ys[i - 1]
                sl += v
                ql += v * v
                if i < min_leaf or n - i < min_leaf:
                    continue
                a = xs[order[i - 1]]
                b = xs[order[i]]
                if not a < b:
                    continue
                sr = s - sl
                qr = sq - ql
                sse = (ql - sl * sl / i) + (qr - sr * sr / (n - i))
                if sse < best_sse - 1e-12 * (1.0 + abs(best_sse)):
                    best_sse = sse
                    best_f = f
                    thr = 0.5 * (a + b)
                    if not thr < b:
                        thr = a
                    best_thr = thr
        if best_f < 0 or n_nodes + 2 > max_nodes:
            continue

        # partition idx[start:end] in place, left side first
        lo = start
        hi = end - 1
        while lo <= hi:
            if X[idx[lo], best_f] <= best_thr:
                lo += 1
            else:
                tmp = idx[lo]
                idx[lo] = idx[hi]
                idx[hi] = tmp
                hi -= 1
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = n_nodes
        right[node] = n_nodes + 1
        stack[top, 0] = n_nodes + 1
        stack[top, 1] = lo
        stack[top, 2] = end
        stack[top, 3] = depth + 1
        stack[top + 1, 0] = n_nodes
        stack[top + 1, 1] = start
        stack[top + 1, 2] = lo
        stack[top + 1, 3] = depth + 1
        top += 2
        n_nodes += 2
    return feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes], value[:n_nodes]


@njit(cache=True)
def _predict_tree(X, feature, threshold, left, right, value):
    out = np.empty(X.shape[0])
    for r in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[r, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[r] = value[node]
    return out


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return _predict_tree(np.ascontiguousarray(X, dtype=float), self.feature, self.threshold,
                             self.left, self.right, self.value)


def grow_tree(X, y, max_depth=6, min_leaf=2, rows=None, n_try=None, rng=None) -> Tree:
    """Grow one CART regression tree.

    Splits minimise the summed squared error of the two children, trying every
    midpoint between consecutive distinct values. With ``n_try`` below the
    column count each node considers a random feature subset drawn from ``rng``.
    """
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    d = X.shape[1]
    idx = np.arange(X.shape[0], dtype=np.int64) if rows is None else np.array(rows, dtype=np.int64)
    max_nodes = 2 ** (max_depth + 1) - 1 if max_depth < 20 else 2 * len(idx) + 1
    max_nodes = min(max_nodes, 2 * len(idx) + 1)
    if n_try is None or n_try >= d:
        n_try = d
        feat_order = np.tile(np.arange(d, dtype=np.int64), (max_nodes, 1))
    else:
        feat_order = np.argsort(rng.random((max_nodes, d)), axis=1).astype(np.int64)
    if d == 0:
        feat_order = np.zeros((max_nodes, 0), dtype=np.int64)
    return Tree(*_grow(X, y, idx, max_depth, min_leaf, feat_order, n_try))


# ---------------------------------------------------------------- fit/predict


@dataclass
class FittedModel:
    spec: object
    params: dict
    n_features: int
    train_places: list = field(default_factory=list)


def _check_xy(X, y):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.shape[0]:
        raise LengthMismatch(f"{X.shape[0]} rows vs {y.shape[0]} targets")
    if X.shape[0] < 2:
        raise TooFewRows(f"need at least 2 training rows, got {X.shape[0]}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("training data has non-finite values")
    return X, y


def _fit_linear(spec: LinearSpec, X, y):
    # columns are standardized; intercept is the (unpenalized) target mean
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    Z = (X - mu) / sd
    y_mean = y.mean()
    d = X.shape[1]
    if d == 0:
        return {"mu": mu, "sd": sd, "coef": np.zeros(0), "intercept": y_mean}
    if spec.ridge == 0 and np.linalg.matrix_rank(Z) < d:
        raise Singular("X'X is rank-deficient and ridge is 0")
    A = Z.T @ Z + spec.ridge * np.eye(d)
    try:
        coef = cho_solve(cho_factor(A), Z.T @ (y - y_mean))
    except np.linalg.LinAlgError as exc:
        raise Singular(str(exc)) from exc
    return {"mu": mu, "sd": sd, "coef": coef, "intercept": y_mean}


def _fit_forest(spec: ForestSpec, X, y):
    rng = np.random.default_rng(spec.seed)
    n, d = X.shape
    n_try = max(1, int(math.sqrt(d))) if d else 0
    trees = []
    for _ in range(spec.n_trees):
        rows = rng.integers(0, n, size=n) if spec.bootstrap else np.arange(n)
        trees.append(grow_tree(X, y, spec.max_depth, spec.min_leaf, rows=rows, n_try=n_try, rng=rng))
    return {"trees": trees}


def _fit_boosting(spec: BoostingSpec, X, y):
    base = float(y.mean())
    resid = y - base
    trees = []
    for _ in range(spec.n_rounds):
        tree = grow_tree(X, resid, spec.max_depth, spec.min_leaf)
        resid = resid - spec.learning_rate * tree.predict(X)
        trees.append(tree)
    return {"base": base, "trees": trees}


def fit(spec, X, y, places: Sequence[PlaceId] | None = None) -> FittedModel:
    if isinstance(spec, MeanSpec):
        return mean_baseline(y)
    X, y = _check_xy(X, y)
    if isinstance(spec, LinearSpec):
        params = _fit_linear(spec, X, y)
    elif isinstance(spec, TreeSpec):
        params = {"tree": grow_tree(X, y, spec.max_depth, spec.min_leaf)}
    elif isinstance(spec, ForestSpec):
        params = _fit_forest(spec, X, y)
    elif isinstance(spec, BoostingSpec):
        params = _fit_boosting(spec, X, y)
    else:
        raise TypeError(f"unknown regressor spec {spec!r}")
    return FittedModel(spec, params, X.shape[1], list(places or []))


def predict(model: FittedModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None] if model.n_features == 1 else X[None, :]
    if isinstance(model.spec, MeanSpec):
        return np.full(X.shape[0], model.params["mean"])
    if X.shape[1] != model.n_features:
        raise ColumnMismatch(f"model expects {model.n_features} columns, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("prediction inputs must be finite")
    p = model.params
    spec = model.spec
    if isinstance(spec, LinearSpec):
        return ((X - p["mu"]) / p["sd"]) @ p["coef"] + p["intercept"]
    if isinstance(spec, TreeSpec):
        return p["tree"].predict(X)
    if isinstance(spec, ForestSpec):
        return np.mean([t.predict(X) for t in p["trees"]], axis=0)
    if isinstance(spec, BoostingSpec):
        out = np.full(X.shape[0], p["base"])
        for t in p["trees"]:
            out += spec.learning_rate * t.predict(X)
        return out
    raise TypeError(f"unknown regressor spec {spec!r}")


def mean_baseline(train_targets) -> FittedModel:
    y = np.asarray(train_targets, dtype=float).ravel()
    if y.size == 0:
        raise Empty("mean baseline needs at least one target")
    return FittedModel(MeanSpec(), {"mean": float(y.mean())}, 0)


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    task_id: str
    method: str
    per_fold_rmse: list[float]
    mean_rmse: float
    chosen_model: dict | None = None
    seeds: dict = field(default_factory=dict)
    drop_counts: dict = field(default_factory=dict)
    baseline_fold_rmse: list[float] = field(default_factory=list)
    beats_baseline: list[bool] = field(default_factory=list)
    candidates: list[dict] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return len(self.per_fold_rmse)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalResult":
        return cls(**d)


ML_NOTES = {
    "model_family_substitution": "XGBoost and AdaBoost are not run; GradientBoosting covers the boosting family",
    "linear_standardization": "Linear standardizes feature columns to zero mean and unit variance inside fit",
}


def _fold_indices(places, folds: FoldAssignment):
    fold_ids = np.array([folds.assignment[p] for p in places])
    out = []
    for f in range(folds.k):
        test = np.flatnonzero(fold_ids == f)
        train = np.flatnonzero(fold_ids != f)
        if len(train) < 2 or len(test) == 0:
            raise FoldTooSmall(f"fold {f}: {len(train)} training rows, {len(test)} test rows")
        out.append((train, test))
    return out


def _fold_scores(spec, X, y, splits):
    scores = []
    for train, test in splits:
        model = fit(spec, X[train], y[train])
        scores.append(rmse(predict(model, X[test]), y[test]))
    return scores


def cross_validate(X: FeatureMatrix, y: TargetTable, folds: FoldAssignment, specs: Sequence,
                   task_id: str = "", method: str | None = None) -> EvalResult:
    """Score every spec with k-fold CV and keep the one with the lowest mean RMSE.

    Ties go to the simpler family (Linear, DecisionTree, RandomForest,
    GradientBoosting). The mean baseline is scored on the same folds and the
    result records, per fold, whether the chosen model beat it.
    """
    if not specs:
        raise ValueError("need at least one regressor spec")
    missing = [p for p in X.places if p not in y.entries]
    if missing:
        raise NoOverlap(f"{len(missing)} feature rows have no target, e.g. {missing[0]}")
    uncovered = [p for p in X.places if p not in folds.assignment]
    if uncovered:
        raise ValueError(f"{len(uncovered)} places have no fold, e.g. {uncovered[0]}")
    targets = y.values(X.places)
    splits = _fold_indices(X.places, folds)
    candidates = []
    for pos, spec in enumerate(specs):
        scores = _fold_scores(spec, X.values, targets, splits)
        candidates.append((float(np.mean(scores)), spec.rank, pos, spec, scores))
    baseline = _fold_scores(MeanSpec(), X.values, targets, splits)
    best = min(candidates, key=lambda c: c[:3])
    _, _, _, spec, scores = best
    return EvalResult(
        task_id=task_id,
        method=method or ("ExpFeature" if X.provenance == "explicit" else "ImpFeature"),
        per_fold_rmse=[float(s) for s in scores],
        mean_rmse=float(np.mean(scores)),
        chosen_model=spec_to_dict(spec),
        seeds={"folds": folds.seed},
        baseline_fold_rmse=[float(b) for b in baseline],
        beats_baseline=[bool(s < b) for s, b in zip(scores, baseline)],
        candidates=[{"model": spec_to_dict(c[3]), "per_fold_rmse": [float(s) for s in c[4]],
                     "mean_rmse": c[0]} for c in candidates],
        notes=dict(ML_NOTES),
    )


def cross_validate_baseline(y: TargetTable, folds: FoldAssignment, task_id: str = "",
                            places: Sequence[PlaceId] | None = None) -> EvalResult:
    """No-Feature method: predict each training fold's mean target."""
    places = list(places if places is not None else y.places)
    targets = y.values(places)
    dummy = np.zeros((len(places), 0))
    scores = _fold_scores(MeanSpec(), dummy, targets, _fold_indices(places, folds))
    return EvalResult(
        task_id=task_id,
        method="NoFeature",
        per_fold_rmse=[float(s) for s in scores],
        mean_rmse=float(np.mean(scores)),
        seeds={"folds": folds.seed},
        baseline_fold_rmse=[float(s) for s in scores],
        beats_baseline=[False] * len(scores),
    )


def evaluate_direct(answers: Mapping[PlaceId, object], y: TargetTable, task_id: str = "") -> EvalResult:
    """Score direct answers against targets with a single RMSE, no folds."""
    places = [p for p in y.places if p in answers]
    if not places:
        raise NoOverlap("no answered place has a target")
    preds = [float(getattr(answers[p], "pred", answers[p])) for p in places]
    score = rmse(preds, y.values(places))
    return EvalResult(
        task_id=task_id,
        method="DirectAsk",
        per_fold_rmse=[score],
        mean_rmse=score,
        drop_counts={"unanswered": len(y) - len(places)},
    )
