"""5-fold cross-validation harness and the metric suite.

Folds partition the samples disjointly and exhaustively. The default
patch-level strategy keeps fold sizes within one of each other and, when
stratified, per-class counts within one as well; the slide-grouped
strategy never lets one slide span folds (useful for measuring leakage,
since patches from one slide share appearance). Each round trains on 4
folds (80%) and tests on the held-out fold (20%).

Metrics derive from the confusion matrix: accuracy = trace/total; Cohen's
kappa = (p_o - p_e)/(1 - p_e) with p_e from the marginals; macro-F1 =
mean over classes with support of the per-class harmonic precision/recall
mean. Fold aggregates report mean +/- population standard deviation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import clone

from .errors import MagscopeError
from .levels import CANONICAL_LABELS, N_CLASSES
from .seeding import derive_seed, spawn_rng
from .store import FeatureStore
from .validation import check_labels

DEFAULT_FOLDS = 5


@dataclass
class FoldPlan:
    n_folds: int
    assignments: np.ndarray  # (n,) fold index per sample
    strategy: str            # "patch" | "slide"
    stratified: bool
    seed: int

    def test_indices(self, fold: int) -> np.ndarray:
        return np.nonzero(self.assignments == fold)[0]

    def train_indices(self, fold: int) -> np.ndarray:
        return np.nonzero(self.assignments != fold)[0]


def _least_loaded(loads: np.ndarray, take: int) -> list[int]:
    order = sorted(range(len(loads)), key=lambda f: (loads[f], f))
    return order[:take]


def make_folds(labels: Sequence[int] | np.ndarray, slide_ids: Sequence[str] | None = None,
               n_folds: int = DEFAULT_FOLDS, strategy: str = "patch",
               stratified: bool = True, seed: int = 42) -> FoldPlan:
    """Deterministic fold assignment per (seed, strategy)."""
    y = check_labels(labels)
    n = y.shape[0]
    if n < n_folds:
        raise ValueError(f"need at least {n_folds} samples, got {n}")
    rng = spawn_rng(seed, "folds", strategy, stratified)
    assignments = np.full(n, -1, dtype=np.int64)

    if strategy == "patch":
        if stratified:
            loads = np.zeros(n_folds, dtype=np.int64)
            for cls in range(N_CLASSES):
                cls_idx = np.nonzero(y == cls)[0]
                if cls_idx.size == 0:
                    continue
                cls_idx = rng.permutation(cls_idx)
                base, rem = divmod(cls_idx.size, n_folds)
                per_fold = np.full(n_folds, base, dtype=np.int64)
                per_fold[_least_loaded(loads, rem)] += 1
                stop = np.cumsum(per_fold)
                start = stop - per_fold
                for f in range(n_folds):
                    assignments[cls_idx[start[f]:stop[f]]] = f
                loads += per_fold
        else:
            shuffled = rng.permutation(n)
            assignments[shuffled] = np.arange(n) % n_folds
    elif strategy == "slide":
        if slide_ids is None:
            raise ValueError("slide-grouped folds need slide_ids")
        slide_ids = np.asarray(slide_ids)
        if slide_ids.shape[0] != n:
            raise ValueError("slide_ids length does not match labels")
        unique = sorted(set(slide_ids.tolist()))
        if len(unique) < n_folds:
            raise ValueError(f"slide-grouped folds need >= {n_folds} distinct slides, got {len(unique)}")
        loads = np.zeros(n_folds, dtype=np.int64)
        for sid in rng.permutation(unique):
            members = np.nonzero(slide_ids == sid)[0]
            fold = _least_loaded(loads, 1)[0]
            assignments[members] = fold
            loads[fold] += members.size
    else:
        raise ValueError(f"unknown fold strategy {strategy!r}")

    return FoldPlan(n_folds=n_folds, assignments=assignments, strategy=strategy,
                    stratified=stratified, seed=seed)


def confusion(actual: Sequence[int] | np.ndarray, predicted: Sequence[int] | np.ndarray) -> np.ndarray:
    """Count matrix, rows = actual, cols = predicted, canonical order."""
    a = check_labels(actual, name="actual")
    p = check_labels(predicted, n=a.shape[0], name="predicted")
    cm = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(cm, (a, p), 1)
    return cm


def _check_cm(cm: np.ndarray) -> np.ndarray:
    cm = np.asarray(cm, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {cm.shape}")
    if cm.sum() == 0:
        raise ValueError("confusion matrix is empty")
    return cm


def accuracy(cm: np.ndarray) -> float:
    cm = _check_cm(cm)
    return float(np.trace(cm) / cm.sum())


def kappa(cm: np.ndarray) -> float:
    """Chance-corrected agreement; degenerate p_e = 1 maps to 1 or 0."""
    cm = _check_cm(cm)
    total = cm.sum()
    p_o = np.trace(cm) / total
    p_e = float(np.sum(cm.sum(axis=1) * cm.sum(axis=0)) / (total * total))
    if p_e >= 1.0:
        return 1.0 if p_o == 1.0 else 0.0
    return float((p_o - p_e) / (1.0 - p_e))


def f1(cm: np.ndarray, averaging: str = "macro") -> float:
    """Macro-F1 over classes with support; zero-denominator classes score 0."""
    cm = _check_cm(cm)
    if averaging != "macro":
        raise ValueError(f"only macro averaging is supported, got {averaging!r}")
    row = cm.sum(axis=1)
    col = cm.sum(axis=0)
    diag = np.diag(cm)
    scores = []
    for k in range(cm.shape[0]):
        if row[k] == 0:
            continue  # no support: excluded from the macro mean
        precision = diag[k] / col[k] if col[k] else 0.0
        recall = diag[k] / row[k]
        scores.append(2 * precision * recall / (precision + recall) if precision + recall else 0.0)
    if not scores:
        raise ValueError("no class has support")
    return float(np.mean(scores))


def per_class_accuracy(cm: np.ndarray) -> np.ndarray:
    """Row-normalized diagonal; NaN for classes without support."""
    cm = _check_cm(cm)
    row = cm.sum(axis=1)
    with np.errstate(invalid="ignore"):
        return np.where(row > 0, np.diag(cm) / row, np.nan)


@dataclass
class FoldMetrics:
    fold: int
    n_test: int
    accuracy: float
    kappa: float
    f1: float


@dataclass
class MetricsReport:
    label_order: tuple[str, ...]
    per_fold: list[FoldMetrics]
    mean: dict[str, float]
    std: dict[str, float]
    confusion: np.ndarray
    per_class_accuracy: list[float | None]
    classifier: str = ""
    feature_dim: int = 0
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "label_order": list(self.label_order),
            "per_fold": [vars(m) for m in self.per_fold],
            "mean": self.mean,
            "std": self.std,
            "confusion": self.confusion.tolist(),
            "per_class_accuracy": self.per_class_accuracy,
            "classifier": self.classifier,
            "feature_dim": self.feature_dim,
            "seed": self.seed,
            "extra": self.extra,
        }


def cross_validate(store: FeatureStore, estimator, plan: FoldPlan, seed: int = 42) -> MetricsReport:
    """Train a fresh classifier per fold and aggregate held-out metrics.

    The estimator prototype is cloned per fold; when it exposes a ``seed``
    parameter the clone gets a fold-derived stream, so the whole report is
    a pure function of (store, estimator params, plan, seed).
    """
    if len(store) != plan.assignments.shape[0]:
        raise ValueError(f"store has {len(store)} records, plan covers {plan.assignments.shape[0]}")
    X = store.values.astype(np.float64)
    y = store.labels
    per_fold: list[FoldMetrics] = []
    total_cm = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for fold in range(plan.n_folds):
        train_idx = plan.train_indices(fold)
        test_idx = plan.test_indices(fold)
        model = clone(estimator)
        if "seed" in model.get_params():
            model.set_params(seed=derive_seed(seed, "fold", fold))
        try:
            model.fit(X[train_idx], y[train_idx])
        except Exception as exc:
            raise MagscopeError(f"fold {fold}: classifier training failed: {exc}") from exc
        predicted = np.asarray(model.predict(X[test_idx]))
        cm = confusion(y[test_idx], predicted)
        total_cm += cm
        per_fold.append(FoldMetrics(fold=fold, n_test=int(test_idx.size),
                                    accuracy=accuracy(cm), kappa=kappa(cm), f1=f1(cm)))

    mean = {}
    std = {}
    for name in ("accuracy", "kappa", "f1"):
        values = np.array([getattr(m, name) for m in per_fold])
        mean[name] = float(values.mean())
        std[name] = float(values.std())  # population std over the fold values
    pca = [None if np.isnan(v) else float(v) for v in per_class_accuracy(total_cm)]
    return MetricsReport(
        label_order=CANONICAL_LABELS,
        per_fold=per_fold,
        mean=mean,
        std=std,
        confusion=total_cm,
        per_class_accuracy=pca,
        classifier=type(estimator).__name__,
        feature_dim=store.dim,
        seed=seed,
        extra={"strategy": plan.strategy, "stratified": plan.stratified,
               "estimator_params": {k: v for k, v in estimator.get_params().items()}},
    )
