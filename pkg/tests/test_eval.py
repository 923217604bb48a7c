"""Fold plans, confusion-matrix metrics, and the cross-validation harness."""

from __future__ import annotations

import numpy as np
import pytest
from sklearn.base import BaseEstimator, ClassifierMixin

from magscope.errors import MagscopeError
from magscope.evaluation import (FoldPlan, accuracy, confusion, cross_validate, f1,
                                 kappa, make_folds, per_class_accuracy)
from magscope.forest import ForestClassifier
from magscope.store import FeatureStore


# --- naive re-implementations (independent of the library code) -------------

def naive_accuracy(cm):
    return sum(cm[i][i] for i in range(len(cm))) / sum(map(sum, cm))


def naive_kappa(cm):
    n = sum(map(sum, cm))
    k = len(cm)
    p_o = sum(cm[i][i] for i in range(k)) / n
    p_e = sum(sum(cm[i]) * sum(row[i] for row in cm) for i in range(k)) / (n * n)
    if p_e >= 1.0:
        return 1.0 if p_o == 1.0 else 0.0
    return (p_o - p_e) / (1.0 - p_e)


def naive_macro_f1(cm):
    k = len(cm)
    scores = []
    for c in range(k):
        support = sum(cm[c])
        if support == 0:
            continue
        predicted = sum(row[c] for row in cm)
        precision = cm[c][c] / predicted if predicted else 0.0
        recall = cm[c][c] / support
        scores.append(0.0 if precision + recall == 0
                      else 2 * precision * recall / (precision + recall))
    return sum(scores) / len(scores)


class TestMakeFolds:
    def test_balanced_hundred(self):
        labels = np.tile(np.arange(5), 20)  # 20 per class
        plan = make_folds(labels, seed=1)
        sizes = np.bincount(plan.assignments, minlength=5)
        assert sizes.tolist() == [20] * 5
        for fold in range(5):
            fold_labels = labels[plan.assignments == fold]
            assert np.bincount(fold_labels, minlength=5).tolist() == [4] * 5

    def test_partition_disjoint_exhaustive(self):
        labels = np.random.default_rng(2).integers(0, 5, 137)
        plan = make_folds(labels, seed=3)
        assert np.all((plan.assignments >= 0) & (plan.assignments < 5))
        assert sum(plan.test_indices(f).size for f in range(5)) == 137

    def test_size_and_class_balance_random(self):
        rng = np.random.default_rng(4)
        for trial in range(50):
            n = int(rng.integers(5, 200))
            labels = rng.integers(0, 5, n)
            for stratified in (True, False):
                plan = make_folds(labels, stratified=stratified, seed=trial)
                sizes = np.bincount(plan.assignments, minlength=5)
                assert sizes.max() - sizes.min() <= 1
                if stratified:
                    for cls in range(5):
                        per = np.bincount(plan.assignments[labels == cls], minlength=5)
                        assert per.max() - per.min() <= 1

    def test_deterministic(self):
        labels = np.random.default_rng(5).integers(0, 5, 73)
        a = make_folds(labels, seed=6)
        b = make_folds(labels, seed=6)
        assert np.array_equal(a.assignments, b.assignments)
        c = make_folds(labels, seed=7)
        assert not np.array_equal(a.assignments, c.assignments)

    def test_minimum_samples(self):
        with pytest.raises(ValueError, match="at least 5"):
            make_folds(np.array([0, 1, 2, 3]))

    def test_slide_grouped_never_splits_slide(self):
        rng = np.random.default_rng(8)
        for trial in range(30):
            n_slides = int(rng.integers(5, 20))
            per_slide = rng.integers(1, 9, n_slides)
            slide_ids = np.repeat([f"s{i}" for i in range(n_slides)], per_slide)
            labels = rng.integers(0, 5, slide_ids.size)
            plan = make_folds(labels, slide_ids=slide_ids, strategy="slide", seed=trial)
            for sid in set(slide_ids.tolist()):
                folds = set(plan.assignments[slide_ids == sid].tolist())
                assert len(folds) == 1

    def test_slide_grouped_needs_five_slides(self):
        labels = np.zeros(20, dtype=int)
        slide_ids = np.repeat(["a", "b", "c", "d"], 5)
        with pytest.raises(ValueError, match="distinct slides"):
            make_folds(labels, slide_ids=slide_ids, strategy="slide")

    def test_train_test_split_ratio(self):
        labels = np.tile(np.arange(5), 20)
        plan = make_folds(labels, seed=1)
        for fold in range(5):
            assert plan.train_indices(fold).size == 80  # 4 folds = 80%
            assert plan.test_indices(fold).size == 20   # 1 fold = 20%


class TestConfusion:
    def test_perfect_diagonal(self):
        y = np.random.default_rng(0).integers(0, 5, 40)
        cm = confusion(y, y)
        assert np.trace(cm) == 40
        assert cm.sum() == 40

    def test_single_off_diagonal_cell(self):
        actual = np.full(12, 1)     # all 5x
        predicted = np.full(12, 2)  # all 10x
        cm = confusion(actual, predicted)
        assert cm[1, 2] == 12 and cm.sum() == 12

    def test_row_normalized_diagonal_is_per_class_accuracy(self):
        actual = np.array([1] * 100)
        predicted = np.array([1] * 91 + [0] * 5 + [2] * 4)
        cm = confusion(actual, predicted)
        pca = per_class_accuracy(cm)
        assert pca[1] == pytest.approx(0.91)
        assert np.isnan(pca[0])

    def test_unknown_label(self):
        with pytest.raises(ValueError):
            confusion([0, 9], [0, 0])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            confusion([0, 1], [0])


class TestKappa:
    def test_perfect(self):
        cm = np.diag([5, 4, 3, 2, 1])
        assert kappa(cm) == pytest.approx(1.0)

    def test_chance_agreement(self):
        assert kappa(np.array([[25, 25], [25, 25]])) == pytest.approx(0.0)

    def test_hand_computed(self):
        assert kappa(np.array([[8, 2], [1, 9]])) == pytest.approx(0.7, abs=1e-12)

    def test_degenerate_single_class(self):
        assert kappa(np.array([[7, 0], [0, 0]])) == 1.0

    def test_empty_matrix(self):
        with pytest.raises(ValueError, match="empty"):
            kappa(np.zeros((5, 5), dtype=int))


class TestF1:
    def test_perfect(self):
        assert f1(np.diag([3, 3, 3, 3, 3])) == pytest.approx(1.0)

    def test_hand_computed(self):
        expected = (16 / 19 + 18 / 21) / 2
        assert f1(np.array([[8, 2], [1, 9]])) == pytest.approx(expected, abs=1e-12)

    def test_zero_support_excluded(self):
        cm = np.array([[4, 0, 0], [0, 6, 0], [0, 0, 0]])
        assert f1(cm) == pytest.approx(1.0)  # macro over the two supported classes

    def test_zero_denominator_class_scores_zero(self):
        cm = np.array([[0, 5], [0, 5]])  # class 0: no predictions, no hits
        assert f1(cm) == pytest.approx((0.0 + 2 * 0.5 * 1.0 / 1.5) / 2)


class TestMetricProperties:
    def test_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            cm = rng.integers(0, 30, (5, 5))
            cm[tuple(rng.integers(0, 5, 2))] += 10
            perm = rng.permutation(5)
            permuted = cm[np.ix_(perm, perm)]
            assert accuracy(permuted) == pytest.approx(accuracy(cm), abs=1e-12)
            assert kappa(permuted) == pytest.approx(kappa(cm), abs=1e-12)
            assert f1(permuted) == pytest.approx(f1(cm), abs=1e-12)

    def test_agrees_with_naive_reimplementation(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            cm = rng.integers(0, 25, (5, 5))
            if cm.sum() == 0:
                continue
            as_list = cm.tolist()
            assert accuracy(cm) == pytest.approx(naive_accuracy(as_list), abs=1e-12)
            assert kappa(cm) == pytest.approx(naive_kappa(as_list), abs=1e-12)
            if any(sum(row) for row in as_list):
                assert f1(cm) == pytest.approx(naive_macro_f1(as_list), abs=1e-12)

    def test_kappa_one_iff_diagonal(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            diag = rng.integers(1, 20, 5)
            assert kappa(np.diag(diag)) == pytest.approx(1.0)
            off = np.diag(diag)
            off[0, 1] += 1
            assert kappa(off) < 1.0


class _MajorityClassifier(BaseEstimator, ClassifierMixin):
    def __init__(self, seed: int = 0):
        self.seed = seed

    def fit(self, X, y):
        self.majority_ = int(np.bincount(np.asarray(y), minlength=5).argmax())
        return self

    def predict(self, X):
        return np.full(np.asarray(X).shape[0], self.majority_)


def _balanced_store(n_per_class=20, dim=4, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.tile(np.arange(5), n_per_class)
    values = rng.random((labels.size, dim), dtype=np.float32)
    values[np.arange(labels.size), labels % dim] += 2.0 * labels
    return FeatureStore([f"p{i}" for i in range(labels.size)], labels, values)


class TestCrossValidate:
    def test_report_shape(self):
        store = _balanced_store()
        plan = make_folds(store.labels, seed=1)
        report = cross_validate(store, ForestClassifier(n_trees=10, seed=2), plan)
        assert len(report.per_fold) == 5
        assert set(report.mean) == {"accuracy", "kappa", "f1"}
        assert report.confusion.sum() == len(store)
        assert report.label_order == ("2.5x", "5x", "10x", "20x", "40x")

    def test_majority_baseline_chance_level(self):
        store = _balanced_store()
        plan = make_folds(store.labels, seed=1)
        report = cross_validate(store, _MajorityClassifier(), plan)
        assert report.mean["accuracy"] == pytest.approx(0.2, abs=1e-12)
        assert report.mean["kappa"] == pytest.approx(0.0, abs=1e-12)

    def test_aggregate_mean_matches_fold_mean(self):
        store = _balanced_store()
        plan = make_folds(store.labels, seed=1)
        report = cross_validate(store, ForestClassifier(n_trees=10, seed=2), plan)
        accs = [m.accuracy for m in report.per_fold]
        assert report.mean["accuracy"] == pytest.approx(np.mean(accs), abs=1e-12)
        assert report.std["accuracy"] == pytest.approx(np.std(accs), abs=1e-12)

    def test_deterministic(self):
        store = _balanced_store()
        plan = make_folds(store.labels, seed=1)
        r1 = cross_validate(store, ForestClassifier(n_trees=8, seed=2), plan, seed=5)
        r2 = cross_validate(store, ForestClassifier(n_trees=8, seed=2), plan, seed=5)
        assert [vars(m) for m in r1.per_fold] == [vars(m) for m in r2.per_fold]
        assert np.array_equal(r1.confusion, r2.confusion)

    def test_training_failure_names_fold(self):
        class Exploder(BaseEstimator, ClassifierMixin):
            def fit(self, X, y):
                raise RuntimeError("boom")

            def predict(self, X):  # pragma: no cover
                return np.zeros(len(X))

        store = _balanced_store()
        plan = make_folds(store.labels, seed=1)
        with pytest.raises(MagscopeError, match="fold 0"):
            cross_validate(store, Exploder(), plan)

    def test_plan_store_mismatch(self):
        store = _balanced_store()
        plan = make_folds(store.labels[:50], seed=1)
        with pytest.raises(ValueError, match="plan covers"):
            cross_validate(store, _MajorityClassifier(), plan)

    def test_to_dict_serializable(self):
        import json
        store = _balanced_store()
        plan = make_folds(store.labels, seed=1)
        report = cross_validate(store, _MajorityClassifier(), plan)
        payload = json.dumps(report.to_dict())
        assert "confusion" in payload
