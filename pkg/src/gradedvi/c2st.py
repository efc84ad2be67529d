"""Classifier two-sample tests, relative fit index, permutation importance.

The test statistic is the held-out accuracy of a classifier trained to
separate observed response patterns (label 1) from synthetic patterns
sampled from a fitted model (label 0).  Under a perfectly fitting model
the accuracy concentrates at 1/2; the exact test uses the asymptotically
normal null acc ~ N(1/2, 1/(4 N_test)), and the approximate test with
tolerance delta uses acc ~ N(1/2 + delta, (1/4 - delta^2) / N_test).

Classifiers:

* k-nearest neighbors with Hamming distance (Euclidean for real-valued
  data) and k = floor(sqrt(N_test)); neighbor ties at the k-th position
  are broken by training-row index for determinism.
* a single-hidden-layer neural network (100 rectified-linear units) with
  a weight-decay grid {10^n : n in {-1, -1/2, 0, 1/2, 1}} tuned by
  accuracy on a 25% validation split of the training set, and a
  stochastic-gradient step cap of floor(10000 * 200 / N_test).

Predicted class is 1(prob > 1/2): a probability of exactly 1/2 counts as
class 0.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import norm

from . import grm
from .modelspec import ModelSpec, zero_factor

#: Weight-decay grid for the neural classifier.
ALPHA_GRID = tuple(10.0**n for n in (-1.0, -0.5, 0.0, 0.5, 1.0))

#: Fraction of the training set held out for weight-decay selection.
VALIDATION_FRACTION = 0.25

#: Validation-accuracy slack within which the strongest decay wins.
TUNING_SLACK = 0.005


def nn_step_cap(n_test: int) -> int:
    """Stochastic-gradient step cap floor(10000 * 200 / N_test)."""
    return (10000 * 200) // int(n_test)


def _seedseq(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def knn_k(n_test: int) -> int:
    """Neighbor count floor(sqrt(N_test))."""
    return int(math.floor(math.sqrt(n_test)))


# ----- data set construction ---------------------------------------------------


@dataclass
class LabeledSet:
    """Shuffled real-vs-synthetic data with a disjoint train/test split."""

    patterns: np.ndarray   # (2N, J)
    labels: np.ndarray     # (2N,) 1 = real, 0 = synthetic
    train_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def n_test(self) -> int:
        return int(self.test_idx.size)

    def train(self):
        return self.patterns[self.train_idx], self.labels[self.train_idx]

    def test(self):
        return self.patterns[self.test_idx], self.labels[self.test_idx]


def build_split(real: np.ndarray, synthetic: np.ndarray, rng) -> LabeledSet:
    """Label, pool, shuffle, and split into equal train and test halves."""
    real = np.asarray(real)
    synthetic = np.asarray(synthetic)
    if real.ndim != 2 or synthetic.ndim != 2 or real.shape[1] != synthetic.shape[1]:
        raise ValueError(
            f"real {real.shape} and synthetic {synthetic.shape} must be 2-D "
            "with equal column counts"
        )
    if real.shape[0] != synthetic.shape[0]:
        raise ValueError("real and synthetic must have the same number of rows")
    rng = np.random.default_rng(rng)
    n = real.shape[0]
    patterns = np.concatenate([real, synthetic], axis=0)
    labels = np.concatenate([np.ones(n, dtype=int), np.zeros(n, dtype=int)])
    perm = rng.permutation(2 * n)
    return LabeledSet(
        patterns=patterns[perm],
        labels=labels[perm],
        train_idx=np.arange(n),
        test_idx=np.arange(n, 2 * n),
    )


# ----- classifiers ---------------------------------------------------------------


@dataclass
class ClassifierHandle:
    """A fitted classifier: kind, tuned settings, and a predict function."""

    kind: str
    hyperparameters: dict
    predict_proba: object = field(repr=False)

    def __call__(self, patterns: np.ndarray) -> np.ndarray:
        return self.predict_proba(patterns)


def _knn_proba(train_x, train_y, test_x, k, metric, chunk=512):
    """Mean neighbor label over the k nearest training rows, per test row."""
    probs = np.empty(test_x.shape[0])
    for start in range(0, test_x.shape[0], chunk):
        rows = test_x[start : start + chunk]
        d = cdist(rows, train_x, metric=metric)
        # stable sort: equal distances resolve to the lowest training index
        nearest = np.argsort(d, axis=1, kind="stable")[:, :k]
        probs[start : start + rows.shape[0]] = train_y[nearest].mean(axis=1)
    return probs


def knn_fit_predict(
    labeled: LabeledSet,
    metric: str = "hamming",
    train_fraction: float | None = None,
    rng=None,
) -> tuple[np.ndarray, ClassifierHandle]:
    """Fit the k-NN classifier and return test-set probabilities.

    Args:
        metric: "hamming" for categorical patterns, "euclidean" for
            real-valued data.
        train_fraction: optionally subsample the training rows (useful
            only at very large N); default uses every training row.
    """
    train_x, train_y = labeled.train()
    test_x, _ = labeled.test()
    if train_x.shape[0] == 0 or test_x.shape[0] == 0:
        raise ValueError("train and test sets must be nonempty")
    if train_fraction is not None:
        rng = np.random.default_rng(rng)
        m = max(1, int(round(train_fraction * train_x.shape[0])))
        keep = rng.choice(train_x.shape[0], size=m, replace=False)
        keep.sort()
        train_x, train_y = train_x[keep], train_y[keep]
    k = min(knn_k(labeled.n_test), train_x.shape[0])
    train_x = np.ascontiguousarray(train_x, dtype=float)
    train_y = np.asarray(train_y, dtype=float)

    def predict(patterns: np.ndarray) -> np.ndarray:
        return _knn_proba(train_x, train_y, np.asarray(patterns, dtype=float), k, metric)

    probs = predict(test_x)
    handle = ClassifierHandle(
        kind="knn", hyperparameters={"k": k, "metric": metric}, predict_proba=predict
    )
    return probs, handle


def nn_fit_predict(labeled: LabeledSet, rng=None) -> tuple[np.ndarray, ClassifierHandle]:
    """Fit the neural classifier with weight-decay tuning.

    The decay grid is searched on a 25% validation holdout; among
    candidates within 0.5% of the best validation accuracy the largest
    decay wins.  The selected model is refitted on the full training set.
    """
    from sklearn.exceptions import ConvergenceWarning
    from sklearn.neural_network import MLPClassifier

    rng = np.random.default_rng(rng)
    train_x, train_y = labeled.train()
    test_x, _ = labeled.test()
    if train_x.shape[0] == 0 or test_x.shape[0] == 0:
        raise ValueError("train and test sets must be nonempty")
    train_x = np.asarray(train_x, dtype=float)
    cap = max(1, nn_step_cap(labeled.n_test))

    perm = rng.permutation(train_x.shape[0])
    n_val = max(1, int(round(VALIDATION_FRACTION * train_x.shape[0])))
    val_idx, fit_idx = perm[:n_val], perm[n_val:]

    def make(alpha, seed):
        return MLPClassifier(
            hidden_layer_sizes=(100,),
            activation="relu",
            alpha=alpha,
            max_iter=cap,
            random_state=int(seed),
        )

    seeds = rng.integers(0, 2**31 - 1, size=len(ALPHA_GRID) + 1)
    val_acc = np.empty(len(ALPHA_GRID))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        for i, alpha in enumerate(ALPHA_GRID):
            clf = make(alpha, seeds[i])
            clf.fit(train_x[fit_idx], train_y[fit_idx])
            val_probs = clf.predict_proba(train_x[val_idx])[:, list(clf.classes_).index(1)]
            val_acc[i] = accuracy(val_probs, train_y[val_idx])
        best = float(np.max(val_acc))
        eligible = [i for i in range(len(ALPHA_GRID)) if val_acc[i] >= best - TUNING_SLACK]
        chosen = max(eligible, key=lambda i: ALPHA_GRID[i])
        final = make(ALPHA_GRID[chosen], seeds[-1])
        final.fit(train_x, train_y)

    col = list(final.classes_).index(1)

    def predict(patterns: np.ndarray) -> np.ndarray:
        return final.predict_proba(np.asarray(patterns, dtype=float))[:, col]

    probs = predict(test_x)
    handle = ClassifierHandle(
        kind="nn",
        hyperparameters={"alpha": ALPHA_GRID[chosen], "step_cap": cap},
        predict_proba=predict,
    )
    return probs, handle


# ----- the test statistic and p-values -------------------------------------------


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Test-set accuracy with predicted class 1(prob > 1/2)."""
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if probs.size == 0:
        raise ValueError("empty test set")
    preds = (probs > 0.5).astype(int)
    return float(np.mean(preds == labels))


def exact_pvalue(acc: float, n_test: int) -> float:
    """One-sided p-value under the exact null acc ~ N(1/2, 1/(4 N_test))."""
    z = (acc - 0.5) * 2.0 * math.sqrt(n_test)
    return float(norm.sf(z))


def approx_pvalue(acc: float, n_test: int, delta: float) -> float:
    """One-sided p-value under the approximate null with tolerance delta."""
    if not 0.0 < delta < 0.5:
        raise ValueError(f"delta must be in (0, 1/2), got {delta}")
    se = math.sqrt((0.25 - delta**2) / n_test)
    return float(norm.sf((acc - 0.5 - delta) / se))


def power(alpha: float, n_test: int, delta: float, epsilon: float) -> float:
    """Approximate power of the (approximate) C2ST at effect size epsilon.

    Setting delta = 0 recovers the power of the exact test.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    if not 0.0 <= delta < 0.5:
        raise ValueError(f"delta must be in [0, 1/2), got {delta}")
    if not 0.0 <= epsilon < 0.5 - delta:
        raise ValueError(f"epsilon must be in [0, 1/2 - delta), got {epsilon}")
    null_sd = math.sqrt(0.25 - delta**2)
    var_alt = 0.25 - delta**2 - 2.0 * delta * epsilon - epsilon**2
    z = (epsilon * math.sqrt(n_test) - null_sd * norm.ppf(1.0 - alpha)) / math.sqrt(var_alt)
    return float(norm.cdf(z))


# ----- parameter counting and the relative fit index ------------------------------


def count_parameters(spec: ModelSpec) -> int:
    """Fitted model parameters: intercepts + free loadings + free angles."""
    return spec.n_free_parameters


def rfi(acc_prop: float, acc_base: float, m_prop: int, m_base: int) -> float:
    """Relative fit index 1 - (M_prop / M_base) * (Delta_prop / Delta_base).

    Deltas are accuracies in excess of chance.  The index is not clamped:
    values above one indicate possible classifier overfitting and values
    below 1 - M_prop / M_base indicate fit worse than the baseline.
    """
    delta_base = acc_base - 0.5
    if delta_base == 0.0:
        raise ZeroDivisionError("baseline accuracy equals 1/2; RFI undefined")
    delta_prop = acc_prop - 0.5
    return 1.0 - (m_prop / m_base) * (delta_prop / delta_base)


# ----- permutation importance -----------------------------------------------------


def permutation_importance(
    predict_proba,
    patterns: np.ndarray,
    labels: np.ndarray,
    reps: int = 5,
    rng=None,
) -> np.ndarray:
    """Per-item mean accuracy drop when one column is shuffled.

    Args:
        predict_proba: fitted classifier (ClassifierHandle or callable).
        patterns: (N, J) test patterns.
        labels: (N,) test labels.
        reps: shuffles per item (T).

    Returns:
        (J,) importances acc - mean_t acc(column j shuffled).
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    rng = np.random.default_rng(rng)
    patterns = np.asarray(patterns)
    base = accuracy(predict_proba(patterns), labels)
    J = patterns.shape[1]
    imp = np.empty(J)
    for j in range(J):
        drop = 0.0
        for _ in range(reps):
            shuffled = patterns.copy()
            shuffled[:, j] = shuffled[rng.permutation(patterns.shape[0]), j]
            drop += accuracy(predict_proba(shuffled), labels)
        imp[j] = base - drop / reps
    return imp


# ----- orchestration ---------------------------------------------------------------


@dataclass
class C2STOutcome:
    """Result of one classifier two-sample test."""

    acc: float
    p_value: float
    delta: float
    probs: np.ndarray
    labels: np.ndarray
    n_test: int
    handle: ClassifierHandle
    test_patterns: np.ndarray = field(repr=False, default=None)

    def per_observation_correct(self) -> np.ndarray:
        preds = (self.probs > 0.5).astype(int)
        return (preds == self.labels).astype(int)


@dataclass
class RFIOutcome:
    acc_prop: float
    acc_base: float
    m_prop: int
    m_base: int
    rfi: float
    proposed: C2STOutcome
    baseline: C2STOutcome


def c2st_from_samples(
    real: np.ndarray,
    synthetic: np.ndarray,
    classifier: str = "knn",
    delta: float = 0.0,
    seed=0,
    metric: str = "hamming",
    knn_train_fraction: float | None = None,
) -> C2STOutcome:
    """Run the five-step test given observed and synthetic samples."""
    split_seed, clf_seed = _seedseq(seed).spawn(2)
    labeled = build_split(real, synthetic, np.random.default_rng(split_seed))
    if classifier == "knn":
        probs, handle = knn_fit_predict(
            labeled, metric=metric, train_fraction=knn_train_fraction, rng=np.random.default_rng(clf_seed)
        )
    elif classifier == "nn":
        probs, handle = nn_fit_predict(labeled, rng=np.random.default_rng(clf_seed))
    else:
        raise ValueError(f"unknown classifier kind {classifier!r} (use 'knn' or 'nn')")
    test_x, test_y = labeled.test()
    acc = accuracy(probs, test_y)
    p = exact_pvalue(acc, labeled.n_test) if delta == 0.0 else approx_pvalue(acc, labeled.n_test, delta)
    return C2STOutcome(
        acc=acc, p_value=p, delta=delta, probs=probs, labels=test_y,
        n_test=labeled.n_test, handle=handle, test_patterns=test_x,
    )


def run_c2st(
    model,
    data: np.ndarray,
    classifier: str = "knn",
    delta: float = 0.0,
    seed=0,
    metric: str = "hamming",
    knn_train_fraction: float | None = None,
) -> C2STOutcome:
    """Sample synthetic data from a fitted model and test it against data.

    ``model`` needs a ``sample(n, rng)`` method (a FitResult, a
    GRMSampler, or a BaselineModel).
    """
    data = np.asarray(data)
    sample_seed, rest_seed = _seedseq(seed).spawn(2)
    synthetic = model.sample(data.shape[0], np.random.default_rng(sample_seed))
    return c2st_from_samples(
        data, synthetic, classifier=classifier, delta=delta, seed=rest_seed,
        metric=metric, knn_train_fraction=knn_train_fraction,
    )


def run_rfi(
    model,
    spec: ModelSpec,
    data: np.ndarray,
    classifier: str = "knn",
    seed=0,
    knn_train_fraction: float | None = None,
) -> RFIOutcome:
    """C2ST-based relative fit index against the zero-factor baseline.

    The proposed-model and baseline tests use independent splits and
    seeds.
    """
    data = np.asarray(data, dtype=int)
    prop_seed, base_seed = _seedseq(seed).spawn(2)
    proposed = run_c2st(
        model, data, classifier=classifier, delta=0.0, seed=prop_seed,
        knn_train_fraction=knn_train_fraction,
    )
    cats = spec.item_categories
    baseline_model = grm.BaselineModel(grm.zero_factor_mle(data, cats), cats)
    baseline = run_c2st(
        baseline_model, data, classifier=classifier, delta=0.0, seed=base_seed,
        knn_train_fraction=knn_train_fraction,
    )
    m_prop = count_parameters(spec)
    m_base = count_parameters(zero_factor(cats))
    return RFIOutcome(
        acc_prop=proposed.acc,
        acc_base=baseline.acc,
        m_prop=m_prop,
        m_base=m_base,
        rfi=rfi(proposed.acc, baseline.acc, m_prop, m_base),
        proposed=proposed,
        baseline=baseline,
    )
