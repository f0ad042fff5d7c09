"""Regularized linear binary classifiers with sigmoid score calibration.

The solver optimizes the L2-regularized hinge objective

    0.5 * ||w||^2 + C * sum_i max(0, 1 - y_i * (w . x_i + b))

by dual coordinate descent over a seeded random permutation each epoch,
stopping when the relative change of the primal objective drops below a
tolerance. The bias is handled as an extra always-one feature column, so it
is regularized like the weights. Calibration maps raw decision values to
probabilities through 1 / (1 + exp(a*s + b)) fitted against smoothed
cross-entropy targets; one-vs-rest composition renormalizes the per-class
probabilities into a leaf posterior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed
from numba import njit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .core import DataFormatError, DegenerateProblemError, Posterior

_CALIB_SLOPE_CEIL = -1e-12  # slope must stay strictly negative


@njit(cache=True, nogil=True)
def _dual_cd_hinge(xb, y, c, tol, max_epochs, seed):
    n, d = xb.shape
    alpha = np.zeros(n)
    w = np.zeros(d)
    qd = np.zeros(n)
    for i in range(n):
        s = 0.0
        for k in range(d):
            s += xb[i, k] * xb[i, k]
        qd[i] = s

    order = np.empty(n, dtype=np.int64)
    for i in range(n):
        order[i] = i
    state = np.uint64(seed) ^ np.uint64(0x9E3779B97F4A7C15)
    if state == np.uint64(0):
        state = np.uint64(0x853C49E6748FEA9B)

    prev_obj = np.inf
    obj = np.inf
    epochs = 0
    for epoch in range(max_epochs):
        # Fisher-Yates shuffle driven by xorshift64: deterministic per seed
        for i in range(n - 1, 0, -1):
            state ^= state << np.uint64(13)
            state ^= state >> np.uint64(7)
            state ^= state << np.uint64(17)
            j = int(state % np.uint64(i + 1))
            tmp = order[i]
            order[i] = order[j]
            order[j] = tmp

        for t in range(n):
            idx = order[t]
            if qd[idx] == 0.0:
                continue
            g = 0.0
            for k in range(d):
                g += w[k] * xb[idx, k]
            g = y[idx] * g - 1.0
            a = alpha[idx]
            if a <= 0.0:
                pg = g if g < 0.0 else 0.0
            elif a >= c:
                pg = g if g > 0.0 else 0.0
            else:
                pg = g
            if pg != 0.0:
                na = a - g / qd[idx]
                if na < 0.0:
                    na = 0.0
                elif na > c:
                    na = c
                alpha[idx] = na
                delta = (na - a) * y[idx]
                for k in range(d):
                    w[k] += delta * xb[idx, k]

        obj = 0.0
        for k in range(d):
            obj += w[k] * w[k]
        obj *= 0.5
        for i in range(n):
            s = 0.0
            for k in range(d):
                s += w[k] * xb[i, k]
            margin = 1.0 - y[i] * s
            if margin > 0.0:
                obj += c * margin
        epochs = epoch + 1
        if abs(prev_obj - obj) <= tol * max(1.0, abs(obj)):
            break
        prev_obj = obj

    return w, obj, epochs


@dataclass(frozen=True)
class LinearModel:
    """Weights and bias of one binary linear scorer."""

    weights: np.ndarray
    bias: float
    objective: float = np.nan
    epochs: int = 0

    def decision(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return X @ self.weights + self.bias


def train_binary_linear(X, y, C=1.0, tol=1e-6, max_epochs=10000, seed=0) -> LinearModel:
    """Fit one hinge-loss linear model on +/-1 labels.

    Deterministic for a fixed seed; raises on single-sign data.
    """
    X = np.ascontiguousarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.shape[0] != X.shape[0]:
        raise DataFormatError("training matrix and labels disagree")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise DegenerateProblemError("degenerate binary problem: single-sign labels")
    if C <= 0:
        raise DataFormatError("regularization C must be positive")
    xb = np.hstack([X, np.ones((X.shape[0], 1))])
    w, obj, epochs = _dual_cd_hinge(
        np.ascontiguousarray(xb), np.where(y > 0, 1.0, -1.0), float(C),
        float(tol), int(max_epochs), np.uint64(seed),
    )
    return LinearModel(weights=w[:-1].copy(), bias=float(w[-1]), objective=float(obj), epochs=int(epochs))


def hinge_objective(X, y, weights, bias, C=1.0) -> float:
    margins = 1.0 - np.asarray(y, dtype=float) * (np.asarray(X, float) @ weights + bias)
    return 0.5 * (weights @ weights + bias * bias) + C * np.maximum(margins, 0.0).sum()


@dataclass(frozen=True)
class SigmoidCalibration:
    """Score-to-probability map p(s) = 1 / (1 + exp(a*s + b)), a < 0.

    Higher scores always mean higher positive-class probability; on inputs
    where scores anti-correlate with labels the fit is redone with flipped
    labels so the contract survives.
    """

    a: float
    b: float

    def probability(self, scores) -> np.ndarray:
        f = self.a * np.asarray(scores, dtype=float) + self.b
        with np.errstate(over="ignore", invalid="ignore"):
            p = np.where(f >= 0, np.exp(-f) / (1.0 + np.exp(-f)), 1.0 / (1.0 + np.exp(f)))
        return np.clip(p, 1e-300, 1.0 - 1e-16)


def _platt_targets(labels):
    n_pos = int(np.sum(labels > 0))
    n_neg = labels.shape[0] - n_pos
    hi = (n_pos + 1.0) / (n_pos + 2.0)
    lo = 1.0 / (n_neg + 2.0)
    return np.where(labels > 0, hi, lo)


def _platt_value(f, t):
    return float(np.where(f >= 0, t * f + np.log1p(np.exp(-f)), (t - 1.0) * f + np.log1p(np.exp(f))).sum())


def _platt_fit(scores, t, max_iter=200, min_step=1e-10, sigma=1e-12, grad_eps=1e-5):
    n_hi = float(np.sum(t > 0.5))  # smoothed positive targets stay above 0.5
    n_lo = float(t.shape[0] - n_hi)
    a, b = 0.0, float(np.log((n_lo + 1.0) / (n_hi + 1.0)))
    fval = _platt_value(a * scores + b, t)
    for _ in range(max_iter):
        f = a * scores + b
        with np.errstate(over="ignore", invalid="ignore"):
            p = np.where(f >= 0, np.exp(-f) / (1.0 + np.exp(-f)), 1.0 / (1.0 + np.exp(f)))
        q = 1.0 - p
        d2 = p * q
        h11 = float(np.sum(scores * scores * d2)) + sigma
        h22 = float(np.sum(d2)) + sigma
        h21 = float(np.sum(scores * d2))
        d1 = t - p
        g1 = float(np.sum(scores * d1))
        g2 = float(np.sum(d1))
        if abs(g1) < grad_eps and abs(g2) < grad_eps:
            break
        det = h11 * h22 - h21 * h21
        da = -(h22 * g1 - h21 * g2) / det
        db = -(-h21 * g1 + h11 * g2) / det
        gd = g1 * da + g2 * db
        step = 1.0
        while step >= min_step:
            na, nb = a + step * da, b + step * db
            nf = _platt_value(na * scores + nb, t)
            if nf < fval + 1e-4 * step * gd:
                a, b, fval = na, nb, nf
                break
            step = step / 2.0
        else:
            break
    return a, b


def fit_sigmoid(scores, labels) -> SigmoidCalibration:
    """Calibrate decision values against +/-1 labels (smoothed targets)."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels, dtype=float).ravel()
    if scores.shape != labels.shape:
        raise DataFormatError("scores and labels differ in length")
    if not (np.any(labels > 0) and np.any(labels < 0)):
        raise DegenerateProblemError("uncalibratable: single-sign labels")
    if np.unique(scores).size < 2:
        raise DegenerateProblemError("uncalibratable: fewer than 2 distinct scores")
    a, b = _platt_fit(scores, _platt_targets(labels))
    if a > 0.0:
        a, b = _platt_fit(scores, _platt_targets(-labels))
    return SigmoidCalibration(a=min(a, _CALIB_SLOPE_CEIL), b=b)


def _fit_class(X, binary_labels, C, tol, max_epochs, seed):
    model = train_binary_linear(X, binary_labels, C=C, tol=tol, max_epochs=max_epochs, seed=seed)
    calib = fit_sigmoid(model.decision(X), binary_labels)
    return model, calib


class CalibratedOneVsRestClassifier(BaseEstimator, ClassifierMixin):
    """One-vs-rest linear classifier bank with per-class calibration.

    ``predict_proba`` renormalizes the calibrated per-class probabilities so
    each row is a posterior over ``classes_``. Per-class trainings are
    independent and run in parallel when ``n_jobs`` allows; results do not
    depend on the degree of parallelism.

    Parameters
    ----------
    C : float, hinge penalty weight (defaults to 1, the solver's stock value).
    tol : float, relative objective change that counts as converged.
    max_epochs : int, epoch cap for the coordinate descent.
    seed : int, master seed; each class trains on a derived substream.
    n_jobs : int, parallel class fits.
    """

    def __init__(self, C=1.0, tol=1e-6, max_epochs=10000, seed=0, n_jobs=1):
        self.C = C
        self.tol = tol
        self.max_epochs = max_epochs
        self.seed = seed
        self.n_jobs = n_jobs

    def fit(self, X, y):
        X = check_array(X, dtype=float)
        y = np.asarray(y, dtype=int)
        if y.shape[0] != X.shape[0]:
            raise DataFormatError("labels and features differ in length")
        self.classes_ = np.unique(y)
        if self.classes_.size < 2:
            raise DegenerateProblemError("degenerate binary problem: need >= 2 classes")
        self.n_features_in_ = X.shape[1]

        def seed_for(ci):
            return np.random.SeedSequence([int(self.seed), int(ci)]).generate_state(1, np.uint64)[0]

        jobs = (
            delayed(_fit_class)(
                X, np.where(y == ci, 1.0, -1.0), self.C, self.tol, self.max_epochs, seed_for(ci)
            )
            for ci in self.classes_
        )
        fitted = Parallel(n_jobs=self.n_jobs, prefer="threads")(jobs)
        self.weights_ = np.stack([m.weights for m, _ in fitted])
        self.biases_ = np.array([m.bias for m, _ in fitted])
        self.calibrations_ = [c for _, c in fitted]
        self.objectives_ = np.array([m.objective for m, _ in fitted])
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "weights_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise DataFormatError(
                f"feature dimension {X.shape[1]} != trained dimension {self.n_features_in_}"
            )
        return X @ self.weights_.T + self.biases_

    def predict_proba(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        probs = np.column_stack(
            [cal.probability(scores[:, k]) for k, cal in enumerate(self.calibrations_)]
        )
        return probs / probs.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        # argmax ties resolve to the lowest class index (classes_ is sorted)
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


def predict_leaf_posterior(model: CalibratedOneVsRestClassifier, x) -> Posterior:
    """Posterior over the model's classes for a single feature vector."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    probs = model.predict_proba(x)[0]
    return Posterior.normalized(model.classes_, probs)


def score_confusion_matrix(model, X, y) -> np.ndarray:
    """Row-stochastic confusion of posterior argmax, add-one smoothed.

    Entry (i, j) estimates the probability that an item of the i-th model
    class gets argmax j. Smoothing keeps every entry strictly positive, as
    the debiasing transform downstream requires.
    """
    y = np.asarray(y, dtype=int)
    if y.shape[0] == 0:
        raise DataFormatError("confusion matrix needs a non-empty labeled set")
    class_pos = {int(c): k for k, c in enumerate(model.classes_)}
    if not all(int(label) in class_pos for label in y):
        raise DataFormatError("confusion labels outside the model's class set")
    pred = model.predict(X)
    k = model.classes_.size
    counts = np.zeros((k, k))
    for yi, pi in zip(y, pred):
        counts[class_pos[int(yi)], class_pos[int(pi)]] += 1.0
    counts += 1.0
    return counts / counts.sum(axis=1, keepdims=True)


def confusion_from_assignments(true_pos, pred_pos, k) -> np.ndarray:
    """Same smoothing/normalization as above, from precomputed index pairs."""
    counts = np.zeros((k, k))
    for t, p in zip(true_pos, pred_pos):
        counts[int(t), int(p)] += 1.0
    counts += 1.0
    return counts / counts.sum(axis=1, keepdims=True)
