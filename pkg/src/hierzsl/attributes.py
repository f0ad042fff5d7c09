"""Semantic attribute prediction and attribute-driven class posteriors.

Two routes produce a ternary attribute estimate per item: a bank of
per-attribute classifiers trained on features (direct), or the expectation
of the ground-truth attribute values under a leaf-class posterior followed
by thresholding (indirect). Either estimate is turned into a posterior over
the full class catalog by multiplying, per attribute, the probability of
the observed prediction given each class's ground-truth value, using the
attribute classifiers' measured error rates on validation data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .core import DataFormatError, DegenerateProblemError, Posterior
from .linear import fit_sigmoid, train_binary_linear

TERNARY_ORDER = (-1, 0, 1)  # slot order of every confidence triple
CONSTANT_FLOOR = 1e-6


@dataclass(frozen=True)
class AttributeEstimate:
    """Ternary attribute vector with per-attribute confidence triples."""

    values: np.ndarray
    confidences: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=int))
        object.__setattr__(self, "confidences", np.asarray(self.confidences, dtype=float))

    def check(self):
        if self.confidences.shape != (self.values.shape[0], 3):
            raise DataFormatError("confidence triples must be (n_attributes, 3)")
        sums = self.confidences.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            raise DataFormatError("confidence triple does not sum to 1")
        slots = self.values + 1
        best = self.confidences.max(axis=1)
        chosen = self.confidences[np.arange(self.values.shape[0]), slots]
        if np.any(chosen < best - 1e-12):
            raise DataFormatError("ternary value does not attain its triple's maximum")
        return self


@dataclass(frozen=True)
class AttributeErrorModel:
    """Per-attribute 3x3 row-stochastic confusion: rows true, columns predicted."""

    matrices: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "matrices", np.asarray(self.matrices, dtype=float))

    def check(self):
        m = self.matrices
        if m.ndim != 3 or m.shape[1:] != (3, 3):
            raise DataFormatError("error model must be (n_attributes, 3, 3)")
        if np.any(m <= 0):
            raise DataFormatError("error model entries must be strictly positive")
        if np.any(np.abs(m.sum(axis=2) - 1.0) > 1e-9):
            raise DataFormatError("error model rows must sum to 1")
        return self

    @property
    def n_attributes(self) -> int:
        return self.matrices.shape[0]


def _slot_probability_models(X, present_labels, value, C, tol, max_epochs, seed):
    """One binary model for 'attribute equals value' vs rest, calibrated."""
    binary = np.where(present_labels == value, 1.0, -1.0)
    model = train_binary_linear(X, binary, C=C, tol=tol, max_epochs=max_epochs, seed=seed)
    calib = fit_sigmoid(model.decision(X), binary)
    return model, calib


def _fit_attribute(X, labels, C, tol, max_epochs, seed):
    """Fit the three value-vs-rest scorers of one attribute.

    Returns (slots, notes): slots maps each ternary value to either
    ('model', LinearModel, SigmoidCalibration) or ('const', raw_probability);
    notes describe degeneracies that forced constant slots.
    """
    notes = []
    present = np.unique(labels)
    if present.size == 1:
        only = int(present[0])
        notes.append(f"constant attribute: every training class has value {only:+d}")
        slots = {}
        for v in TERNARY_ORDER:
            slots[v] = ("const", 1.0 - 2.0 * CONSTANT_FLOOR if v == only else CONSTANT_FLOOR)
        return slots, notes

    slots = {}
    for k, v in enumerate(TERNARY_ORDER):
        if v not in present:
            slots[v] = ("const", CONSTANT_FLOOR)
            notes.append(f"value {v:+d} absent from training data")
            continue
        try:
            model, calib = _slot_probability_models(
                X, labels, v, C, tol, max_epochs,
                np.random.SeedSequence([int(seed), k]).generate_state(1, np.uint64)[0],
            )
            slots[v] = ("model", model, calib)
        except DegenerateProblemError as exc:
            base_rate = (float(np.sum(labels == v)) + 1.0) / (labels.shape[0] + 2.0)
            slots[v] = ("const", base_rate)
            notes.append(f"value {v:+d} fell back to base rate: {exc}")
    return slots, notes


class DirectAttributeClassifier(BaseEstimator):
    """Per-attribute ternary classifiers trained on raw features.

    Each attribute gets three calibrated value-vs-rest linear scorers whose
    probabilities are renormalized into a confidence triple; the prediction
    is the triple's argmax. Attributes that are constant over the training
    classes collapse to constant predictors (kept in ``report_``).
    """

    def __init__(self, C=1.0, tol=1e-6, max_epochs=10000, seed=0, n_jobs=1):
        self.C = C
        self.tol = tol
        self.max_epochs = max_epochs
        self.seed = seed
        self.n_jobs = n_jobs

    def fit(self, X, y, attributes):
        X = check_array(X, dtype=float)
        y = np.asarray(y, dtype=int)
        if np.any(y < 0) or np.any(y >= attributes.values.shape[0]):
            raise DataFormatError("training label outside the attribute matrix")
        self.n_features_in_ = X.shape[1]
        self.n_attributes_ = attributes.n_attributes
        per_attr_labels = attributes.values[y]  # (n, N_a)

        def seed_for(j):
            return np.random.SeedSequence([int(self.seed), 7, int(j)]).generate_state(1, np.uint64)[0]

        fitted = Parallel(n_jobs=self.n_jobs, prefer="threads")(
            delayed(_fit_attribute)(
                X, per_attr_labels[:, j].astype(int), self.C, self.tol, self.max_epochs, seed_for(j)
            )
            for j in range(self.n_attributes_)
        )
        self.bank_ = [slots for slots, _ in fitted]
        self.report_ = [f"attribute {j}: {note}" for j, (_, notes) in enumerate(fitted) for note in notes]
        return self

    def predict_confidences(self, X) -> np.ndarray:
        """Confidence triples, shape (n_items, n_attributes, 3)."""
        check_is_fitted(self, "bank_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise DataFormatError(
                f"feature dimension {X.shape[1]} != trained dimension {self.n_features_in_}"
            )
        n = X.shape[0]
        out = np.empty((n, self.n_attributes_, 3))
        for j, slots in enumerate(self.bank_):
            for k, v in enumerate(TERNARY_ORDER):
                slot = slots[v]
                if slot[0] == "const":
                    out[:, j, k] = slot[1]
                else:
                    _, model, calib = slot
                    out[:, j, k] = calib.probability(model.decision(X))
        out /= out.sum(axis=2, keepdims=True)
        return out

    def predict_values(self, X) -> np.ndarray:
        conf = self.predict_confidences(X)
        return conf.argmax(axis=2) - 1

    def estimate(self, x) -> AttributeEstimate:
        conf = self.predict_confidences(np.asarray(x, dtype=float).reshape(1, -1))[0]
        return AttributeEstimate(values=conf.argmax(axis=1) - 1, confidences=conf).check()


# -- indirect route ---------------------------------------------------------


def indirect_expectations(leaf_probs, value_rows) -> np.ndarray:
    """Expected attribute values under a class posterior.

    ``leaf_probs``: (n_items, n_classes) rows summing to 1, aligned with
    ``value_rows``: (n_classes, n_attributes). Output lies in [-1, 1].
    """
    leaf_probs = np.asarray(leaf_probs, dtype=float)
    value_rows = np.asarray(value_rows, dtype=float)
    if leaf_probs.shape[-1] != value_rows.shape[0]:
        raise DataFormatError("posterior class count does not match attribute rows")
    return leaf_probs @ value_rows


def ternarize(expectations, tau) -> np.ndarray:
    """Threshold expectations at +/-tau into {-1, 0, +1}."""
    if not (0.0 < tau < 1.0):
        raise DataFormatError("threshold must lie strictly inside (0, 1)")
    e = np.asarray(expectations, dtype=float)
    return np.where(e >= tau, 1, np.where(e <= -tau, -1, 0)).astype(int)


def expectation_confidences(expectations, tau) -> np.ndarray:
    """Map expectations onto confidence triples, piecewise-linear in |e|.

    The winning slot crosses 0.5 exactly at |e| = tau, so the triple's
    argmax flips where the ternary threshold does; endpoints e = -1, 0, +1
    map to one-hot / pure-neutral triples.
    """
    if not (0.0 < tau < 1.0):
        raise DataFormatError("threshold must lie strictly inside (0, 1)")
    e = np.asarray(expectations, dtype=float)
    mag = np.abs(e)
    side = np.where(mag <= tau, 0.5 * mag / tau, 0.5 + 0.5 * (mag - tau) / (1.0 - tau))
    triples = np.zeros(e.shape + (3,))
    triples[..., 2] = np.where(e > 0, side, 0.0)
    triples[..., 0] = np.where(e < 0, side, 0.0)
    triples[..., 1] = 1.0 - side
    return triples


def predict_attributes_indirect(posterior: Posterior, attributes, tau=1.0 / 3.0, catalog=None) -> AttributeEstimate:
    """Indirect attribute estimate from a leaf posterior.

    The posterior must range over non-novel classes only; pass the catalog
    to have that checked.
    """
    posterior.check()
    if catalog is not None and np.any(catalog.novel[posterior.class_indices]):
        raise DataFormatError("indirect estimation requires a posterior over non-novel classes")
    rows = attributes.rows(posterior.class_indices)
    e = indirect_expectations(posterior.probabilities[None, :], rows)[0]
    return AttributeEstimate(values=ternarize(e, tau), confidences=expectation_confidences(e, tau)).check()


# -- error model and maximum-likelihood posterior ----------------------------


def estimate_attribute_error_model(predicted_values, true_class_indices, attributes) -> AttributeErrorModel:
    """Count (true value, predicted value) pairs per attribute, smoothed.

    Rows with no observations come out uniform; add-one smoothing keeps all
    entries positive so downstream likelihoods never hit log(0).
    """
    pred = np.asarray(predicted_values, dtype=int)
    truth = attributes.rows(np.asarray(true_class_indices, dtype=int))
    if pred.shape != truth.shape:
        raise DataFormatError("predicted values and validation labels disagree in shape")
    if pred.shape[0] == 0:
        raise DataFormatError("error model needs a non-empty validation set")
    n_attr = pred.shape[1]
    counts = np.zeros((n_attr, 3, 3))
    for j in range(n_attr):
        np.add.at(counts[j], (truth[:, j].astype(int) + 1, pred[:, j] + 1), 1.0)
    counts += 1.0
    return AttributeErrorModel(counts / counts.sum(axis=2, keepdims=True)).check()


def class_log_likelihood_matrix(predicted_values, attributes, error_model) -> np.ndarray:
    """Log-likelihood of every catalog class for each predicted vector.

    Per class, the independent-error model multiplies, attribute by
    attribute, the probability of the observed prediction given the class's
    ground-truth value; computed in log space for stability.
    """
    pred = np.atleast_2d(np.asarray(predicted_values, dtype=int))
    vt = attributes.values.astype(int)
    if pred.shape[1] != vt.shape[1]:
        raise DataFormatError("estimate length does not match the attribute matrix")
    log_e = np.log(error_model.matrices)
    n, k = pred.shape[0], vt.shape[0]
    ll = np.zeros((n, k))
    for j in range(pred.shape[1]):
        ll += log_e[j][(vt[:, j] + 1)[None, :], (pred[:, j] + 1)[:, None]]
    return ll


def class_likelihoods_ml(estimate, attributes, error_model) -> Posterior:
    """Posterior over the full catalog from one attribute estimate."""
    values = estimate.values if isinstance(estimate, AttributeEstimate) else np.asarray(estimate, dtype=int)
    ll = class_log_likelihood_matrix(values, attributes, error_model)[0]
    ll -= ll.max()
    weights = np.exp(ll)
    return Posterior.normalized(np.arange(attributes.values.shape[0]), weights)


def posterior_matrix_from_log_likelihoods(ll) -> np.ndarray:
    ll = ll - ll.max(axis=1, keepdims=True)
    w = np.exp(ll)
    return w / w.sum(axis=1, keepdims=True)


# -- ranking -----------------------------------------------------------------


def rank_classes(posterior: Posterior) -> np.ndarray:
    """Class indices ordered best-first; ties go to the lower index."""
    order = np.lexsort((posterior.class_indices, -posterior.probabilities))
    return posterior.class_indices[order]


def rank_of_true(posterior: Posterior, true_class) -> int:
    """1-based rank of the true class in the posterior's ordering."""
    ranking = rank_classes(posterior)
    pos = np.flatnonzero(ranking == int(true_class))
    if pos.size == 0:
        raise DataFormatError(f"class {true_class} absent from the posterior")
    return int(pos[0]) + 1


def ranking_matrix(prob_matrix, class_indices) -> np.ndarray:
    """Row-wise best-first orderings for a batch of posteriors."""
    probs = np.asarray(prob_matrix, dtype=float)
    class_indices = np.asarray(class_indices, dtype=int)
    tie = np.tile(class_indices, (probs.shape[0], 1))
    order = np.lexsort((tie, -probs), axis=1)
    return class_indices[order]
