"""Hierarchical decision rules balancing accuracy against specificity.

Two rules over a reward-annotated tree and per-node posterior mass:

* ``darts``   - pick the node maximizing (reward + lam) * p(node); lam is a
  Lagrange-style knob found by binary search against a validation accuracy
  target.
* ``maxexp``  - among nodes whose mass strictly exceeds a threshold theta,
  pick the one maximizing reward * p(node); theta comes from scanning the
  thresholds actually observed on validation.

A prediction counts as correct when the chosen node is the true class's
leaf or one of that leaf's ancestors. Both rules share one tie-break:
greater depth first, then lower node id.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .core import DataFormatError, Posterior
from .hierarchy import Hierarchy, NodePrediction

LAMBDA_BRACKET_CAP = 1e6


@dataclass(frozen=True)
class TuneResult:
    """Tuned parameter plus whether the accuracy target was attainable."""

    value: float
    reached: bool


def _as_node_vector(tree: Hierarchy, node_probs) -> np.ndarray:
    if isinstance(node_probs, dict):
        return np.array([node_probs[nid] for nid in tree.node_order], dtype=float)
    vec = np.asarray(node_probs, dtype=float)
    if vec.shape[-1] != len(tree.node_order):
        raise DataFormatError("node probability map does not cover every node")
    return vec


def _winners(tree: Hierarchy, scores: np.ndarray) -> np.ndarray:
    """Row-wise argmax over node scores with the shared tie-break."""
    scores = np.atleast_2d(scores)
    ids = tree.ids_array
    # ties prefer greater depth, then lower id; encode as one integer key
    span = int(ids.max()) + 1
    tie_key = tree.depths * span + (span - 1 - ids)
    best = scores.max(axis=1, keepdims=True)
    key = np.where(scores == best, tie_key[None, :], -1)
    return ids[key.argmax(axis=1)]


def darts_scores(tree: Hierarchy, node_probs, lam: float) -> np.ndarray:
    return (tree.rewards + float(lam))[None, :] * np.atleast_2d(_as_node_vector(tree, node_probs))


def darts_classify(tree: Hierarchy, node_probs, lam: float) -> NodePrediction:
    """Single-item decision: node maximizing (reward + lam) * mass."""
    if lam < 0:
        raise DataFormatError("lam must be non-negative")
    winner = _winners(tree, darts_scores(tree, node_probs, lam))[0]
    return tree.prediction(winner)


def darts_classify_batch(tree: Hierarchy, node_prob_matrix, lam: float) -> np.ndarray:
    return _winners(tree, darts_scores(tree, node_prob_matrix, lam))


def maxexp_scores(tree: Hierarchy, node_probs, theta: float) -> np.ndarray:
    probs = np.atleast_2d(_as_node_vector(tree, node_probs))
    scores = tree.rewards[None, :] * probs
    return np.where(probs > theta, scores, -np.inf)


def maxexp_classify(tree: Hierarchy, node_probs, theta: float) -> NodePrediction:
    """Single-item decision: best reward * mass among nodes above threshold."""
    winner = maxexp_classify_batch(tree, node_probs, theta)[0]
    return tree.prediction(winner)


def maxexp_classify_batch(tree: Hierarchy, node_prob_matrix, theta: float) -> np.ndarray:
    if not (0.0 <= theta < 1.0):
        raise DataFormatError("theta must lie in [0, 1)")
    scores = maxexp_scores(tree, node_prob_matrix, theta)
    winners = _winners(tree, scores)
    # a zero best score means nothing informative qualified: fall back to root
    flat = scores.max(axis=1) <= 0.0
    winners[flat] = tree.root.id
    return winners


def accuracy_phi(tree: Hierarchy, winner_ids, true_classes) -> float:
    """Fraction of predictions sitting on the true class's root path."""
    hits = [
        tree.is_correct(nid, ci) for nid, ci in zip(np.atleast_1d(winner_ids), np.atleast_1d(true_classes))
    ]
    return float(np.mean(hits))


def darts_tune_lambda(
    tree: Hierarchy,
    leaf_prob_matrix,
    true_classes,
    epsilon: float,
    tol: float = 1e-6,
    bracket_cap: float = LAMBDA_BRACKET_CAP,
) -> TuneResult:
    """Smallest lam (within tol) whose validation accuracy reaches 1 - epsilon.

    The bracket starts at [0, 1] and doubles its upper end until feasible;
    when even the cap cannot reach the target the cap is returned with
    ``reached=False`` (very large lam piles every item onto the root, so
    pushing further is pointless).
    """
    if not (0.0 <= epsilon <= 1.0):
        raise DataFormatError("epsilon must lie in [0, 1]")
    true_classes = np.asarray(true_classes, dtype=int)
    if true_classes.size == 0:
        raise DataFormatError("tuning needs a non-empty validation set")
    node_probs = tree.aggregate(np.asarray(leaf_prob_matrix, dtype=float))
    target = 1.0 - epsilon

    def phi(lam):
        return accuracy_phi(tree, darts_classify_batch(tree, node_probs, lam), true_classes)

    if phi(0.0) >= target:
        return TuneResult(0.0, True)
    upper = 1.0
    while phi(upper) < target:
        upper *= 2.0
        if upper > bracket_cap:
            return TuneResult(float(bracket_cap), False)
    lower = upper / 2.0 if upper > 1.0 else 0.0
    while upper - lower > tol:
        mid = 0.5 * (lower + upper)
        if phi(mid) >= target:
            upper = mid
        else:
            lower = mid
    return TuneResult(float(upper), True)


def maxexp_tune_theta(tree: Hierarchy, leaf_prob_matrix, true_classes, epsilon: float) -> TuneResult:
    """Smallest observed-probability threshold reaching 1 - epsilon accuracy.

    Candidates are 0 plus every distinct node probability seen on the
    validation items (values of 1 are excluded: the threshold comparison is
    strict and must keep the root qualified).
    """
    if not (0.0 <= epsilon <= 1.0):
        raise DataFormatError("epsilon must lie in [0, 1]")
    true_classes = np.asarray(true_classes, dtype=int)
    if true_classes.size == 0:
        raise DataFormatError("tuning needs a non-empty validation set")
    node_probs = tree.aggregate(np.asarray(leaf_prob_matrix, dtype=float))
    target = 1.0 - epsilon
    observed = np.unique(node_probs)
    candidates = np.unique(np.concatenate([[0.0], observed[observed < 1.0]]))
    for theta in candidates:
        winners = maxexp_classify_batch(tree, node_probs, float(theta))
        if accuracy_phi(tree, winners, true_classes) >= target:
            return TuneResult(float(theta), True)
    return TuneResult(float(candidates[-1]), False)


# -- posterior debiasing -------------------------------------------------------


def debias_posterior(confusion, posterior: Posterior) -> Posterior:
    """Reattribute predicted-class mass to true classes via the confusion.

    Column j of the (smoothed, strictly positive) confusion is normalized
    into "probability the true class is i given the classifier said j", and
    the posterior's mass is pushed through that map.
    """
    confusion = np.asarray(confusion, dtype=float)
    k = posterior.class_indices.shape[0]
    if confusion.shape != (k, k):
        raise DataFormatError(
            f"confusion shape {confusion.shape} does not match posterior over {k} classes"
        )
    if np.any(confusion <= 0):
        raise DataFormatError("confusion must be strictly positive (smooth it first)")
    reattribution = confusion / confusion.sum(axis=0, keepdims=True)
    return Posterior.normalized(posterior.class_indices, reattribution @ posterior.probabilities)


def debias_matrix(confusion) -> np.ndarray:
    """Column-normalized confusion, applied as `out = M @ p` per item."""
    confusion = np.asarray(confusion, dtype=float)
    if np.any(confusion <= 0):
        raise DataFormatError("confusion must be strictly positive (smooth it first)")
    return confusion / confusion.sum(axis=0, keepdims=True)


# -- top-N fusion ---------------------------------------------------------------


def topn_combine(prediction: NodePrediction, ranking) -> tuple:
    """Truncate a best-first class ranking to the node's leaf count.

    Returns (classes, clamped): ``clamped`` flags a leaf count beyond the
    ranking's length, in which case the whole ranking is returned.
    """
    ranking = np.asarray(ranking, dtype=int)
    n = int(prediction.leaf_count)
    if n < 1:
        raise DataFormatError("leaf count must be at least 1")
    if n > ranking.shape[0]:
        return ranking.copy(), True
    return ranking[:n].copy(), False


# -- estimator facades ----------------------------------------------------------


class _HierarchicalRule(BaseEstimator):
    """Shared plumbing: X rows are leaf posteriors over the tree's classes."""

    def _node_probs(self, X):
        X = check_array(X, dtype=float)
        if X.shape[1] != self.hierarchy.n_leaves:
            raise DataFormatError(
                f"posterior width {X.shape[1]} != leaf count {self.hierarchy.n_leaves}"
            )
        return self.hierarchy.aggregate(X)

    def predict_nodes(self, X):
        return [self.hierarchy.prediction(nid) for nid in self.predict(X)]

    def score(self, X, y):
        return accuracy_phi(self.hierarchy, self.predict(X), np.asarray(y, dtype=int))


class DartsClassifier(_HierarchicalRule):
    """Estimator facade for the Lagrange-style rule.

    ``fit`` tunes ``lambda_`` on validation posteriors unless ``lam`` pins
    it; ``predict`` maps leaf-posterior rows (aligned to the hierarchy's
    ``leaf_class_order``) to chosen node ids.
    """

    def __init__(self, hierarchy, epsilon=0.1, lam=None, search_tol=1e-6, bracket_cap=LAMBDA_BRACKET_CAP):
        self.hierarchy = hierarchy
        self.epsilon = epsilon
        self.lam = lam
        self.search_tol = search_tol
        self.bracket_cap = bracket_cap

    def fit(self, X, y=None):
        if self.lam is not None:
            self.lambda_, self.reached_ = float(self.lam), True
            return self
        if y is None:
            raise DataFormatError("tuning requires validation labels")
        result = darts_tune_lambda(
            self.hierarchy, check_array(X, dtype=float), y, self.epsilon,
            tol=self.search_tol, bracket_cap=self.bracket_cap,
        )
        self.lambda_, self.reached_ = result.value, result.reached
        return self

    def predict(self, X):
        check_is_fitted(self, "lambda_")
        return darts_classify_batch(self.hierarchy, self._node_probs(X), self.lambda_)


class MaxExpClassifier(_HierarchicalRule):
    """Estimator facade for the thresholded expected-reward rule."""

    def __init__(self, hierarchy, epsilon=0.1, theta=None):
        self.hierarchy = hierarchy
        self.epsilon = epsilon
        self.theta = theta

    def fit(self, X, y=None):
        if self.theta is not None:
            self.theta_, self.reached_ = float(self.theta), True
            return self
        if y is None:
            raise DataFormatError("tuning requires validation labels")
        result = maxexp_tune_theta(self.hierarchy, check_array(X, dtype=float), y, self.epsilon)
        self.theta_, self.reached_ = result.value, result.reached
        return self

    def predict(self, X):
        check_is_fitted(self, "theta_")
        return maxexp_classify_batch(self.hierarchy, self._node_probs(X), self.theta_)
