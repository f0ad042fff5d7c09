"""Evaluation quantities: information gain, mean rank accuracy, sweep curves.

All gains are in bits against a baseline leaf count: the leaf count of the
hierarchy actually used by the classifier under evaluation. Hierarchical
predictions convert to rank-accuracy terms through the half-of-descendants
contribution rules; rank-based methods use the true class's 1-based rank
directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DataFormatError
from .hierarchy import Hierarchy


def info_gain_node(tree: Hierarchy, node_id, true_class) -> tuple:
    """(reward, correct) for a chosen node against the true class.

    The reward is the node's annotated bits regardless of correctness;
    aggregation decides how misses count.
    """
    node = tree.nodes[int(node_id)]
    return float(node.reward), tree.is_correct(node_id, true_class)


def info_gain_rank(rank, n_known) -> float:
    """Bits gained by ranking the true class at the given 1-based rank."""
    rank = int(rank)
    if rank < 1:
        raise DataFormatError("rank must be at least 1")
    return float(np.log2(float(n_known)) - np.log2(float(rank)))


def mra_flat(ranks, n_known) -> float:
    """Mean rank accuracy: 1 - mean(rank) / baseline leaf count."""
    ranks = np.asarray(ranks, dtype=float)
    if ranks.size == 0:
        raise DataFormatError("mean rank accuracy needs at least one rank")
    return float(1.0 - ranks.mean() / float(n_known))


def hierarchical_rank_contribution(leaf_count, correct, n_known) -> float:
    """Effective rank of one hierarchical prediction.

    A correct placement brings the node's leaves to the front of an
    imagined ranked list: rank = half its leaf count, at least 1. A wrong
    placement costs all of the node's leaves plus half of the rest.
    """
    n = float(leaf_count)
    if correct:
        return max(1.0, n / 2.0)
    return n + (float(n_known) - n) / 2.0


def mra_hierarchical_rank(tree: Hierarchy, node_id, true_class, n_known) -> float:
    node = tree.nodes[int(node_id)]
    return hierarchical_rank_contribution(node.leaf_count, tree.is_correct(node_id, true_class), n_known)


def topn_eval(topn_classes, true_class, n_known) -> tuple:
    """(reward, correct) for a truncated ranking of length N.

    Reward is the information of narrowing the catalog to N candidates;
    the correctness flag records whether the true class survived the cut.
    """
    topn_classes = np.asarray(topn_classes, dtype=int)
    n = topn_classes.shape[0]
    if n < 1:
        raise DataFormatError("top-N list must be non-empty")
    reward = float(np.log2(float(n_known)) - np.log2(float(n)))
    return reward, bool(np.any(topn_classes == int(true_class)))


@dataclass(frozen=True)
class EvalRecord:
    """One item's outcome under one method."""

    item_id: str
    true_class: int
    method: str
    prediction: str
    reward: float
    correct: bool
    novel: bool


@dataclass(frozen=True)
class SweepPoint:
    param: float
    avg_accuracy: float
    avg_reward_strict: float
    avg_reward_nominal: float
    n_items: int


@dataclass(frozen=True)
class SweepCurve:
    """(accuracy, reward) trade-off trace of one method on one item subset."""

    method: str
    subset: str
    points: tuple

    def __post_init__(self):
        params = [p.param for p in self.points]
        if any(b <= a for a, b in zip(params, params[1:])):
            raise DataFormatError("sweep parameter values must be strictly increasing")


def aggregate_outcomes(rewards, correct, miss_mode="nominal") -> tuple:
    """(accuracy, strict reward, second aggregate) over item outcomes.

    strict zeroes the reward of incorrect items. The second aggregate keeps
    nominal rewards for everything (``miss_mode='nominal'``, the hierarchical
    reading) or averages hits only (``miss_mode='exclude'``, the top-N
    reading; 0 when nothing hit).
    """
    rewards = np.asarray(rewards, dtype=float)
    correct = np.asarray(correct, dtype=bool)
    if rewards.size == 0:
        raise DataFormatError("cannot aggregate an empty outcome set")
    accuracy = float(correct.mean())
    strict = float(np.where(correct, rewards, 0.0).mean())
    if miss_mode == "nominal":
        other = float(rewards.mean())
    elif miss_mode == "exclude":
        other = float(rewards[correct].mean()) if correct.any() else 0.0
    else:
        raise DataFormatError(f"unknown miss mode {miss_mode!r}")
    return accuracy, strict, other
