"""Shared domain types: class catalog, ternary attribute matrix, posteriors.

Classes are identified by dense integer indices assigned in catalog order;
every matrix and vector in the package is index-aligned so that inner loops
never do name lookups. Rewards are always expressed in bits (base-2 log).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PROB_ATOL = 1e-9
TERNARY = (-1, 0, 1)


class DataFormatError(ValueError):
    """Malformed or mutually inconsistent input data."""


class DegenerateProblemError(ValueError):
    """A training or calibration problem without a usable solution."""


@dataclass(frozen=True)
class ClassCatalog:
    """Ordered class catalog with a novelty flag per class.

    Novel classes have ground-truth attribute rows but never appear in
    training or validation labels.
    """

    names: tuple
    novel: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "novel", np.asarray(self.novel, dtype=bool))
        if len(self.names) != self.novel.shape[0]:
            raise DataFormatError("catalog names and novelty flags differ in length")
        if len(set(self.names)) != len(self.names):
            raise DataFormatError("duplicate class names in catalog")

    @property
    def n_classes(self) -> int:
        return len(self.names)

    @property
    def known_indices(self) -> np.ndarray:
        """Indices of non-novel classes (the training label space)."""
        return np.flatnonzero(~self.novel)

    @property
    def novel_indices(self) -> np.ndarray:
        return np.flatnonzero(self.novel)

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown class name: {name!r}") from None


@dataclass(frozen=True)
class AttributeMatrix:
    """Class-by-attribute ground truth with ternary entries.

    Entry semantics: +1 yes, -1 no, 0 indeterminate. Rows cover the full
    catalog (non-novel and novel classes alike). The constructor keeps the
    values as handed in; run :func:`validate_catalog` for a full check so
    that corrupt data surfaces as report entries rather than exceptions.
    """

    values: np.ndarray
    attribute_names: tuple

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values))
        object.__setattr__(self, "attribute_names", tuple(self.attribute_names))
        if self.values.ndim != 2:
            raise DataFormatError("attribute matrix must be 2-D")
        if self.values.shape[1] != len(self.attribute_names):
            raise DataFormatError(
                "attribute matrix has %d columns but %d attribute names"
                % (self.values.shape[1], len(self.attribute_names))
            )

    @property
    def n_attributes(self) -> int:
        return self.values.shape[1]

    def rows(self, class_indices) -> np.ndarray:
        return self.values[np.asarray(class_indices, dtype=int)]


@dataclass(frozen=True)
class Posterior:
    """Probability distribution over an ordered subset of catalog classes."""

    class_indices: np.ndarray
    probabilities: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "class_indices", np.asarray(self.class_indices, dtype=int))
        object.__setattr__(self, "probabilities", np.asarray(self.probabilities, dtype=float))
        if self.class_indices.shape != self.probabilities.shape:
            raise DataFormatError("posterior class set and probabilities differ in length")

    def check(self):
        p = self.probabilities
        if np.any(p < -PROB_ATOL) or np.any(p > 1 + PROB_ATOL):
            raise DataFormatError("posterior probabilities outside [0, 1]")
        if abs(float(p.sum()) - 1.0) > PROB_ATOL:
            raise DataFormatError(f"posterior does not sum to 1 (sum={p.sum()!r})")
        return self

    @staticmethod
    def normalized(class_indices, weights) -> "Posterior":
        w = np.asarray(weights, dtype=float)
        total = float(w.sum())
        if total <= 0 or not np.isfinite(total):
            raise DataFormatError("cannot normalize non-positive posterior mass")
        return Posterior(class_indices, w / total).check()


@dataclass
class FeatureSet:
    """A batch of feature vectors with optional integer labels (-1 = unlabeled)."""

    item_ids: list
    labels: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int)
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim != 2:
            raise DataFormatError("features must form a 2-D matrix")
        if len(self.item_ids) != self.features.shape[0] or self.labels.shape[0] != self.features.shape[0]:
            raise DataFormatError("feature set fields differ in length")
        if not np.all(np.isfinite(self.features)):
            raise DataFormatError("non-finite feature value")

    def __len__(self):
        return len(self.item_ids)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class DatasetSplit:
    """Train/validation/test feature sets over one catalog."""

    train: FeatureSet
    validation: FeatureSet
    test: FeatureSet

    def validate(self, catalog: ClassCatalog):
        dims = {self.train.dim, self.validation.dim, self.test.dim}
        if len(dims) != 1:
            raise DataFormatError(f"splits disagree on feature dimension: {sorted(dims)}")
        seen = set()
        for name, fs in (("train", self.train), ("validation", self.validation), ("test", self.test)):
            dup = seen.intersection(fs.item_ids)
            if dup:
                raise DataFormatError(f"item ids shared across splits: {sorted(dup)[:3]}")
            seen.update(fs.item_ids)
            labeled = fs.labels[fs.labels >= 0]
            if labeled.size and labeled.max() >= catalog.n_classes:
                raise DataFormatError(f"{name} label outside catalog")
            if name in ("train", "validation") and labeled.size:
                if np.any(catalog.novel[labeled]):
                    raise DataFormatError(f"{name} split contains a novel-class label")
        return self


def validate_catalog(catalog, attributes, hierarchy) -> list:
    """Cross-check catalog, attribute matrix and hierarchy; return violations.

    Violations are data, not exceptions: the returned list is empty on
    success and otherwise holds one human-readable string per problem.
    """
    violations = []
    k = catalog.n_classes
    if k < 2:
        violations.append("degenerate catalog: fewer than 2 classes")

    vals = attributes.values
    if vals.shape[0] != k:
        violations.append(
            f"attribute matrix has {vals.shape[0]} rows for {k} catalog classes"
        )
    bad = np.argwhere(~np.isin(vals, TERNARY))
    for row, col in bad[:20]:
        violations.append(f"non-ternary value at ({row}, {col}): {vals[row, col]!r}")

    leaf_classes = [n.class_index for n in hierarchy.leaves()]
    if len(leaf_classes) != k:
        violations.append(
            f"leaf/class count mismatch: {len(leaf_classes)} leaves for {k} classes"
        )
    if len(set(leaf_classes)) != len(leaf_classes):
        violations.append("duplicate class on multiple leaves")
    for ci in leaf_classes:
        if ci is None or not (0 <= ci < k):
            violations.append(f"leaf mapped to unknown class index {ci!r}")

    baseline = hierarchy.root.leaf_count
    for node in hierarchy.nodes.values():
        if node.children:
            child_sum = sum(c.leaf_count for c in node.children)
            if node.leaf_count != child_sum:
                violations.append(
                    f"node {node.id}: leaf count {node.leaf_count} != children sum {child_sum}"
                )
        elif node.leaf_count != 1:
            violations.append(f"leaf {node.id}: leaf count {node.leaf_count} != 1")
        if node.leaf_count > 0 and baseline > 0:
            expected = np.log2(baseline) - np.log2(node.leaf_count)
            if abs(node.reward - expected) > 1e-9:
                violations.append(
                    f"node {node.id}: reward {node.reward!r} != log2({baseline}/{node.leaf_count})"
                )
    if abs(hierarchy.root.reward) > 1e-9:
        violations.append(f"root reward {hierarchy.root.reward!r} != 0")
    return violations
