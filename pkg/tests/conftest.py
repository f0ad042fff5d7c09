import numpy as np
import pytest

from hierzsl import AttributeMatrix, ClassCatalog, Hierarchy
from hierzsl.fileio import import_hierarchy


@pytest.fixture
def catalog3():
    return ClassCatalog(names=("ant", "bee", "cat"), novel=np.array([False, False, True]))


@pytest.fixture
def attributes3():
    values = np.array([
        [1, 0, -1, 1],
        [1, 1, -1, 0],
        [-1, 0, 1, -1],
    ], dtype=np.int8)
    return AttributeMatrix(values=values, attribute_names=("a0", "a1", "a2", "a3"))


@pytest.fixture
def tree3(catalog3):
    nested = {
        "label": "root",
        "children": [
            {"label": "insects", "children": [
                {"label": "ant", "class": "ant"},
                {"label": "bee", "class": "bee"},
            ]},
            {"label": "cat", "class": "cat"},
        ],
    }
    tree = Hierarchy.from_nested(nested, catalog3)
    tree.annotate_rewards()
    return tree


def balanced_nested(names, lo, hi):
    """Balanced nested-object tree over names[lo:hi]."""
    if hi - lo == 1:
        return {"label": names[lo], "class": names[lo]}
    mid = (lo + hi) // 2
    return {"label": f"g{lo}-{hi}", "children": [
        balanced_nested(names, lo, mid), balanced_nested(names, mid, hi),
    ]}


def make_flat_catalog(k, novel=()):
    flags = np.zeros(k, dtype=bool)
    flags[list(novel)] = True
    return ClassCatalog(names=tuple(f"c{i:03d}" for i in range(k)), novel=flags)


def make_balanced_tree(k, novel=()):
    catalog = make_flat_catalog(k, novel)
    tree = Hierarchy.from_nested(balanced_nested(catalog.names, 0, k), catalog)
    tree.annotate_rewards()
    return catalog, tree


def leaf_posterior_vector(tree, probs_by_class):
    """Vector aligned to tree.leaf_class_order from a {class_index: p} map."""
    vec = np.zeros(tree.n_leaves)
    for j, c in enumerate(tree.leaf_class_order):
        vec[j] = probs_by_class.get(int(c), 0.0)
    return vec
