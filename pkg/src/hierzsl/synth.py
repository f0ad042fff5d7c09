"""Deterministic desk-scale dataset generator with known ground truth.

A random binary class tree is drawn first; attributes then inherit values
down that tree. Each attribute is dedicated to one subtree and takes a
single ternary step toward "yes" on the edge entering it, so it flags
membership of that group; every edge additionally applies random one-step
flips at a configurable rate. With the flip rate at zero the matrix is a
clean tree signature (constant inside the marked block, distinct outside)
that attribute-distance clustering recovers exactly; small rates give
realistically noisy attribute structure. Feature prototypes are a fixed
random linear embedding of the attribute rows plus per-class jitter, and
items add isotropic Gaussian noise. Every stream derives from the master
seed through stable hashing, so outputs are bit-identical regardless of
execution order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import AttributeMatrix, ClassCatalog, DataFormatError, DatasetSplit, FeatureSet
from .hierarchy import Hierarchy, Node, _assign_inner_ids, _canonicalize

PROTO_JITTER = 0.15

_STREAM_TREE = 1
_STREAM_ATTR = 2
_STREAM_FLIPS = 3
_STREAM_EMBED = 4
_STREAM_ITEMS = 5
_STREAM_NOVEL = 6


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 30
    n_novel: int = 6
    n_features: int = 64
    n_attributes: int = 40
    noise_sigma: float = 1.0
    flip_rate: float = 0.05
    items_per_class: int = 60
    split_fractions: tuple = (0.9, 0.05, 0.05)
    seed: int = 0

    def validate(self):
        if self.n_classes < 2:
            raise DataFormatError("need at least 2 classes")
        if not (0 <= self.n_novel < self.n_classes):
            raise DataFormatError("novel count must be smaller than the class count")
        if self.n_classes - self.n_novel < 2:
            raise DataFormatError("need at least 2 non-novel classes")
        if self.n_attributes < 2:
            raise DataFormatError("need at least 2 attributes")
        if self.n_features < 1 or self.items_per_class < 1:
            raise DataFormatError("feature dimension and items per class must be positive")
        if self.noise_sigma < 0:
            raise DataFormatError("noise sigma must be non-negative")
        if not (0.0 <= self.flip_rate <= 1.0):
            raise DataFormatError("flip rate must lie in [0, 1]")
        fr = np.asarray(self.split_fractions, dtype=float)
        if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
            raise DataFormatError("split fractions must be 3 non-negative numbers summing to 1")
        counts = _largest_remainder(self.items_per_class, fr)
        if fr[0] > 0 and counts[0] == 0:
            raise DataFormatError("items per class too small for the train fraction")
        if fr[1] > 0 and counts[1] == 0:
            raise DataFormatError("items per class too small for the validation fraction")
        return self


@dataclass
class SynthBundle:
    """Everything the generator knows: data plus its generative parameters."""

    config: SynthConfig
    catalog: ClassCatalog
    attributes: AttributeMatrix
    generating_tree: Hierarchy
    split: DatasetSplit
    prototypes: np.ndarray
    embedding: np.ndarray


def _rng(seed, *stream):
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [int(s) for s in stream]))


def _largest_remainder(total, fractions) -> np.ndarray:
    raw = np.asarray(fractions, dtype=float) * total
    counts = np.floor(raw).astype(int)
    short = total - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    for i in range(short):
        counts[order[i]] += 1
    return counts


def _random_binary_tree(n_classes, rng):
    active = [Node(id=i, label="", class_index=i, leaf_count=1) for i in range(n_classes)]
    merge_no = 0
    while len(active) > 1:
        i, j = sorted(rng.choice(len(active), size=2, replace=False))
        merge_no += 1
        merged = Node(id=-1, label=f"node-{merge_no}", children=[active[i], active[j]])
        active = [nd for k, nd in enumerate(active) if k not in (i, j)] + [merged]
    return active[0]


def _balanced_subtree_weights(root) -> dict:
    """Ideal attribute mass per non-root subtree, keyed by ``id(node)``.

    Chosen so that every root-to-leaf path carries the same total mass:
    with that balance, the number of group-membership attributes two
    classes share depends only on their lowest common ancestor, the
    pairwise distances form an ultrametric, and average-linkage clustering
    reconstructs the generating tree exactly when no flip noise is added.
    """
    weights = {}

    def walk(node) -> float:
        if node.is_leaf:
            return 0.0
        depths = [walk(c) for c in node.children]
        total = max(depths) + 1.0
        for child, depth in zip(node.children, depths):
            weights[id(child)] = total - depth
        return total

    walk(root)
    return weights


def _allocate_attributes(root, n_attributes, rng) -> dict:
    """Map each attribute index to the ``id()`` of its dedicated subtree."""
    weights = _balanced_subtree_weights(root)
    keys = list(weights)  # DFS order of the recursion: deterministic
    mass = np.array([weights[k] for k in keys], dtype=float)
    counts = _largest_remainder(n_attributes, mass / mass.sum())
    if n_attributes >= len(keys):
        while np.any(counts == 0):
            counts[np.argmax(counts)] -= 1
            counts[counts.argmin()] += 1
    node_of_attr = np.repeat(np.arange(len(keys)), counts)
    rng.shuffle(node_of_attr)
    return {j: keys[node_of_attr[j]] for j in range(n_attributes)}


def _step_toward(values, direction):
    return np.clip(values + direction, -1, 1)


def _propagate_attributes(root, n_attributes, dedication, flip_rate, seed):
    """Inherit values down the tree, marking each dedicated subtree on entry.

    Every attribute starts at -1 ("no") at the root; the edge entering its
    dedicated subtree moves it one ternary step toward "yes", so the
    attribute flags membership of that group. Independent per-edge flips at
    ``flip_rate`` (one ternary step, no direct -1 to +1 jumps) add noise on
    top of the clean signature.
    """
    marks = {}
    for j, node_key in dedication.items():
        marks.setdefault(node_key, []).append(j)
    rows = {}
    edge_counter = [0]

    def flip(values, edge_id):
        if flip_rate <= 0:
            return values
        rng = _rng(seed, _STREAM_FLIPS, edge_id)
        mask = rng.random(n_attributes) < flip_rate
        if not mask.any():
            return values
        out = values.copy()
        step = np.where(out == 0, rng.choice((-1, 1), size=n_attributes), -np.sign(out))
        out[mask] = np.clip(out + step, -1, 1)[mask]
        return out

    def walk(node, values):
        if node.is_leaf:
            rows[node.class_index] = values
            return
        for child in node.children:
            v = values.copy()
            mine = marks.get(id(child), [])
            v[mine] = _step_toward(v[mine], 1)
            edge_counter[0] += 1
            v = flip(v, edge_counter[0])
            walk(child, v)

    walk(root, np.full(n_attributes, -1, dtype=int))
    return rows


def generate(config: SynthConfig) -> SynthBundle:
    """Build catalog, attribute matrix, generating tree, and feature splits."""
    config.validate()
    k, n_a = config.n_classes, config.n_attributes

    rng_novel = _rng(config.seed, _STREAM_NOVEL)
    novel_idx = np.sort(rng_novel.choice(k, size=config.n_novel, replace=False))
    novel = np.zeros(k, dtype=bool)
    novel[novel_idx] = True
    catalog = ClassCatalog(names=tuple(f"class{c:03d}" for c in range(k)), novel=novel)

    root = _random_binary_tree(k, _rng(config.seed, _STREAM_TREE))
    _canonicalize(root)
    _assign_inner_ids(root, k)

    rng_attr = _rng(config.seed, _STREAM_ATTR)
    dedication = _allocate_attributes(root, n_a, rng_attr)

    for attempt in range(100):
        rows = _propagate_attributes(
            root, n_a, dedication, config.flip_rate,
            config.seed + attempt * 1_000_003,
        )
        values = np.stack([rows[c] for c in range(k)]).astype(np.int8)
        if len({tuple(r) for r in values}) >= 2:
            break
    else:
        raise DataFormatError("could not generate 2 distinct attribute rows")
    attributes = AttributeMatrix(
        values=values, attribute_names=tuple(f"attr{j:03d}" for j in range(n_a))
    )

    tree = Hierarchy(root, k)
    tree.annotate_rewards()

    rng_embed = _rng(config.seed, _STREAM_EMBED)
    embedding = rng_embed.normal(0.0, 1.0, size=(config.n_features, n_a)) / np.sqrt(n_a)
    jitter = rng_embed.normal(0.0, PROTO_JITTER, size=(k, config.n_features))
    prototypes = values.astype(float) @ embedding.T + jitter

    counts = _largest_remainder(config.items_per_class, config.split_fractions)
    parts = {"train": ([], [], []), "validation": ([], [], []), "test": ([], [], [])}

    def push(part, ids, labels, feats):
        parts[part][0].extend(ids)
        parts[part][1].extend(labels)
        parts[part][2].append(feats)

    for c in range(k):
        rng_c = _rng(config.seed, _STREAM_ITEMS, c)
        feats = prototypes[c] + config.noise_sigma * rng_c.normal(size=(config.items_per_class, config.n_features))
        ids = [f"{catalog.names[c]}-{i:04d}" for i in range(config.items_per_class)]
        if novel[c]:
            # novel classes are withheld entirely: every item is a blind test item
            push("test", ids, [c] * len(ids), feats)
            continue
        bounds = np.cumsum(counts)
        push("train", ids[: bounds[0]], [c] * counts[0], feats[: bounds[0]])
        push("validation", ids[bounds[0]: bounds[1]], [c] * counts[1], feats[bounds[0]: bounds[1]])
        push("test", ids[bounds[1]:], [c] * counts[2], feats[bounds[1]:])

    def pack(part):
        ids, labels, feats = parts[part]
        mat = np.vstack(feats) if feats else np.zeros((0, config.n_features))
        return FeatureSet(item_ids=ids, labels=np.asarray(labels, dtype=int), features=mat)

    split = DatasetSplit(train=pack("train"), validation=pack("validation"), test=pack("test"))
    split.validate(catalog)
    return SynthBundle(
        config=config, catalog=catalog, attributes=attributes, generating_tree=tree,
        split=split, prototypes=prototypes, embedding=embedding,
    )


def oracle_bayes_rank(bundle: SynthBundle, features, true_class) -> int:
    """Rank of the true class under the generative model's own likelihood.

    Items are isotropic Gaussians around class prototypes, so likelihood
    order is distance order; ties break toward the lower class index.
    """
    x = np.asarray(features, dtype=float)
    d2 = ((bundle.prototypes - x[None, :]) ** 2).sum(axis=1)
    order = np.lexsort((np.arange(d2.shape[0]), d2))
    return int(np.flatnonzero(order == int(true_class))[0]) + 1


def nearest_prototype(bundle: SynthBundle, features) -> np.ndarray:
    """Generative-model classifier: index of the closest prototype per row."""
    X = np.atleast_2d(np.asarray(features, dtype=float))
    d2 = ((X[:, None, :] - bundle.prototypes[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)
