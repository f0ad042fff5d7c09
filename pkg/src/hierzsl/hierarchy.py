"""Class hierarchies: construction by clustering, rewards, posterior aggregation.

The tree is built by average-linkage agglomerative clustering of the classes'
ternary attribute vectors under correlation distance. Every node carries a
reward in bits: log2(baseline leaf count) - log2(own leaf descendant count),
i.e. the specificity gained by narrowing the candidate set to this node.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import DataFormatError, Posterior


@dataclass
class Node:
    id: int
    label: str
    children: list = field(default_factory=list)
    class_index: int = None
    leaf_count: int = 0
    reward: float = 0.0
    depth: int = 0

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass(frozen=True)
class LinkageStep:
    """One agglomerative merge: which clusters fused, at what distance."""

    left: int
    right: int
    distance: float
    new_id: int


@dataclass(frozen=True)
class NodePrediction:
    """A hierarchical classifier's chosen node."""

    node_id: int
    is_leaf: bool
    leaf_count: int
    reward: float


class Hierarchy:
    """Rooted tree whose leaves are catalog classes.

    Node ids are stable: leaves use their class index, inner nodes are
    numbered from ``catalog_size`` upward in canonical post-order. Pruning
    preserves ids so that nodes of a pruned tree can be located in the full
    tree when judging correctness for novel classes.
    """

    def __init__(self, root: Node, catalog_size: int):
        self.root = root
        self.catalog_size = catalog_size
        self._index()
        if self.root.leaf_count < 2:
            raise DataFormatError("degenerate hierarchy: fewer than 2 leaves")

    # -- construction -----------------------------------------------------

    @staticmethod
    def from_nested(nested: dict, catalog) -> "Hierarchy":
        """Build from a nested {'label', 'children'|'class'} structure.

        Leaves name catalog classes; duplicates or unknown names are errors.
        Sibling order is canonicalized (by smallest descendant class index)
        and inner ids are assigned in post-order, so equal topologies always
        produce identical trees.
        """
        seen = set()

        def build(obj) -> Node:
            if "class" in obj:
                name = obj["class"]
                ci = catalog.index_of(name)
                if ci in seen:
                    raise DataFormatError(f"duplicate leaf class {name!r}")
                seen.add(ci)
                return Node(id=ci, label=obj.get("label", name), class_index=ci, leaf_count=1)
            children = [build(c) for c in obj.get("children", [])]
            if not children:
                raise DataFormatError("inner node without children")
            node = Node(id=-1, label=obj.get("label", ""), children=children)
            return node

        root = build(nested)
        _canonicalize(root)
        _assign_inner_ids(root, catalog.n_classes)
        return Hierarchy(root, catalog.n_classes)

    # -- indexing ----------------------------------------------------------

    def _index(self):
        self.nodes = {}
        self.parent = {}
        order = []

        def walk(node, depth):
            node.depth = depth
            if node.id in self.nodes:
                raise DataFormatError(f"duplicate node id {node.id}")
            self.nodes[node.id] = node
            order.append(node.id)
            count = 0
            for child in node.children:
                self.parent[child.id] = node.id
                count += walk(child, depth + 1)
            node.leaf_count = count if node.children else 1
            return node.leaf_count

        walk(self.root, 0)
        self.node_order = order  # DFS preorder, fixed for the tree's lifetime
        self._row_of = {nid: i for i, nid in enumerate(order)}

        leaf_ids = [nid for nid in order if self.nodes[nid].is_leaf]
        classes = [self.nodes[nid].class_index for nid in leaf_ids]
        if any(c is None for c in classes):
            raise DataFormatError("leaf without class index")
        if len(set(classes)) != len(classes):
            raise DataFormatError("duplicate class on multiple leaves")
        # leaf columns sorted by class index: the alignment used by aggregate()
        by_class = sorted(zip(classes, leaf_ids))
        self.leaf_class_order = np.array([c for c, _ in by_class], dtype=int)
        self.leaf_node_of_class = {c: nid for c, nid in by_class}

        n_nodes, n_leaves = len(order), len(leaf_ids)
        member = np.zeros((n_nodes, n_leaves), dtype=float)
        col_of_class = {c: j for j, c in enumerate(self.leaf_class_order)}

        def fill(node):
            row = self._row_of[node.id]
            if node.is_leaf:
                member[row, col_of_class[node.class_index]] = 1.0
                return
            for child in node.children:
                fill(child)
                member[row] += member[self._row_of[child.id]]

        fill(self.root)
        self._membership = member

        self.ancestor_ids_of_class = {}
        for c, leaf_id in self.leaf_node_of_class.items():
            chain = [leaf_id]
            while chain[-1] in self.parent:
                chain.append(self.parent[chain[-1]])
            self.ancestor_ids_of_class[c] = frozenset(chain)

        self.rewards = np.zeros(n_nodes)
        self.depths = np.array([self.nodes[nid].depth for nid in order], dtype=int)
        self.leaf_counts = np.array([self.nodes[nid].leaf_count for nid in order], dtype=int)
        self.ids_array = np.array(order, dtype=int)

    # -- queries -----------------------------------------------------------

    @property
    def n_leaves(self) -> int:
        return self.root.leaf_count

    def leaves(self):
        return [self.nodes[self.leaf_node_of_class[c]] for c in self.leaf_class_order]

    def leaf_class_set(self):
        return set(int(c) for c in self.leaf_class_order)

    def has_class(self, class_index) -> bool:
        return int(class_index) in self.leaf_node_of_class

    def ancestor_chain(self, class_index) -> list:
        """Node ids from the class leaf up to the root, both inclusive."""
        ci = int(class_index)
        if ci not in self.leaf_node_of_class:
            raise DataFormatError(f"class {ci} is not a leaf of this tree")
        chain = [self.leaf_node_of_class[ci]]
        while chain[-1] in self.parent:
            chain.append(self.parent[chain[-1]])
        return chain

    def is_correct(self, node_id, class_index) -> bool:
        """Whether the class leaf sits at or below the given node."""
        ci = int(class_index)
        if ci not in self.ancestor_ids_of_class:
            raise DataFormatError(f"class {ci} is not a leaf of this tree")
        return int(node_id) in self.ancestor_ids_of_class[ci]

    def prediction(self, node_id) -> NodePrediction:
        node = self.nodes[int(node_id)]
        return NodePrediction(node.id, node.is_leaf, node.leaf_count, node.reward)

    # -- rewards -----------------------------------------------------------

    def annotate_rewards(self, baseline: int = None):
        """Set every node's reward to log2(baseline) - log2(leaf_count) bits."""
        if baseline is None:
            baseline = self.root.leaf_count
        if baseline < 2:
            raise DataFormatError("reward baseline must cover at least 2 leaves")
        base_bits = np.log2(float(baseline))
        for i, nid in enumerate(self.node_order):
            node = self.nodes[nid]
            node.reward = float(base_bits - np.log2(float(node.leaf_count)))
            self.rewards[i] = node.reward
        self.reward_baseline = int(baseline)
        return self

    # -- posterior aggregation ----------------------------------------------

    def aggregate(self, leaf_probs: np.ndarray) -> np.ndarray:
        """Sum leaf probabilities up the tree.

        ``leaf_probs`` must be aligned to ``leaf_class_order``; returns one
        probability per node in ``node_order`` (2-D input: one row per item).
        """
        leaf_probs = np.asarray(leaf_probs, dtype=float)
        if leaf_probs.shape[-1] != self.n_leaves:
            raise DataFormatError("leaf probability vector does not match leaf count")
        return leaf_probs @ self._membership.T

    def node_probabilities(self, posterior: Posterior) -> dict:
        """Per-node probability map for one posterior over exactly our leaves."""
        if sorted(posterior.class_indices.tolist()) != sorted(self.leaf_class_order.tolist()):
            raise DataFormatError("posterior class set does not match tree leaves")
        aligned = np.zeros(self.n_leaves)
        pos = {c: j for j, c in enumerate(self.leaf_class_order)}
        for c, p in zip(posterior.class_indices, posterior.probabilities):
            aligned[pos[int(c)]] = p
        vec = self.aggregate(aligned)
        root_mass = vec[self._row_of[self.root.id]]
        if abs(root_mass - 1.0) > 1e-9:
            raise DataFormatError(f"aggregated root mass {root_mass!r} != 1")
        return {nid: float(vec[i]) for i, nid in enumerate(self.node_order)}

    # -- pruning -------------------------------------------------------------

    def prune(self, novel_classes) -> "Hierarchy":
        """Remove the given leaf classes, collapsing single-child nodes.

        Node ids survive unchanged; leaf counts and rewards are recomputed
        against the reduced leaf set.
        """
        novel = set(int(c) for c in novel_classes)
        if not novel.issubset(self.leaf_class_set()):
            raise DataFormatError("novel set contains classes missing from the tree")
        if novel == self.leaf_class_set():
            raise DataFormatError("pruning would remove every leaf")

        def rebuild(node):
            if node.is_leaf:
                if node.class_index in novel:
                    return None
                return Node(id=node.id, label=node.label, class_index=node.class_index, leaf_count=1)
            kept = [rebuild(c) for c in node.children]
            kept = [c for c in kept if c is not None]
            if not kept:
                return None
            if len(kept) == 1:
                return kept[0]  # collapse: promote the sole surviving child
            return Node(id=node.id, label=node.label, children=kept)

        new_root = rebuild(self.root)
        pruned = Hierarchy(new_root, self.catalog_size)
        pruned.annotate_rewards()
        return pruned

    # -- canonical nested view -------------------------------------------------

    def to_nested(self, catalog) -> dict:
        def emit(node):
            if node.is_leaf:
                return {"label": node.label, "class": catalog.names[node.class_index]}
            return {"label": node.label, "children": [emit(c) for c in node.children]}

        return emit(self.root)

    def canonical_topology(self):
        """Hashable structure capturing topology up to sibling order."""

        def canon(node):
            if node.is_leaf:
                return node.class_index
            return tuple(sorted((canon(c) for c in node.children), key=repr))

        return canon(self.root)


def _min_class(node) -> int:
    if node.is_leaf:
        return node.class_index
    return min(_min_class(c) for c in node.children)


def _canonicalize(node):
    for child in node.children:
        _canonicalize(child)
    node.children.sort(key=_min_class)


def _assign_inner_ids(root, catalog_size):
    counter = [catalog_size]

    def walk(node):
        for child in node.children:
            walk(child)
        if node.children:
            node.id = counter[0]
            counter[0] += 1

    walk(root)


def correlation_distance(u, v) -> float:
    """1 - Pearson correlation of two vectors, in [0, 2].

    A zero-variance vector has no defined correlation; its distance to
    anything is fixed at the neutral value 1.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape or u.ndim != 1:
        raise DataFormatError("correlation distance needs two equal-length vectors")
    if u.size < 2:
        raise DataFormatError("correlation distance needs length >= 2")
    du = u - u.mean()
    dv = v - v.mean()
    nu = float(np.sqrt(du @ du))
    nv = float(np.sqrt(dv @ dv))
    if nu == 0.0 or nv == 0.0:
        return 1.0
    if np.array_equal(u, v):
        return 0.0  # exact endpoints, sidestepping sqrt rounding
    if np.array_equal(u, -v):
        return 2.0
    r = float(du @ dv) / (nu * nv)
    r = min(1.0, max(-1.0, r))
    return 1.0 - r


def build_hierarchy(attributes, class_indices, catalog, labels=None):
    """Agglomerate classes into a binary tree by attribute similarity.

    Average linkage over pairwise correlation distances of the classes'
    attribute rows. Ties in the merge queue resolve to the pair created
    earliest, so duplicate rows merge deterministically. Returns the
    reward-annotated tree plus the merge trace.
    """
    class_indices = [int(c) for c in class_indices]
    n = len(class_indices)
    if n < 2:
        raise DataFormatError("need at least 2 classes to build a hierarchy")
    rows = attributes.rows(class_indices).astype(float)

    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dist[i, j] = dist[j, i] = correlation_distance(rows[i], rows[j])

    if labels is None:
        labels = [catalog.names[c] for c in class_indices]

    clusters = {}
    for i, ci in enumerate(class_indices):
        clusters[i] = Node(id=ci, label=labels[i], class_index=ci, leaf_count=1)
    sizes = {i: 1 for i in range(n)}
    active = list(range(n))
    # distances between live clusters, keyed by local ids; grown as we merge
    d = {}
    for i in range(n):
        for j in range(i + 1, n):
            d[(i, j)] = dist[i, j]

    steps = []
    next_id = n
    last_distance = -np.inf
    while len(active) > 1:
        best = None
        for a_pos, i in enumerate(active):
            for j in active[a_pos + 1:]:
                dij = d[(i, j)]
                if best is None or dij < best[0] - 1e-15:
                    best = (dij, i, j)
        dij, i, j = best
        if dij < last_distance - 1e-9:
            raise DataFormatError("average-linkage produced a merge inversion")
        last_distance = max(last_distance, dij)

        merged = Node(
            id=-1,
            label=f"node-{next_id - n + 1}",
            children=[clusters[i], clusters[j]],
        )
        steps.append(LinkageStep(i, j, float(dij), next_id))
        for k in active:
            if k in (i, j):
                continue
            a, b = (min(i, k), max(i, k)), (min(j, k), max(j, k))
            dn = (sizes[i] * d[a] + sizes[j] * d[b]) / (sizes[i] + sizes[j])
            d[(min(next_id, k), max(next_id, k))] = dn
        clusters[next_id] = merged
        sizes[next_id] = sizes[i] + sizes[j]
        active = [k for k in active if k not in (i, j)] + [next_id]
        next_id += 1

    root = clusters[active[0]]
    _canonicalize(root)
    _assign_inner_ids(root, catalog.n_classes)
    tree = Hierarchy(root, catalog.n_classes)
    tree.annotate_rewards()
    return tree, steps
