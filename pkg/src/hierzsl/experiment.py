"""Experiment orchestration: train, tune, evaluate, sweep, and result tables.

The blind protocol throughout: the test split mixes items of known and
withheld classes and nothing tells the classifiers which is which. Known
items ride the hierarchy pruned of withheld classes when posteriors come
from the conventional one-vs-rest route; attribute-based posteriors cover
the whole catalog and therefore use the unpruned tree. Correctness of a
prediction for a withheld class is judged against the full tree (node ids
survive pruning, so the pruned prediction can be located there).
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__, fileio
from .attributes import (
    DirectAttributeClassifier,
    estimate_attribute_error_model,
    class_log_likelihood_matrix,
    posterior_matrix_from_log_likelihoods,
    ternarize,
)
from .core import DataFormatError, validate_catalog
from .decision import (
    LAMBDA_BRACKET_CAP,
    darts_classify_batch,
    darts_tune_lambda,
    debias_matrix,
    maxexp_classify_batch,
    maxexp_tune_theta,
)
from .hierarchy import Hierarchy, build_hierarchy
from .linear import CalibratedOneVsRestClassifier, confusion_from_assignments
from .metrics import (
    EvalRecord,
    SweepCurve,
    SweepPoint,
    aggregate_outcomes,
    hierarchical_rank_contribution,
)

METHODS = ("darts", "maxexp")
SOURCES = ("conventional", "direct-attr", "indirect-attr")
CURVE_HEADER = (
    "method", "posterior_source", "param", "subset",
    "avg_accuracy", "avg_reward_strict", "avg_reward_nominal", "n_items",
)
RECORD_HEADER = (
    "method", "posterior_source", "item_id", "true_class", "subset",
    "prediction", "reward_bits", "correct", "baseline",
)
SUMMARY_HEADER = (
    "method", "posterior_source", "subset",
    "avg_info_gain_strict", "avg_info_gain_nominal", "mra", "n_items",
)
TUNED_HEADER = ("method", "posterior_source", "param", "reached")

DEFAULT_LAMBDA_GRID = (0.0,) + tuple(float(x) for x in np.geomspace(0.01, 1000.0, 19))
DEFAULT_THETA_GRID = tuple(float(x) for x in np.linspace(0.0, 0.95, 20))


class ExperimentError(RuntimeError):
    """Stage-tagged failure; the CLI surfaces the stage in its exit message."""

    def __init__(self, stage, message):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


@dataclass(frozen=True)
class ExperimentConfig:
    features_train: str = ""
    features_validation: str = ""
    features_test: str = ""
    attributes: str = ""
    catalog: str = ""
    hierarchy: str = ""  # optional: built from attribute vectors when empty
    methods: tuple = METHODS
    posterior_sources: tuple = SOURCES
    topn: bool = True
    debias: bool = False
    epsilon: float = 0.1
    lambda_grid: tuple = DEFAULT_LAMBDA_GRID
    theta_grid: tuple = DEFAULT_THETA_GRID
    tau: float = 1.0 / 3.0
    svm_c: float = 1.0
    svm_tol: float = 1e-6
    svm_max_epochs: int = 10000
    seed: int = 0
    jobs: int = 1
    out: str = "results"

    def validate(self):
        for m in self.methods:
            if m not in METHODS:
                raise DataFormatError(f"unknown method {m!r}")
        for s in self.posterior_sources:
            if s not in SOURCES:
                raise DataFormatError(f"unknown posterior source {s!r}")
        if not self.methods or not self.posterior_sources:
            raise DataFormatError("need at least one method and one posterior source")
        if not (0.0 < self.epsilon <= 1.0):
            raise DataFormatError("epsilon must lie in (0, 1]")
        if not (0.0 < self.tau < 1.0):
            raise DataFormatError("tau must lie strictly inside (0, 1)")
        for name in ("features_train", "features_validation", "features_test", "attributes", "catalog"):
            p = getattr(self, name)
            if not p or not Path(p).exists():
                raise DataFormatError(f"{name} file missing: {p!r}")
        if self.hierarchy and not Path(self.hierarchy).exists():
            raise DataFormatError(f"hierarchy file missing: {self.hierarchy!r}")
        if list(self.lambda_grid) != sorted(set(self.lambda_grid)):
            raise DataFormatError("lambda grid must be strictly increasing")
        if list(self.theta_grid) != sorted(set(self.theta_grid)):
            raise DataFormatError("theta grid must be strictly increasing")
        if self.theta_grid and not (0.0 <= self.theta_grid[0] and self.theta_grid[-1] < 1.0):
            raise DataFormatError("theta grid must lie in [0, 1)")
        return self

    # -- flat key-value round trip ------------------------------------------

    def to_kv(self) -> dict:
        return {
            "features_train": self.features_train,
            "features_validation": self.features_validation,
            "features_test": self.features_test,
            "attributes": self.attributes,
            "catalog": self.catalog,
            "hierarchy": self.hierarchy,
            "methods": ",".join(self.methods),
            "posterior_sources": ",".join(self.posterior_sources),
            "topn": self.topn,
            "debias": self.debias,
            "epsilon": self.epsilon,
            "lambda_grid": ",".join(repr(float(x)) for x in self.lambda_grid),
            "theta_grid": ",".join(repr(float(x)) for x in self.theta_grid),
            "tau": self.tau,
            "svm_c": self.svm_c,
            "svm_tol": self.svm_tol,
            "svm_max_epochs": self.svm_max_epochs,
            "seed": self.seed,
            "jobs": self.jobs,
            "out": self.out,
        }

    @staticmethod
    def from_kv(kv: dict) -> "ExperimentConfig":
        def split(v):
            return tuple(x.strip() for x in v.split(",") if x.strip())

        def boolean(v):
            if v not in ("true", "false"):
                raise DataFormatError(f"expected true/false, got {v!r}")
            return v == "true"

        known = {f.name for f in fields(ExperimentConfig)}
        cfg = ExperimentConfig()
        for key, value in kv.items():
            if key.startswith("info."):
                continue  # manifests carry informational keys configs ignore
            if key not in known:
                raise DataFormatError(f"unknown config key {key!r}")
            if key in ("methods", "posterior_sources"):
                cfg = replace(cfg, **{key: split(value)})
            elif key in ("lambda_grid", "theta_grid"):
                cfg = replace(cfg, **{key: tuple(float(x) for x in split(value))})
            elif key in ("topn", "debias"):
                cfg = replace(cfg, **{key: boolean(value)})
            elif key in ("epsilon", "tau", "svm_c", "svm_tol"):
                cfg = replace(cfg, **{key: float(value)})
            elif key in ("svm_max_epochs", "seed", "jobs"):
                cfg = replace(cfg, **{key: int(value)})
            else:
                cfg = replace(cfg, **{key: value})
        return cfg


@dataclass
class PosteriorSource:
    """One way of producing class posteriors, with the tree it rides on."""

    name: str
    tree: Hierarchy
    class_indices: np.ndarray
    val_probs: np.ndarray
    test_probs: np.ndarray


def _rank_of_true(prob_matrix, class_indices, true_classes) -> np.ndarray:
    """1-based rank of each row's true class, ties to the lower class index."""
    probs = np.asarray(prob_matrix, dtype=float)
    class_indices = np.asarray(class_indices, dtype=int)
    n, k = probs.shape
    tie = np.tile(class_indices, (n, 1))
    order = np.lexsort((tie, -probs), axis=1)
    rank_of_col = np.empty((n, k), dtype=int)
    rows = np.arange(n)[:, None]
    rank_of_col[rows, order] = np.arange(1, k + 1)[None, :]
    col_of_class = {int(c): j for j, c in enumerate(class_indices)}
    cols = np.array([col_of_class[int(t)] for t in true_classes])
    return rank_of_col[np.arange(n), cols]


class Experiment:
    """Loads one configuration and runs the pipeline stage by stage."""

    def __init__(self, config: ExperimentConfig):
        self.config = config.validate()

    # -- load ------------------------------------------------------------------

    def load(self):
        cfg = self.config
        try:
            self.catalog = fileio.read_catalog(cfg.catalog)
            self.attributes, row_names = fileio.read_attribute_matrix(cfg.attributes)
            if tuple(row_names) != self.catalog.names:
                raise DataFormatError("attribute matrix rows do not match catalog order")
            self.train_set = fileio.read_features(cfg.features_train, self.catalog)
            self.val_set = fileio.read_features(cfg.features_validation, self.catalog)
            self.test_set = fileio.read_features(cfg.features_test, self.catalog)
            from .core import DatasetSplit

            DatasetSplit(self.train_set, self.val_set, self.test_set).validate(self.catalog)
        except (DataFormatError, OSError, KeyError) as exc:
            raise ExperimentError("load", str(exc)) from exc

        try:
            if cfg.hierarchy:
                self.full_tree = fileio.import_hierarchy(cfg.hierarchy, self.catalog)
            else:
                self.full_tree, self.linkage_trace = build_hierarchy(
                    self.attributes, range(self.catalog.n_classes), self.catalog
                )
            problems = validate_catalog(self.catalog, self.attributes, self.full_tree)
            if problems:
                raise DataFormatError("; ".join(problems[:5]))
            novel = self.catalog.novel_indices
            self.pruned_tree = self.full_tree.prune(novel) if novel.size else self.full_tree
        except (DataFormatError, KeyError) as exc:
            raise ExperimentError("build-tree", str(exc)) from exc
        return self

    # -- train ------------------------------------------------------------------

    def _needed_sources(self) -> set:
        needed = set(self.config.posterior_sources)
        if self.config.topn:
            # top-N pairs the conventional hierarchical prediction with an
            # attribute-based class ranking
            needed.add("conventional")
            if not needed & {"direct-attr", "indirect-attr"}:
                needed.add("direct-attr")
        return needed

    def train(self):
        cfg = self.config
        try:
            y = self.train_set.labels
            if np.any(y < 0):
                raise DataFormatError("training items must be labeled")
            self.leaf_model = CalibratedOneVsRestClassifier(
                C=cfg.svm_c, tol=cfg.svm_tol, max_epochs=cfg.svm_max_epochs,
                seed=cfg.seed, n_jobs=cfg.jobs,
            ).fit(self.train_set.features, y)
            known = self.catalog.known_indices
            if not np.array_equal(self.leaf_model.classes_, known):
                raise DataFormatError("train split does not cover every non-novel class")
            self.direct_bank = None
            if "direct-attr" in self._needed_sources():
                self.direct_bank = DirectAttributeClassifier(
                    C=cfg.svm_c, tol=cfg.svm_tol, max_epochs=cfg.svm_max_epochs,
                    seed=cfg.seed, n_jobs=cfg.jobs,
                ).fit(self.train_set.features, y, self.attributes)
        except (DataFormatError, ValueError) as exc:
            raise ExperimentError("train", str(exc)) from exc
        return self

    # -- posterior sources --------------------------------------------------------

    def build_sources(self):
        cfg = self.config
        try:
            catalog_classes = np.arange(self.catalog.n_classes)
            known = self.leaf_model.classes_
            val_conv = self.leaf_model.predict_proba(self.val_set.features)
            test_conv = self.leaf_model.predict_proba(self.test_set.features)
            self.sources = {}
            needed = self._needed_sources()

            if "conventional" in needed:
                assert np.array_equal(self.pruned_tree.leaf_class_order, known)
                self.sources["conventional"] = PosteriorSource(
                    "conventional", self.pruned_tree, known, val_conv, test_conv
                )

            if "direct-attr" in needed:
                vals_val = self.direct_bank.predict_values(self.val_set.features)
                vals_test = self.direct_bank.predict_values(self.test_set.features)
                err = estimate_attribute_error_model(vals_val, self.val_set.labels, self.attributes)
                self.direct_error_model = err
                self.sources["direct-attr"] = PosteriorSource(
                    "direct-attr", self.full_tree, catalog_classes,
                    posterior_matrix_from_log_likelihoods(
                        class_log_likelihood_matrix(vals_val, self.attributes, err)),
                    posterior_matrix_from_log_likelihoods(
                        class_log_likelihood_matrix(vals_test, self.attributes, err)),
                )

            if "indirect-attr" in needed:
                rows_known = self.attributes.rows(known).astype(float)
                vals_val = ternarize(val_conv @ rows_known, cfg.tau)
                vals_test = ternarize(test_conv @ rows_known, cfg.tau)
                err = estimate_attribute_error_model(vals_val, self.val_set.labels, self.attributes)
                self.indirect_error_model = err
                self.sources["indirect-attr"] = PosteriorSource(
                    "indirect-attr", self.full_tree, catalog_classes,
                    posterior_matrix_from_log_likelihoods(
                        class_log_likelihood_matrix(vals_val, self.attributes, err)),
                    posterior_matrix_from_log_likelihoods(
                        class_log_likelihood_matrix(vals_test, self.attributes, err)),
                )

            if cfg.debias:
                self._debias_sources()
        except (DataFormatError, ValueError) as exc:
            raise ExperimentError("posteriors", str(exc)) from exc
        return self

    def _debias_sources(self):
        """Validation-confusion renormalization of every source's posteriors.

        The confusion lives on the non-novel classes (validation has no
        others); for catalog-wide posteriors only the non-novel block is
        reattributed, which preserves the block's total mass.
        """
        known = self.leaf_model.classes_
        pos_of_known = {int(c): i for i, c in enumerate(known)}
        for source in self.sources.values():
            cols = [int(c) for c in source.class_indices]
            known_cols = [j for j, c in enumerate(cols) if c in pos_of_known]
            block = source.val_probs[:, known_cols]
            pred_pos = block.argmax(axis=1)
            true_pos = np.array([pos_of_known[int(t)] for t in self.val_set.labels])
            confusion = confusion_from_assignments(true_pos, pred_pos, known.size)
            m = debias_matrix(confusion)
            for attr in ("val_probs", "test_probs"):
                probs = getattr(source, attr).copy()
                probs[:, known_cols] = probs[:, known_cols] @ m.T
                probs /= probs.sum(axis=1, keepdims=True)
                setattr(source, attr, probs)

    # -- tune ------------------------------------------------------------------------

    def tune(self):
        cfg = self.config
        try:
            self.tuned = {}
            for method in cfg.methods:
                for name in sorted(self.sources):  # includes sources top-N pulled in
                    source = self.sources[name]
                    if method == "darts":
                        result = darts_tune_lambda(
                            source.tree, source.val_probs, self.val_set.labels, cfg.epsilon
                        )
                    else:
                        result = maxexp_tune_theta(
                            source.tree, source.val_probs, self.val_set.labels, cfg.epsilon
                        )
                    self.tuned[(method, name)] = result
        except (DataFormatError, ValueError) as exc:
            raise ExperimentError("tune", str(exc)) from exc
        return self

    # -- shared evaluation helpers -----------------------------------------------------

    def _classify(self, method, source, param):
        if not hasattr(self, "_node_prob_cache"):
            self._node_prob_cache = {}
        if source.name not in self._node_prob_cache:
            self._node_prob_cache[source.name] = source.tree.aggregate(source.test_probs)
        node_probs = self._node_prob_cache[source.name]
        if method == "darts":
            return darts_classify_batch(source.tree, node_probs, param)
        return maxexp_classify_batch(source.tree, node_probs, param)

    def _correctness(self, tree, winners, true_classes):
        out = np.empty(len(winners), dtype=bool)
        for i, (w, t) in enumerate(zip(winners, true_classes)):
            if tree.has_class(t):
                out[i] = tree.is_correct(w, t)
            else:
                out[i] = self.full_tree.is_correct(int(w), t)
        return out

    def _subsets(self):
        novel_mask = self.catalog.novel[self.test_set.labels]
        return (("non-novel", ~novel_mask), ("novel", novel_mask))

    def _hier_outcomes(self, method, name, param):
        source = self.sources[name]
        winners = self._classify(method, source, param)
        rewards = np.array([source.tree.nodes[int(w)].reward for w in winners])
        leaf_counts = np.array([source.tree.nodes[int(w)].leaf_count for w in winners])
        correct = self._correctness(source.tree, winners, self.test_set.labels)
        return winners, rewards, leaf_counts, correct

    def _attr_test_ranks(self, name):
        source = self.sources[name]
        return _rank_of_true(source.test_probs, source.class_indices, self.test_set.labels)

    # -- evaluate at tuned parameters ------------------------------------------------------

    def evaluate(self):
        cfg = self.config
        try:
            records = []  # (posterior_source, baseline, EvalRecord)
            summary = []

            def emit_subset_rows(method, src_name, rewards, correct, mra_ranks, baseline, miss_mode):
                for subset, mask in self._subsets():
                    if not mask.any():
                        continue
                    _, strict, nominal = aggregate_outcomes(rewards[mask], correct[mask], miss_mode)
                    mra = 1.0 - float(np.mean(mra_ranks[mask])) / baseline if mra_ranks is not None else ""
                    summary.append((method, src_name, subset, strict, nominal, mra, int(mask.sum())))

            novel_mask = self.catalog.novel[self.test_set.labels]

            for method in cfg.methods:
                for name in cfg.posterior_sources:
                    param = self.tuned[(method, name)].value
                    source = self.sources[name]
                    winners, rewards, leaf_counts, correct = self._hier_outcomes(method, name, param)
                    baseline = source.tree.n_leaves
                    hranks = np.array([
                        hierarchical_rank_contribution(lc, ok, baseline)
                        for lc, ok in zip(leaf_counts, correct)
                    ])
                    for i, item in enumerate(self.test_set.item_ids):
                        records.append((name, baseline, EvalRecord(
                            item_id=item, true_class=int(self.test_set.labels[i]),
                            method=method, prediction=str(int(winners[i])),
                            reward=float(rewards[i]), correct=bool(correct[i]),
                            novel=bool(novel_mask[i]),
                        )))
                    emit_subset_rows(method, name, rewards, correct, hranks, baseline, "nominal")

            for flat_method, src_name in (("direct-mle", "direct-attr"), ("indirect-mle", "indirect-attr")):
                if src_name not in self.sources or src_name not in cfg.posterior_sources:
                    continue
                ranks = self._attr_test_ranks(src_name)
                baseline = self.sources[src_name].tree.n_leaves
                gains = np.log2(float(baseline)) - np.log2(ranks.astype(float))
                correct = ranks == 1
                for i, item in enumerate(self.test_set.item_ids):
                    records.append((src_name, baseline, EvalRecord(
                        item_id=item, true_class=int(self.test_set.labels[i]),
                        method=flat_method, prediction=str(int(ranks[i])),
                        reward=float(gains[i]), correct=bool(correct[i]),
                        novel=bool(novel_mask[i]),
                    )))
                for subset, mask in self._subsets():
                    if not mask.any():
                        continue
                    mean_gain = float(gains[mask].mean())
                    mra = 1.0 - float(ranks[mask].mean()) / baseline
                    summary.append((flat_method, src_name, subset, mean_gain, mean_gain, mra, int(mask.sum())))

            if cfg.topn:
                for method in cfg.methods:
                    param = self.tuned.get((method, "conventional"))
                    if param is None:
                        continue
                    _, rewards, leaf_counts, _ = self._hier_outcomes(method, "conventional", param.value)
                    for rank_src in ("direct-attr", "indirect-attr"):
                        if rank_src not in self.sources:
                            continue
                        ranks = self._attr_test_ranks(rank_src)
                        hits = ranks <= leaf_counts
                        topn_method = f"topn-{method}"
                        baseline = self.sources["conventional"].tree.n_leaves
                        for i, item in enumerate(self.test_set.item_ids):
                            records.append((rank_src, baseline, EvalRecord(
                                item_id=item, true_class=int(self.test_set.labels[i]),
                                method=topn_method, prediction=str(int(leaf_counts[i])),
                                reward=float(rewards[i]), correct=bool(hits[i]),
                                novel=bool(novel_mask[i]),
                            )))
                        emit_subset_rows(topn_method, rank_src, rewards, hits, None, baseline, "exclude")

            self.records = records
            self.summary = summary
        except (DataFormatError, ValueError, KeyError) as exc:
            raise ExperimentError("eval", str(exc)) from exc
        return self

    # -- parameter sweeps -------------------------------------------------------------------

    def sweep(self):
        cfg = self.config
        try:
            rows = []

            def add_points(method, src_name, param, rewards, correct, miss_mode):
                for subset, mask in self._subsets():
                    if not mask.any():
                        continue
                    acc, strict, nominal = aggregate_outcomes(rewards[mask], correct[mask], miss_mode)
                    rows.append((method, src_name, float(param), subset, acc, strict, nominal, int(mask.sum())))

            for method in cfg.methods:
                grid = cfg.lambda_grid if method == "darts" else cfg.theta_grid
                for name in cfg.posterior_sources:
                    for param in grid:
                        _, rewards, leaf_counts, correct = self._hier_outcomes(method, name, param)
                        add_points(method, name, param, rewards, correct, "nominal")
                if cfg.topn:
                    for rank_src in ("direct-attr", "indirect-attr"):
                        if rank_src not in self.sources or "conventional" not in self.sources:
                            continue
                        ranks = self._attr_test_ranks(rank_src)
                        for param in grid:
                            _, rewards, leaf_counts, _ = self._hier_outcomes(method, "conventional", param)
                            hits = ranks <= leaf_counts
                            add_points(f"topn-{method}", rank_src, param, rewards, hits, "exclude")

            self.curve_rows = rows
        except (DataFormatError, ValueError, KeyError) as exc:
            raise ExperimentError("sweep", str(exc)) from exc
        return self

    def sweep_curves(self) -> list:
        """Group the sweep rows into SweepCurve objects per method/source/subset."""
        grouped = {}
        for method, src, param, subset, acc, strict, nominal, n in self.curve_rows:
            grouped.setdefault((method, src, subset), []).append(
                SweepPoint(param, acc, strict, nominal, n)
            )
        return [
            SweepCurve(method=f"{method}+{src}", subset=subset, points=tuple(points))
            for (method, src, subset), points in sorted(grouped.items())
        ]

    def _record_rows(self):
        for src, baseline, rec in self.records:
            yield (
                rec.method, src, rec.item_id, self.catalog.names[rec.true_class],
                "novel" if rec.novel else "non-novel",
                rec.prediction, rec.reward, rec.correct, baseline,
            )

    # -- outputs ----------------------------------------------------------------------------

    def manifest(self) -> dict:
        kv = self.config.to_kv()
        kv.update({
            "info.package_version": __version__,
            "info.numpy_version": np.__version__,
            "info.tau_default": self.config.tau,
            "info.calibration_targets": "smoothed (n+1)/(n+2) and 1/(n+2)",
            "info.confusion_smoothing": "add-one",
            "info.linkage": "average",
            "info.tie_break": "depth-then-lowest-id",
            "info.lambda_bracket_cap": LAMBDA_BRACKET_CAP,
            "info.full_tree_leaves": self.full_tree.n_leaves,
            "info.pruned_tree_leaves": self.pruned_tree.n_leaves,
        })
        for subset, mask in self._subsets():
            kv[f"info.test_items_{subset}"] = int(mask.sum())
        if hasattr(self, "tuned"):
            for (method, name), result in sorted(self.tuned.items()):
                kv[f"info.tuned.{method}.{name}"] = repr(result.value)
                kv[f"info.tuned.{method}.{name}.reached"] = result.reached
        return kv

    def write_outputs(self, with_curves=True):
        cfg = self.config
        out = Path(cfg.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
            marker = out / "FAILED"
            if marker.exists():
                marker.unlink()
            fileio.write_table(out / "records.csv", RECORD_HEADER, self._record_rows())
            fileio.write_table(out / "summary.csv", SUMMARY_HEADER, self.summary)
            tuned_rows = [
                (method, name, result.value, result.reached)
                for (method, name), result in sorted(self.tuned.items())
            ]
            fileio.write_table(out / "tuned.csv", TUNED_HEADER, tuned_rows)
            if with_curves:
                fileio.write_table(out / "curves.csv", CURVE_HEADER, self.curve_rows)
            fileio.write_kv(out / "manifest.txt", self.manifest())
        except OSError as exc:
            raise ExperimentError("write", str(exc)) from exc
        return out


def run_experiment(config: ExperimentConfig, with_curves=True) -> Experiment:
    """Full pipeline; on failure a FAILED marker invalidates partial outputs."""
    exp = Experiment(config)
    try:
        exp.load().train().build_sources().tune().evaluate()
        if with_curves:
            exp.sweep()
        exp.write_outputs(with_curves=with_curves)
    except ExperimentError as exc:
        out = Path(config.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "FAILED").write_text(f"stage: {exc.stage}\n{exc}\n")
        raise
    return exp
