"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines as they
complete. The five full-protocol runs behind criteria 7-9 share one
session fixture, so the whole suite stays well inside its time budget.
"""

import itertools
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from hierzsl import (
    AttributeErrorModel,
    AttributeMatrix,
    Hierarchy,
    SynthConfig,
    build_hierarchy,
    class_likelihoods_ml,
    darts_classify,
    darts_tune_lambda,
    generate,
    hierarchical_rank_contribution,
    info_gain_node,
    info_gain_rank,
    maxexp_classify,
    maxexp_tune_theta,
    mra_flat,
    topn_eval,
)
from hierzsl import fileio
from hierzsl.cli import write_dataset
from hierzsl.decision import darts_classify_batch, debias_matrix, maxexp_classify_batch
from hierzsl.experiment import ExperimentConfig, run_experiment
from hierzsl.hierarchy import _assign_inner_ids, _canonicalize
from hierzsl.linear import SigmoidCalibration, confusion_from_assignments
from hierzsl.synth import _random_binary_tree, _rng

from conftest import make_balanced_tree, make_flat_catalog, leaf_posterior_vector
from test_decision import oracle_darts, oracle_maxexp, node_prob_map
from test_attributes import brute_force_class_posterior


def report(criterion, ok, detail):
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
    assert ok, f"criterion {criterion}: {detail}"


# -- shared five-seed protocol runs ------------------------------------------------------


@pytest.fixture(scope="session")
def protocol_runs(tmp_path_factory):
    runs = []
    started = time.time()
    for seed in range(5):
        data_dir = tmp_path_factory.mktemp(f"accept_data_{seed}")
        write_dataset(generate(SynthConfig(seed=seed)), data_dir)
        cfg = ExperimentConfig.from_kv(fileio.read_kv(data_dir / "experiment.txt"))
        cfg = replace(cfg, out=str(data_dir / "results"), jobs=4)
        runs.append(run_experiment(cfg))
    return {"runs": runs, "elapsed": time.time() - started}


# -- criterion 1: decision rules match exhaustive node scoring ----------------------------


def test_criterion_1_oracle_equivalence_decision_rules():
    rng = np.random.default_rng(2024)
    started = time.time()
    mismatches = 0
    for case in range(200):
        n_leaves = int(rng.integers(2, 33))  # up to 63 nodes
        catalog = make_flat_catalog(n_leaves)
        root = _random_binary_tree(n_leaves, _rng(case, 77))
        _canonicalize(root)
        _assign_inner_ids(root, n_leaves)
        tree = Hierarchy(root, n_leaves)
        tree.annotate_rewards()
        leaf = rng.dirichlet(np.full(n_leaves, 0.6))
        probs = node_prob_map(tree, leaf)
        lam = float(10.0 ** rng.uniform(-3, 4))
        theta = float(rng.uniform(0.0, 1.0))
        if darts_classify(tree, probs, lam).node_id != oracle_darts(tree, probs, lam):
            mismatches += 1
        if maxexp_classify(tree, probs, theta).node_id != oracle_maxexp(tree, probs, theta):
            mismatches += 1
    elapsed = time.time() - started
    report(1, mismatches == 0 and elapsed < 10.0,
           f"200 random trees, 0 mismatches required (got {mismatches}), {elapsed:.2f}s < 10s")


# -- criterion 2: likelihood model matches brute-force enumeration -------------------------


def test_criterion_2_oracle_equivalence_likelihoods():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(2, 5))
        n_a = int(rng.integers(1, 5))
        attrs = AttributeMatrix(
            values=rng.integers(-1, 2, size=(k, n_a)).astype(np.int8),
            attribute_names=tuple(f"a{j}" for j in range(n_a)),
        )
        m = rng.random((n_a, 3, 3)) + 0.02
        m /= m.sum(axis=2, keepdims=True)
        error_model = AttributeErrorModel(m).check()
        pred = rng.integers(-1, 2, size=n_a)
        ours = class_likelihoods_ml(pred, attrs, error_model).probabilities
        oracle = brute_force_class_posterior(pred, attrs, error_model)
        worst = max(worst, float(np.max(np.abs(ours - oracle) / oracle)))
    report(2, worst <= 1e-12, f"1000 instances, worst relative error {worst:.2e} <= 1e-12")


# -- criterion 3: accuracy/reward monotonicity along the parameter grids --------------------


def test_criterion_3_monotonicity(protocol_runs):
    exp = protocol_runs["runs"][0]
    source = exp.sources["conventional"]
    node_probs = source.tree.aggregate(source.test_probs)
    labels = exp.test_set.labels
    violations = []
    for method, grid, classify in (
        ("darts", exp.config.lambda_grid, darts_classify_batch),
        ("maxexp", exp.config.theta_grid, maxexp_classify_batch),
    ):
        assert len(grid) == 20
        accs, rewards = [], []
        for param in grid:
            winners = classify(source.tree, node_probs, param)
            correct = exp._correctness(source.tree, winners, labels)
            nominal = np.array([source.tree.nodes[int(w)].reward for w in winners])
            accs.append(float(correct.mean()))
            rewards.append(float(nominal.mean()))
        for a, b in zip(accs, accs[1:]):
            if b < a - 1e-12:
                violations.append((method, "accuracy", a, b))
        for a, b in zip(rewards, rewards[1:]):
            if b > a + 1e-12:
                violations.append((method, "reward", a, b))
    report(3, not violations,
           f"20-point grids, accuracy non-decreasing and avg reward non-increasing: {violations or 'clean'}")


# -- criterion 4: tuning reaches the constructed optima --------------------------------------


def test_criterion_4_tuning_correctness():
    _, two_leaf = make_balanced_tree(2)
    leaf_probs = leaf_posterior_vector(two_leaf, {0: 0.4, 1: 0.6})[None, :]
    darts_result = darts_tune_lambda(two_leaf, leaf_probs, np.array([0]), epsilon=0.0, tol=1e-6)
    darts_ok = darts_result.reached and abs(darts_result.value - 1.5) <= 1e-4

    maxexp_probs = leaf_posterior_vector(two_leaf, {0: 0.3, 1: 0.7})[None, :]
    maxexp_result = maxexp_tune_theta(two_leaf, maxexp_probs, np.array([0]), epsilon=0.0)
    candidates = sorted({0.0, 0.3, 0.7})
    feasible = []
    for cand in candidates:
        winners = maxexp_classify_batch(two_leaf, two_leaf.aggregate(maxexp_probs), cand)
        if two_leaf.is_correct(winners[0], 0):
            feasible.append(cand)
    maxexp_ok = maxexp_result.reached and maxexp_result.value == pytest.approx(min(feasible))
    report(4, darts_ok and maxexp_ok,
           f"lambda {darts_result.value:.6f} within 1e-4 of 1.5; "
           f"theta {maxexp_result.value} equals minimal feasible candidate {min(feasible)}")


# -- criterion 5: clustering recovers the generating topology --------------------------------


def test_criterion_5_hierarchy_recovery():
    failures = []
    for seed in range(20):
        cfg = SynthConfig(
            n_classes=16, n_novel=0, flip_rate=0.0, items_per_class=4,
            split_fractions=(0.5, 0.25, 0.25), seed=seed,
        )
        bundle = generate(cfg)
        tree, _ = build_hierarchy(bundle.attributes, range(16), bundle.catalog)
        if tree.canonical_topology() != bundle.generating_tree.canonical_topology():
            failures.append(seed)
    report(5, not failures, f"20 random 16-class noiseless instances, failed seeds: {failures or 'none'}")


# -- criterion 6: metric formulas against hand-computed values -------------------------------


def test_criterion_6_metric_formulas():
    checks = []
    _, tree120 = make_balanced_tree(120)
    reward, correct = info_gain_node(tree120, tree120.leaf_node_of_class[3], 3)
    checks.append(abs(reward - 6.906890595608519) <= 1e-9 and correct)
    checks.append(abs(info_gain_node(tree120, tree120.root.id, 3)[0]) <= 1e-9)
    checks.append(abs(info_gain_rank(1, 150) - 7.228818690495881) <= 1e-9)
    checks.append(abs(info_gain_rank(150, 150)) <= 1e-9)
    checks.append(abs(mra_flat([1] * 5, 150) - (1 - 1 / 150)) <= 1e-9)
    checks.append(abs(hierarchical_rank_contribution(30, True, 120) - 15.0) <= 1e-9)
    checks.append(abs(hierarchical_rank_contribution(30, False, 120) - 75.0) <= 1e-9)
    checks.append(abs(topn_eval(list(range(8)), 3, 120)[0] - math.log2(15)) <= 1e-9)
    report(6, all(checks), f"hand-computed gains/ranks reproduced to 1e-9 ({sum(checks)}/{len(checks)})")


# -- criterion 7: qualitative orderings across five seeds ------------------------------------


def test_criterion_7_qualitative_orderings(protocol_runs):
    runs, elapsed = protocol_runs["runs"], protocol_runs["elapsed"]
    a_hits = b_hits = c_hits = 0
    for exp in runs:
        s = {(r[0], r[1], r[2]): r for r in exp.summary}
        attr_mra = min(s[("direct-mle", "direct-attr", "novel")][5],
                       s[("indirect-mle", "indirect-attr", "novel")][5])
        hier_mra = max(s[("darts", "conventional", "novel")][5],
                       s[("maxexp", "conventional", "novel")][5])
        a_hits += attr_mra > hier_mra
        b_hits += s[("maxexp", "conventional", "novel")][3] >= s[("darts", "conventional", "novel")][3]
        c_hits += all(
            s[(m, src, "non-novel")][3] > s[(m, src, "novel")][3]
            for m in ("darts", "maxexp")
            for src in ("conventional", "direct-attr", "indirect-attr")
        )
    ok = a_hits >= 4 and b_hits >= 4 and c_hits >= 4 and elapsed < 300.0
    report(7, ok,
           f"(a) attribute novel MRA above hierarchical {a_hits}/5, "
           f"(b) maxexp >= darts novel gain {b_hits}/5, "
           f"(c) non-novel gain above novel {c_hits}/5, runtime {elapsed:.0f}s < 300s")


# -- criterion 8: top-N fusion value at matched accuracy ---------------------------------------


def test_criterion_8_topn_combination_value(protocol_runs):
    hits = 0
    for exp in protocol_runs["runs"]:
        rows = exp.curve_rows

        def curve(method, source):
            return [(float(r[4]), float(r[5])) for r in rows
                    if r[0] == method and r[1] == source and r[3] == "novel"]

        plain = curve("maxexp", "conventional")
        fused = curve("topn-maxexp", "direct-attr")
        ok = True
        for acc_p, reward_p in plain:
            matched = [rew for acc_f, rew in fused if abs(acc_f - acc_p) <= 0.02]
            if matched and max(matched) < reward_p - 1e-9:
                ok = False
        hits += ok
    report(8, hits >= 4, f"top-N maxexp >= plain maxexp novel reward at matched accuracy in {hits}/5 seeds")


# -- criterion 9: debiasing reaches full accuracy at smaller lambda ----------------------------


def test_criterion_9_debias_behavior(protocol_runs):
    wins = 0
    details = []
    for exp in protocol_runs["runs"]:
        model = exp.leaf_model
        skewed_model_cal = list(model.calibrations_)
        cal0 = skewed_model_cal[0]
        skewed_model_cal[0] = SigmoidCalibration(cal0.a, cal0.b - math.log(12.0))
        original = model.calibrations_
        model.calibrations_ = skewed_model_cal
        try:
            probs = model.predict_proba(exp.val_set.features)
        finally:
            model.calibrations_ = original
        y = exp.val_set.labels
        known = model.classes_
        pos = {int(c): i for i, c in enumerate(known)}
        true_pos = np.array([pos[int(t)] for t in y])
        confusion = confusion_from_assignments(true_pos, probs.argmax(axis=1), known.size)
        debiased = probs @ debias_matrix(confusion).T
        debiased /= debiased.sum(axis=1, keepdims=True)
        tree = exp.pruned_tree
        raw = darts_tune_lambda(tree, probs, y, epsilon=0.0)
        fixed = darts_tune_lambda(tree, debiased, y, epsilon=0.0)
        details.append((round(raw.value, 2), round(fixed.value, 2)))
        if fixed.reached and fixed.value < raw.value:
            wins += 1
    report(9, wins == 5, f"debiased lambda strictly smaller in {wins}/5 seeds {details}")


# -- criterion 10: determinism and byte-identical round trips ----------------------------------


def test_criterion_10_determinism_and_round_trips(tmp_path):
    mini = SynthConfig(n_classes=8, n_novel=2, n_features=10, n_attributes=14,
                       items_per_class=15, split_fractions=(0.6, 0.2, 0.2), seed=3)
    data = tmp_path / "data"
    write_dataset(generate(mini), data)
    base = ExperimentConfig.from_kv(fileio.read_kv(data / "experiment.txt"))
    base = replace(base, lambda_grid=(0.0, 1.0, 4.0), theta_grid=(0.0, 0.4, 0.8))
    cfg1 = replace(base, out=str(tmp_path / "jobs1"), jobs=1)
    cfg8 = replace(base, out=str(tmp_path / "jobs8"), jobs=8)
    run_experiment(cfg1)
    run_experiment(cfg8)
    tables_equal = all(
        (Path(cfg1.out) / name).read_bytes() == (Path(cfg8.out) / name).read_bytes()
        for name in ("records.csv", "curves.csv", "summary.csv", "tuned.csv")
    )

    catalog = fileio.read_catalog(data / "catalog.csv")
    train = fileio.read_features(data / "train.csv", catalog)
    fileio.write_features(tmp_path / "train2.csv", train, catalog)
    features_rt = (tmp_path / "train2.csv").read_bytes() == (data / "train.csv").read_bytes()
    matrix, _ = fileio.read_attribute_matrix(data / "attributes.csv")
    fileio.write_attribute_matrix(tmp_path / "attr2.csv", matrix, catalog)
    attrs_rt = (tmp_path / "attr2.csv").read_bytes() == (data / "attributes.csv").read_bytes()
    tree = fileio.import_hierarchy(data / "tree.json", catalog)
    fileio.export_hierarchy(tree, tmp_path / "tree2.json", catalog)
    tree_rt = (tmp_path / "tree2.json").read_bytes() == (data / "tree.json").read_bytes()

    ok = tables_equal and features_rt and attrs_rt and tree_rt
    report(10, ok,
           f"jobs 1 vs 8 byte-identical tables: {tables_equal}; round trips "
           f"features={features_rt} attributes={attrs_rt} hierarchy={tree_rt}")
