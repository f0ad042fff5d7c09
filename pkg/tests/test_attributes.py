import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hierzsl import (
    AttributeErrorModel,
    AttributeMatrix,
    DataFormatError,
    DirectAttributeClassifier,
    Posterior,
    class_likelihoods_ml,
    estimate_attribute_error_model,
    predict_attributes_indirect,
    rank_classes,
    rank_of_true,
)
from hierzsl.attributes import (
    AttributeEstimate,
    CONSTANT_FLOOR,
    expectation_confidences,
    indirect_expectations,
    ternarize,
)
from conftest import make_flat_catalog


def _attrs(rows):
    rows = np.asarray(rows, dtype=np.int8)
    return AttributeMatrix(values=rows, attribute_names=tuple(f"a{j}" for j in range(rows.shape[1])))


def brute_force_class_posterior(pred_values, attributes, error_model):
    """Enumerate every attribute outcome; pick the observed one per class."""
    n_a = attributes.n_attributes
    weights = []
    for row in attributes.values:
        total = 0.0
        for outcome in itertools.product((-1, 0, 1), repeat=n_a):
            if list(outcome) != list(pred_values):
                continue
            p = 1.0
            for j in range(n_a):
                p *= error_model.matrices[j][int(row[j]) + 1][outcome[j] + 1]
            total += p
        weights.append(total)
    weights = np.array(weights)
    return weights / weights.sum()


def near_identity_error_model(n_attributes, eps=1e-3):
    m = np.full((n_attributes, 3, 3), eps)
    for j in range(n_attributes):
        np.fill_diagonal(m[j], 1.0 - 2.0 * eps)
    return AttributeErrorModel(m).check()


# -- direct bank ------------------------------------------------------------------


def _tiny_separable(seed=0, sigma=0.0):
    attrs = _attrs([
        [1, -1, 0],
        [1, 1, -1],
        [-1, 1, 1],
        [-1, -1, 1],
    ])
    rng = np.random.default_rng(seed)
    protos = rng.normal(size=(4, 6)) * 3.0
    X = np.vstack([protos[c] + sigma * rng.normal(size=(12, 6)) for c in range(4)])
    y = np.repeat(np.arange(4), 12)
    return attrs, protos, X, y


def test_direct_bank_perfect_on_separable():
    attrs, protos, X, y = _tiny_separable()
    bank = DirectAttributeClassifier(seed=5).fit(X, y, attrs)
    values = bank.predict_values(X)
    assert np.array_equal(values, attrs.values[y])


def test_direct_prediction_at_prototype_matches_row():
    attrs, protos, X, y = _tiny_separable()
    bank = DirectAttributeClassifier(seed=5).fit(X, y, attrs)
    est = bank.estimate(protos[1])
    est.check()
    assert np.array_equal(est.values, attrs.values[1])


def test_direct_bank_constant_attribute():
    attrs = _attrs([
        [1, 1],
        [1, -1],
        [1, 0],
    ])
    rng = np.random.default_rng(3)
    X = np.vstack([np.array([c * 4.0, -c * 2.0]) + 0.05 * rng.normal(size=(8, 2)) for c in range(3)])
    y = np.repeat(np.arange(3), 8)
    bank = DirectAttributeClassifier(seed=1).fit(X, y, attrs)
    conf = bank.predict_confidences(X[:1])[0]
    assert np.allclose(conf[0], [CONSTANT_FLOOR, CONSTANT_FLOOR, 1.0 - 2.0 * CONSTANT_FLOOR])
    assert any("constant attribute" in line for line in bank.report_)


def test_direct_bank_deterministic():
    attrs, protos, X, y = _tiny_separable()
    b1 = DirectAttributeClassifier(seed=9).fit(X, y, attrs)
    b2 = DirectAttributeClassifier(seed=9).fit(X, y, attrs)
    probe = np.random.default_rng(0).normal(size=(5, 6))
    assert np.array_equal(b1.predict_confidences(probe), b2.predict_confidences(probe))


def test_direct_bank_dimension_mismatch():
    attrs, protos, X, y = _tiny_separable()
    bank = DirectAttributeClassifier(seed=5).fit(X, y, attrs)
    with pytest.raises(DataFormatError):
        bank.predict_values(np.zeros((2, 9)))


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=1000))
def test_direct_confidences_sum_to_one(seed):
    attrs, protos, X, y = _tiny_separable()
    bank = DirectAttributeClassifier(seed=5).fit(X, y, attrs)
    x = np.random.default_rng(seed).normal(size=(1, 6)) * 4
    conf = bank.predict_confidences(x)[0]
    assert np.all(np.abs(conf.sum(axis=1) - 1.0) <= 1e-9)


def test_confidence_triples_already_normalized_pass_through():
    # constant slots forming a normalized triple come back unchanged
    bank = DirectAttributeClassifier()
    bank.n_features_in_ = 2
    bank.n_attributes_ = 1
    bank.bank_ = [{-1: ("const", 0.2), 0: ("const", 0.2), 1: ("const", 0.6)}]
    conf = bank.predict_confidences(np.zeros((1, 2)))[0]
    assert np.allclose(conf[0], [0.2, 0.2, 0.6])


# -- indirect route ------------------------------------------------------------------


def test_indirect_one_hot_reproduces_row():
    attrs = _attrs([[1, 0, -1], [-1, 1, 0]])
    post = Posterior(np.array([0, 1]), np.array([1.0, 0.0]))
    est = predict_attributes_indirect(post, attrs, tau=0.9)
    assert np.array_equal(est.values, attrs.values[0])


def test_indirect_uniform_over_opposed_values_is_neutral():
    attrs = _attrs([[1, 1], [-1, -1]])
    post = Posterior(np.array([0, 1]), np.array([0.5, 0.5]))
    est = predict_attributes_indirect(post, attrs)
    assert np.array_equal(est.values, [0, 0])


def test_indirect_frozen_expectation():
    # 0.8 * (+1) + 0.2 * (-1) = 0.6 >= 1/3 -> +1
    attrs = _attrs([[1], [-1]])
    post = Posterior(np.array([0, 1]), np.array([0.8, 0.2]))
    est = predict_attributes_indirect(post, attrs, tau=1.0 / 3.0)
    assert est.values[0] == 1
    e = indirect_expectations(post.probabilities[None, :], attrs.values.astype(float))[0, 0]
    assert abs(e - 0.6) < 1e-12


def test_indirect_threshold_validation():
    attrs = _attrs([[1], [-1]])
    post = Posterior(np.array([0, 1]), np.array([0.5, 0.5]))
    for bad in (0.0, 1.0, -0.2, 1.7):
        with pytest.raises(DataFormatError):
            predict_attributes_indirect(post, attrs, tau=bad)


def test_indirect_rejects_novel_posterior_when_catalog_given():
    attrs = _attrs([[1], [-1]])
    catalog = make_flat_catalog(2, novel=(1,))
    post = Posterior(np.array([0, 1]), np.array([0.5, 0.5]))
    with pytest.raises(DataFormatError):
        predict_attributes_indirect(post, attrs, catalog=catalog)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(min_value=0.001, max_value=1.0), min_size=3, max_size=3))
def test_indirect_expectation_bounded(weights):
    attrs = _attrs([[1, -1], [0, 1], [-1, 0]])
    probs = np.array(weights) / np.sum(weights)
    e = indirect_expectations(probs[None, :], attrs.values.astype(float))
    assert np.all(e >= -1.0 - 1e-12) and np.all(e <= 1.0 + 1e-12)


def test_expectation_confidences_argmax_flips_at_threshold():
    tau = 1.0 / 3.0
    for e, expected in ((0.0, 0), (0.2, 0), (0.34, 1), (0.9, 1), (-0.34, -1), (-1.0, -1)):
        triples = expectation_confidences(np.array([e]), tau)[0]
        value = ternarize(np.array([e]), tau)[0]
        assert value == expected
        AttributeEstimate(values=np.array([value]), confidences=triples[None, :]).check()
    # endpoints are pure
    assert np.allclose(expectation_confidences(np.array([1.0]), tau)[0], [0, 0, 1])
    assert np.allclose(expectation_confidences(np.array([0.0]), tau)[0], [0, 1, 0])
    assert np.allclose(expectation_confidences(np.array([-1.0]), tau)[0], [1, 0, 0])


@settings(max_examples=200, deadline=None)
@given(
    st.floats(min_value=-1.0, max_value=1.0, allow_nan=False),
    st.floats(min_value=0.01, max_value=0.99, allow_nan=False),
)
def test_expectation_confidences_consistent_for_any_threshold(e, tau):
    triples = expectation_confidences(np.array([e]), tau)
    values = ternarize(np.array([e]), tau)
    est = AttributeEstimate(values=values, confidences=triples).check()
    assert abs(est.confidences.sum() - 1.0) <= 1e-9


def test_expectation_confidences_tie_at_exact_threshold():
    tau = 1.0 / 3.0
    triples = expectation_confidences(np.array([tau]), tau)[0]
    value = ternarize(np.array([tau]), tau)[0]
    assert value == 1
    # the ternary value attains the (tied) maximum
    AttributeEstimate(values=np.array([value]), confidences=triples[None, :]).check()


# -- error model ------------------------------------------------------------------------


def test_error_model_counts_with_smoothing():
    attrs = _attrs([[1]])
    pred = np.ones((30, 1), dtype=int)
    model = estimate_attribute_error_model(pred, np.zeros(30, dtype=int), attrs)
    assert np.allclose(model.matrices[0][2], [1 / 33, 1 / 33, 31 / 33])


def test_error_model_unobserved_row_uniform():
    attrs = _attrs([[1]])
    pred = np.ones((30, 1), dtype=int)
    model = estimate_attribute_error_model(pred, np.zeros(30, dtype=int), attrs)
    assert np.allclose(model.matrices[0][0], [1 / 3, 1 / 3, 1 / 3])
    assert np.allclose(model.matrices[0][1], [1 / 3, 1 / 3, 1 / 3])


def test_error_model_rows_sum_to_one():
    rng = np.random.default_rng(2)
    attrs = _attrs(rng.integers(-1, 2, size=(5, 7)))
    pred = rng.integers(-1, 2, size=(40, 7))
    truth = rng.integers(0, 5, size=40)
    model = estimate_attribute_error_model(pred, truth, attrs)
    assert np.all(np.abs(model.matrices.sum(axis=2) - 1.0) <= 1e-9)
    assert np.all(model.matrices > 0)


# -- maximum-likelihood class posterior ---------------------------------------------------


def test_ml_posterior_matches_brute_force_enumeration():
    rng = np.random.default_rng(4)
    for _ in range(25):
        k = int(rng.integers(2, 5))
        n_a = int(rng.integers(1, 5))
        attrs = _attrs(rng.integers(-1, 2, size=(k, n_a)))
        m = rng.random((n_a, 3, 3)) + 0.05
        m /= m.sum(axis=2, keepdims=True)
        error_model = AttributeErrorModel(m).check()
        pred = rng.integers(-1, 2, size=n_a)
        post = class_likelihoods_ml(pred, attrs, error_model)
        oracle = brute_force_class_posterior(pred, attrs, error_model)
        assert np.allclose(post.probabilities, oracle, rtol=1e-12, atol=0)


def test_ml_posterior_concentrates_with_near_identity_errors():
    attrs = _attrs([
        [1, -1, 0, 1],
        [1, 1, 0, -1],
        [-1, 1, 1, -1],
    ])
    eps = 1e-3
    error_model = near_identity_error_model(4, eps)
    post = class_likelihoods_ml(attrs.values[0], attrs, error_model)
    assert post.class_indices[np.argmax(post.probabilities)] == 0
    # each mismatched attribute costs at least a (1-2eps)/eps factor
    p = post.probabilities
    assert p[0] / p[1] >= ((1 - 2 * eps) / eps) ** 0.9
    assert abs(p.sum() - 1.0) <= 1e-9


def test_ml_posterior_uniform_error_model_is_uniform():
    attrs = _attrs([[1, 0], [-1, 1], [0, 0]])
    uniform = AttributeErrorModel(np.full((2, 3, 3), 1.0 / 3.0)).check()
    post = class_likelihoods_ml(np.array([1, -1]), attrs, uniform)
    assert np.allclose(post.probabilities, 1.0 / 3.0)


def test_ml_posterior_identical_rows_equal_mass():
    attrs = _attrs([[1, 0], [1, 0], [-1, 1]])
    error_model = near_identity_error_model(2)
    post = class_likelihoods_ml(np.array([1, 0]), attrs, error_model)
    assert abs(post.probabilities[0] - post.probabilities[1]) <= 1e-15


def test_ml_posterior_log_space_equals_direct_product():
    rng = np.random.default_rng(8)
    for _ in range(10):
        k, n_a = 5, 20
        attrs = _attrs(rng.integers(-1, 2, size=(k, n_a)))
        m = rng.random((n_a, 3, 3)) + 0.02
        m /= m.sum(axis=2, keepdims=True)
        error_model = AttributeErrorModel(m).check()
        pred = rng.integers(-1, 2, size=n_a)
        post = class_likelihoods_ml(pred, attrs, error_model)
        direct = np.array([
            np.prod([m[j][int(attrs.values[i, j]) + 1][int(pred[j]) + 1] for j in range(n_a)])
            for i in range(k)
        ])
        direct /= direct.sum()
        assert np.allclose(post.probabilities, direct, rtol=1e-12, atol=0)


def test_ml_posterior_invariant_to_attribute_permutation():
    rng = np.random.default_rng(12)
    k, n_a = 4, 6
    attrs = _attrs(rng.integers(-1, 2, size=(k, n_a)))
    m = rng.random((n_a, 3, 3)) + 0.05
    m /= m.sum(axis=2, keepdims=True)
    error_model = AttributeErrorModel(m).check()
    pred = rng.integers(-1, 2, size=n_a)
    base = class_likelihoods_ml(pred, attrs, error_model)
    perm = rng.permutation(n_a)
    attrs_p = AttributeMatrix(values=attrs.values[:, perm],
                              attribute_names=tuple(attrs.attribute_names[j] for j in perm))
    error_p = AttributeErrorModel(m[perm])
    shuffled = class_likelihoods_ml(pred[perm], attrs_p, error_p)
    assert np.allclose(base.probabilities, shuffled.probabilities, rtol=1e-12)


# -- ranking --------------------------------------------------------------------------------


def test_rank_classes_orders_descending():
    post = Posterior(np.array([0, 1, 2]), np.array([0.7, 0.2, 0.1]))
    assert list(rank_classes(post)) == [0, 1, 2]
    assert rank_of_true(post, 2) == 3


def test_rank_classes_tie_prefers_lower_index():
    post = Posterior(np.array([3, 5]), np.array([0.5, 0.5]))
    assert list(rank_classes(post)) == [3, 5]
    assert rank_of_true(post, 3) == 1
    assert rank_of_true(post, 5) == 2


def test_rank_of_true_missing_class():
    post = Posterior(np.array([0, 1]), np.array([0.5, 0.5]))
    with pytest.raises(DataFormatError):
        rank_of_true(post, 4)
