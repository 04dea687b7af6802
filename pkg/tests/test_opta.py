import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from otfs.errors import DegeneratePlanError, PreconditionError, SampleBiasError, ShapeError
from otfs.opta import (
    LogisticClassifier,
    NearestPrototype,
    OptaConfig,
    PrototypeSet,
    check_query_support_balance,
    class_prototypes,
    fit_logistic,
    opta_iterate,
    opta_pass,
    predict,
    transport_weights,
)
from otfs.ot import SinkhornConfig


def biased_episode(rng, n_cls=2, dim=8, sep=4.0, shift=1.0, shots=1, queries=15):
    """Classes far apart; supports from a population shifted by ``shift`` sigma."""
    centers = rng.normal(size=(n_cls, dim))
    centers *= sep / np.sqrt(2 * dim)
    direction = rng.normal(size=(n_cls, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    labels_s = np.repeat(np.arange(n_cls), shots)
    labels_q = np.repeat(np.arange(n_cls), queries)
    support = centers[labels_s] + shift * direction[labels_s] + rng.normal(size=(labels_s.size, dim))
    query = centers[labels_q] + rng.normal(size=(labels_q.size, dim))
    return centers, support, labels_s, query, labels_q


# class_prototypes


def test_prototype_examples():
    single = class_prototypes([[1.0, 2.0], [3.0, 4.0]], [7, 3])
    assert single.classes.tolist() == [3, 7]
    assert single.values.tolist() == [[3.0, 4.0], [1.0, 2.0]]
    pair = class_prototypes([[0.0, 0.0], [2.0, 2.0]], [1, 1])
    assert pair.values.tolist() == [[1.0, 1.0]]


def test_prototypes_order_independent():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(12, 3))
    y = np.repeat([0, 1, 2], 4)
    perm = rng.permutation(12)
    a, b = class_prototypes(x, y), class_prototypes(x[perm], y[perm])
    assert a.classes.tolist() == b.classes.tolist()
    np.testing.assert_allclose(a.values, b.values, atol=1e-15)


def test_prototype_errors():
    with pytest.raises(PreconditionError):
        class_prototypes(np.empty((0, 2)), [])
    with pytest.raises(ShapeError):
        class_prototypes(np.ones((3, 2)), [0, 1])


# opta_pass / iterate


def test_fixed_point_for_tight_groups():
    protos = PrototypeSet(np.array([[0.0, 0.0], [10.0, 0.0]]), np.array([0, 1]))
    jitter = 1e-4 * np.array([[1, 0], [-1, 0], [0, 1], [0, -1]])
    queries = np.vstack([protos.values[0] + jitter, protos.values[1] + jitter])
    cfg = OptaConfig(sinkhorn=SinkhornConfig(epsilon=1e-3))
    out = opta_pass(protos, queries, cfg)
    assert np.abs(out.values - protos.values).max() < 1e-3


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 5), st.integers(1, 4))
def test_convex_hull_membership(seed, n_cls, extra):
    rng = np.random.default_rng(seed)
    protos = PrototypeSet(rng.normal(size=(n_cls, 3)), np.arange(n_cls))
    queries = rng.normal(size=(n_cls + extra, 3)) * 3
    w = transport_weights(protos, queries)
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(opta_pass(protos, queries).values, w @ queries, atol=1e-12)


def test_literal_form_scales_by_query_ratio():
    rng = np.random.default_rng(2)
    protos = PrototypeSet(rng.normal(size=(3, 2)), np.arange(3))
    queries = rng.normal(size=(12, 2))
    literal = transport_weights(protos, queries, OptaConfig(barycentric=False))
    # each class column of a balanced plan carries mass NQ / N after row normalization
    np.testing.assert_allclose(literal.sum(axis=1), 12 / 3, rtol=1e-5)


def test_bias_reduced_on_two_class_episode():
    rng = np.random.default_rng(4)
    centers, support, ls, query, _ = biased_episode(rng, n_cls=2, dim=8, sep=8.0, shift=1.0, queries=40)
    raw = class_prototypes(support, ls)
    aligned = opta_pass(raw, query)
    before = np.linalg.norm(raw.values - centers, axis=1)
    after = np.linalg.norm(aligned.values - centers, axis=1)
    assert np.all(after < before)


def test_iterate_identity_and_composition():
    rng = np.random.default_rng(5)
    protos = PrototypeSet(rng.normal(size=(3, 4)), np.array([2, 5, 9]))
    queries = rng.normal(size=(15, 4))
    same = opta_iterate(protos, queries, OptaConfig(passes=0))
    assert same.values.tobytes() == protos.values.tobytes()
    assert same.classes.tolist() == [2, 5, 9]
    one = opta_iterate(protos, queries, OptaConfig(passes=1))
    np.testing.assert_array_equal(one.values, opta_pass(protos, queries).values)
    two = opta_iterate(protos, queries, OptaConfig(passes=2))
    np.testing.assert_array_equal(two.values, opta_pass(one, queries).values)
    five = opta_iterate(protos, queries, OptaConfig(passes=5))
    assert five.values.shape == (3, 4)
    with pytest.raises(ValueError):
        OptaConfig(passes=6)


def test_class_order_equivariance():
    rng = np.random.default_rng(6)
    values = rng.normal(size=(4, 3))
    queries = rng.normal(size=(20, 3))
    perm = np.array([2, 0, 3, 1])
    a = opta_pass(PrototypeSet(values, np.arange(4)), queries)
    b = opta_pass(PrototypeSet(values[perm], perm), queries)
    np.testing.assert_allclose(b.values, a.values[perm], atol=1e-10)


def test_pass_errors():
    protos = PrototypeSet(np.array([[0.0], [1.0]]), np.array([0, 1]))
    with pytest.raises(DegeneratePlanError):
        opta_pass(protos, np.ones((5, 1)))
    with pytest.raises(PreconditionError):
        opta_pass(protos, np.array([[0.0], [1.0]]))
    with pytest.raises(PreconditionError):
        opta_pass(PrototypeSet(np.zeros((1, 1)), np.array([0])), np.arange(4.0)[:, None])
    with pytest.raises(ShapeError):
        opta_pass(protos, np.ones((5, 2)))


def test_query_support_gate():
    check_query_support_balance(5, 75)
    with pytest.raises(SampleBiasError):
        check_query_support_balance(25, 25)


# classifiers


def test_logistic_separable_prototypes():
    protos = PrototypeSet(np.array([[3.0, 0.0], [-3.0, 0.0]]), np.array([4, 8]))
    clf = fit_logistic(protos)
    assert predict(clf, protos.values).tolist() == [4, 8]
    assert predict(clf, [[2.5, 0.3]]).tolist() == [4]


def test_logistic_is_deterministic():
    protos = PrototypeSet(np.random.default_rng(0).normal(size=(5, 6)), np.arange(5))
    a, b = fit_logistic(protos), fit_logistic(protos)
    assert a.weight.tobytes() == b.weight.tobytes() and a.bias.tobytes() == b.bias.tobytes()


def test_logistic_agrees_with_nearest_prototype():
    rng = np.random.default_rng(7)
    agree, total = 0, 0
    for _ in range(20):
        centers = rng.normal(size=(5, 16)) * 3.0
        protos = PrototypeSet(centers, np.arange(5))
        queries = centers[np.repeat(np.arange(5), 15)] + 0.3 * rng.normal(size=(75, 16))
        logistic = predict(fit_logistic(protos), queries)
        nearest = predict(NearestPrototype(protos), queries)
        agree += int(np.sum(logistic == nearest))
        total += 75
    assert agree / total >= 0.99


def test_logistic_rejects_bad_input():
    with pytest.raises(PreconditionError):
        fit_logistic(PrototypeSet(np.zeros((1, 2)), np.array([0])))
    with pytest.raises(ValueError):
        fit_logistic(PrototypeSet(np.array([[np.nan, 0.0], [1.0, 1.0]]), np.array([0, 1])))


def test_predict_tie_goes_to_lowest_class_index():
    clf = LogisticClassifier(np.zeros((2, 3)), np.zeros(3), np.array([1, 4, 6]))
    assert predict(clf, [[0.3, -0.2]]).tolist() == [1]
    nearest = NearestPrototype(PrototypeSet(np.array([[-1.0], [1.0]]), np.array([0, 1])))
    assert predict(nearest, [[0.0]]).tolist() == [0]
    assert predict(clf, np.zeros((7, 2))).shape == (7,)
    with pytest.raises(ShapeError):
        predict(clf, np.zeros((2, 5)))
