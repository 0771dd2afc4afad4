import numpy as np
import pytest

from hidrep.baselines import InfluenceWorkspace, influence_l1, l2_representer, random_scores, tracin_cp, tracin_cp_vector
from hidrep.datasets import EmbeddingPair, InteractionSet, LabeledDataset
from hidrep.errors import InvalidInputError
from hidrep.linalg import SparseVector
from hidrep.losses import LOGISTIC, SQUARED
from hidrep.models import CheckpointTrace, L1LinearModel
from hidrep.representers import NormalizedEmbeddings, cf_importance
from hidrep.solvers import fit_l1

from conftest import random_interactions


def test_l2_orthogonal_test_point():
    data = LabeledDataset.from_dense(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), np.array([1.0, -1.0]))
    scores = l2_representer(np.array([0.3, 0.2, 0.0]), data, SparseVector.from_dict({2: 1.0}, 3), SQUARED)
    assert np.all(scores == 0.0)


def test_l2_zero_derivative():
    data = LabeledDataset.from_dense(np.eye(2), np.array([0.5, -1.0]))
    scores = l2_representer(np.array([0.5, -1.0]), data, SparseVector.from_dense([1.0, 1.0]), SQUARED)
    assert np.all(scores == 0.0)


def test_l2_orthogonal_design(orthogonal_design):
    data, model = orthogonal_design
    np.testing.assert_allclose(l2_representer(model, data, SparseVector.from_dense([1.0, 1.0])), [0.2, 0.2],
                               atol=1e-9)


def test_l2_bare_vector_needs_loss(orthogonal_design):
    data, _ = orthogonal_design
    with pytest.raises(InvalidInputError):
        l2_representer(np.zeros(2), data, SparseVector.from_dense([1.0, 1.0]))


def test_influence_zero_on_support():
    rng = np.random.default_rng(0)
    data = LabeledDataset.from_dense(rng.normal(size=(6, 3)), rng.normal(size=6))
    model = L1LinearModel(np.array([0.7, 0.0, 0.0]), 0.1, SQUARED, 0.0)
    assert np.all(influence_l1(model, data, SparseVector.from_dict({1: 1.0, 2: 3.0}, 3)) == 0.0)


def test_influence_single_feature_hand_value():
    data = LabeledDataset.from_dense(np.array([[1.0]]), np.array([1.0]))
    lam, theta, xp = 0.1, 0.5, 2.0
    model = L1LinearModel(np.array([theta]), lam, SQUARED, 0.0)
    l1 = theta - 1.0  # squared-loss derivative; H = l'' x^2 = 1
    expected = -((1.0 / 1.0) * l1 * 1.0 + lam * np.sign(theta)) * (1.0 / 1.0) * xp
    np.testing.assert_allclose(influence_l1(model, data, SparseVector.from_dense([xp])), [expected])


def test_influence_single_feature_at_optimum_is_zero():
    data = LabeledDataset.from_dense(np.array([[1.0]]), np.array([1.0]))
    model = fit_l1(data, SQUARED, 0.1, tol=1e-12)
    np.testing.assert_allclose(influence_l1(model, data, SparseVector.from_dense([1.0])), [0.0], atol=1e-10)


def test_influence_self_consistent_scales_by_n():
    rng = np.random.default_rng(1)
    data = LabeledDataset.from_dense(rng.normal(size=(30, 4)), np.sign(rng.normal(size=30)))
    model = fit_l1(data, LOGISTIC, 0.01)
    x = SparseVector.from_dense(rng.normal(size=4))
    a = influence_l1(model, data, x)
    b = influence_l1(model, data, x, self_consistent=True)
    np.testing.assert_allclose(b, data.n * a, rtol=1e-9)


def test_influence_singular_hessian_requires_damping():
    # duplicated feature columns make the support Hessian singular
    X = np.array([[1.0, 1.0], [2.0, 2.0], [-1.0, -1.0]])
    data = LabeledDataset.from_dense(X, np.array([1.0, 2.0, -1.0]))
    model = L1LinearModel(np.array([0.4, 0.4]), 0.01, SQUARED, 0.0)
    with pytest.raises(InvalidInputError):
        InfluenceWorkspace.build(model, data, damping=None)
    ws = InfluenceWorkspace.build(model, data, damping="auto")
    assert ws.damping > 0
    assert np.all(np.isfinite(ws.scores(SparseVector.from_dense([1.0, 0.0]))))


def _instance(rng):
    train = random_interactions(rng, 4, 4, 8)
    pair = EmbeddingPair(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)))
    return train, pair


def test_tracin_empty_trace():
    train, _ = _instance(np.random.default_rng(2))
    pt = (int(train.users[0]), int(train.items[0]))
    assert tracin_cp(CheckpointTrace((), ()), SQUARED, train, pt, pt) == 0.0


def test_tracin_zero_learning_rates():
    train, pair = _instance(np.random.default_rng(3))
    trace = CheckpointTrace((pair, pair), (0.0, 0.0))
    pt = (int(train.users[0]), int(train.items[0]))
    assert tracin_cp(trace, SQUARED, train, pt, (pt[0], (pt[1] + 1) % 4)) == 0.0


def test_tracin_single_checkpoint_equals_raw_representer():
    rng = np.random.default_rng(4)
    train, pair = _instance(rng)
    trace = CheckpointTrace((pair,), (1.0,))
    raw = NormalizedEmbeddings(pair.user_mat, pair.item_mat, np.ones(3))
    for r in range(len(train)):
        tr = (int(train.users[r]), int(train.items[r]))
        for test in [(tr[0], 3), (2, tr[1]), (1, 1), tr]:
            expected = cf_importance(raw, SQUARED, train, tr, test)
            expected = sum(expected) if isinstance(expected, tuple) else expected
            assert tracin_cp(trace, SQUARED, train, tr, test) == pytest.approx(expected, abs=1e-12)


def test_tracin_vector_matches_scalar():
    rng = np.random.default_rng(5)
    train, pair = _instance(rng)
    trace = CheckpointTrace((pair, EmbeddingPair(pair.user_mat * 0.5, pair.item_mat)), (0.1, 0.2))
    test = (int(train.users[0]), int(train.items[0]))
    vec = tracin_cp_vector(trace, SQUARED, train, test)
    scal = [tracin_cp(trace, SQUARED, train, (int(u), int(i)), test) for u, i in zip(train.users, train.items)]
    np.testing.assert_allclose(vec, scal, atol=1e-14)


def test_random_scores_deterministic():
    np.testing.assert_array_equal(random_scores(10, 3), random_scores(10, 3))


def test_random_scores_empty():
    assert random_scores(0, 1).size == 0


def test_random_scores_centered():
    assert abs(random_scores(10_000, 0).mean()) <= 0.05
