import numpy as np
import pytest

from hidrep.datasets import InteractionSet, LabeledDataset
from hidrep.losses import SQUARED
from hidrep.solvers import fit_l1


def random_interactions(rng, n_users, n_items, count, ratings=None):
    keys = rng.choice(n_users * n_items, size=count, replace=False)
    r = rng.normal(size=count) if ratings is None else ratings
    return InteractionSet(n_users, n_items, keys // n_items, keys % n_items, r)


def sparse_logistic_problem(seed, n=500, p=200, support=10, n_test=200):
    """Dense Gaussian design with a ``support``-sparse logistic truth."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n + n_test, p))
    theta = np.zeros(p)
    theta[rng.choice(p, support, replace=False)] = 2.0 * rng.normal(size=support)
    y = np.where(rng.random(n + n_test) < 1.0 / (1.0 + np.exp(-X @ theta)), 1.0, -1.0)
    return LabeledDataset.from_dense(X[:n], y[:n]), LabeledDataset.from_dense(X[n:], y[n:])


@pytest.fixture
def orthogonal_design():
    """x1=e1, y1=1; x2=e2, y2=0.5; squared loss, lambda=0.1 -> theta=(0.8, 0.3)."""
    data = LabeledDataset.from_dense(np.eye(2), np.array([1.0, 0.5]))
    model = fit_l1(data, SQUARED, 0.1, tol=1e-12)
    return data, model
