"""Competing attribution methods: l2 representer, l1 influence function,
TracInCP for matrix factorization, and random scores."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import InvalidInputError
from .losses import get_loss
from .representers import _as_row

logger = logging.getLogger(__name__)


def _theta_and_loss(model, loss):
    if hasattr(model, "theta"):
        return np.asarray(model.theta, dtype=np.float64), get_loss(loss or model.loss)
    if loss is None:
        raise InvalidInputError("a loss is required when passing a bare parameter vector")
    return np.asarray(model, dtype=np.float64), get_loss(loss)


def l2_representer(model, data, x_test, loss=None):
    """Scores ``-l'(y_i, <x_i, theta>) <x_i, x_test>`` for every training sample.

    ``model`` is a fitted model or a bare parameter vector (then ``loss`` is
    required).
    """
    theta, loss = _theta_and_loss(model, loss)
    if theta.size != data.dim:
        raise InvalidInputError(f"parameter dimension {theta.size} != data dimension {data.dim}")
    idx, val = _as_row(x_test, data.dim)
    xt = np.zeros(data.dim)
    xt[idx] = val
    return -loss.derivative(data.y, data.X @ theta) * (data.X @ xt)


@dataclass
class InfluenceWorkspace:
    """Support-restricted Hessian and its factorization for one model.

    ``hessian`` is ``sum_i l''_i x_i|S x_i|S^T`` (or its mean when
    ``self_consistent``), where ``S`` is the support of ``theta``.
    """

    support_indices: np.ndarray
    hessian: np.ndarray
    factorization: object
    damping: float
    grads: np.ndarray
    sign_term: np.ndarray
    dim: int

    @classmethod
    def build(cls, model, data, damping="auto", self_consistent=False):
        if model.theta.size != data.dim:
            raise InvalidInputError("model and data dimensions differ")
        loss, lam, n = model.loss, model.lam, data.n
        S = np.flatnonzero(model.theta)
        XS = data.X[:, S]
        t = data.X @ model.theta
        d1 = loss.derivative(data.y, t)
        d2 = loss.second_derivative(data.y, t)
        H = np.asarray((XS.T @ XS.multiply(d2[:, None])).todense()) if S.size else np.zeros((0, 0))
        H = 0.5 * (H + H.T)
        if self_consistent:
            H = H / n
        eps = 0.0
        fac = None
        if S.size:
            fac, eps = _factor(H, damping)
        # per-sample gradient rows (1/n) l'_i x_i|S, kept sparse
        grads = XS.multiply((d1 / n)[:, None]).tocsr()
        return cls(S, H, fac, eps, grads, lam * np.sign(model.theta[S]), data.dim)

    def scores(self, x_test):
        q = self.support_indices.size
        if q == 0:
            logger.warning("empty support: influence scores are all zero")
            return np.zeros(self.grads.shape[0])
        idx, val = _as_row(x_test, self.dim)
        xt = np.zeros(self.dim)
        xt[idx] = val
        xq = xt[self.support_indices]
        if not np.any(xq):
            return np.zeros(self.grads.shape[0])
        h = scipy.linalg.cho_solve(self.factorization, xq)
        return -(np.asarray(self.grads @ h).reshape(-1) + float(self.sign_term @ h))


def _factor(H, damping):
    q = H.shape[0]
    try:
        fac = scipy.linalg.cho_factor(H)
        # reject numerically singular factors
        diag = np.abs(np.diag(fac[0]))
        if diag.min() > 1e-7 * diag.max():
            return fac, 0.0
    except scipy.linalg.LinAlgError:
        pass
    if damping is None or damping == 0:
        raise InvalidInputError("support Hessian is singular; enable damping (e.g. damping='auto')")
    eps = 1e-8 * float(np.trace(H)) / q if damping == "auto" else float(damping)
    eps = max(eps, 1e-12)
    return scipy.linalg.cho_factor(H + eps * np.eye(q)), eps


def influence_l1(model, data, x_test, damping="auto", self_consistent=False, workspace=None):
    """Influence scores restricted to the nonzero coordinates of ``theta``.

    ``score_i = -((1/n) l'_i x_i|S + lam sign(theta)|S)^T H^{-1} x_test|S``
    with the summed Hessian ``H = sum_i l''_i x_i|S x_i|S^T``. Set
    ``self_consistent`` to average the Hessian over ``n`` instead. A singular
    ``H`` is ridge-damped by ``1e-8 trace(H)/q`` under ``damping="auto"`` and
    rejected when ``damping`` is ``None``.
    """
    ws = workspace or InfluenceWorkspace.build(model, data, damping, self_consistent)
    return ws.scores(x_test)


def tracin_cp(trace, loss, train, train_pt, test_pt):
    """TracInCP for matrix factorization with a prediction-score test gradient.

    Sums over checkpoints ``-lr_t l'(y_ij, <U_i, V_j>) <U_i, U_i'>`` when the
    item is shared and ``-lr_t l'(...) <V_j, V_j'>`` when the user is shared,
    on raw checkpoint embeddings. When both are shared (the test point is the
    training point) both terms add, as in the full gradient inner product.
    An empty trace scores 0.
    """
    loss = get_loss(loss)
    i, j = train_pt
    ip, jp = test_pt
    y = train.rating(i, j)
    if j != jp and i != ip:
        return 0.0
    total = 0.0
    for emb, lr in zip(trace.embeddings, trace.learning_rates):
        U, V = emb.user_mat, emb.item_mat
        g = -lr * float(loss.derivative(y, U[i] @ V[j]))
        if j == jp:
            total += g * float(U[i] @ U[ip])
        if i == ip:
            total += g * float(V[j] @ V[jp])
    return total


def tracin_cp_vector(trace, loss, train, test_pt):
    """TracInCP scores for every training interaction, aligned with ``train`` rows."""
    loss = get_loss(loss)
    ip, jp = test_pt
    out = np.zeros(len(train))
    same_item = np.flatnonzero(train.items == jp)
    same_user = np.flatnonzero(train.users == ip)
    for emb, lr in zip(trace.embeddings, trace.learning_rates):
        U, V = emb.user_mat, emb.item_mat
        for rows, local in (
            (same_item, U[train.users[same_item]] @ U[ip]),
            (same_user, V[train.items[same_user]] @ V[jp]),
        ):
            t = np.einsum("ij,ij->i", U[train.users[rows]], V[train.items[rows]])
            out[rows] += -lr * loss.derivative(train.ratings[rows], t) * local
    return out


def random_scores(n, seed=0):
    """i.i.d. uniform(-1, 1) scores."""
    if n < 0:
        raise InvalidInputError("n must be non-negative")
    return np.random.default_rng(seed).uniform(-1.0, 1.0, int(n))
