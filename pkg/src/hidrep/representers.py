"""High-dimensional representer attributions.

Every attribution splits into a *global* factor, ``-(1/(n lam)) l'(y_i, f(x_i))``,
and a *local* factor, an inner product between the training and test inputs
after both are projected onto the model's low-dimensional subspace:

* l1 models project with ``sqrt(|theta|) * x``;
* nuclear-norm models project columns with ``sqrt(S) U^T X`` or rows with
  ``X V sqrt(S)``;
* factorization models use normalized embeddings ``U sqrt(S)``, ``V sqrt(S)``
  of the SVD of ``U_hat V_hat^T``.

At an exact minimizer the importances over all training points sum to the
model's prediction at the test point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import InvalidInputError
from .linalg import DEFAULT_RANK_TOL, SparseVector, SvdTriple, randomized_svd, thin_svd
from .losses import get_loss

SIDES = ("na", "user", "item", "column", "row", "average")


@dataclass(frozen=True)
class AttributionRecord:
    """Importance of one training point for one test point.

    ``train_ref`` is a sample index or a ``(user, item)`` pair.
    """

    train_ref: object
    global_score: float
    local_score: float
    importance: float
    side: str = "na"

    @classmethod
    def make(cls, train_ref, global_score, local_score, side="na"):
        g, l = float(global_score), float(local_score)
        return cls(train_ref, g, l, g * l, side)


def _ref_key(ref):
    return ref if isinstance(ref, tuple) else (ref,)


def sort_records(records):
    """Order by |importance| descending, then ascending train reference and side."""
    return sorted(records, key=lambda r: (-abs(r.importance), _ref_key(r.train_ref), SIDES.index(r.side)))


# --------------------------------------------------------------------------
# projectors
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SubspaceProjector:
    """Square root of the subgradient inverse map for a fitted model.

    ``kind`` is ``"sparse"`` (``weights = sqrt(|theta|)``),
    ``"column"`` (``P = sqrt(S) U^T``) or ``"row"`` (``P = V sqrt(S)``).
    """

    kind: str
    weights: np.ndarray | None = None
    svd: SvdTriple | None = None

    @classmethod
    def sparse(cls, theta):
        return cls("sparse", weights=np.sqrt(np.abs(np.asarray(theta, dtype=np.float64))))

    @classmethod
    def lowrank(cls, svd, side):
        if side not in ("column", "row"):
            raise InvalidInputError(f"low-rank side must be 'column' or 'row', got {side!r}")
        return cls(side, svd=svd)

    def project(self, x):
        """Project a sample (SparseVector / vector for sparse, matrix otherwise)."""
        if self.kind == "sparse":
            if isinstance(x, SparseVector):
                if x.dim != self.weights.size:
                    raise InvalidInputError(f"dimension mismatch: {x.dim} vs {self.weights.size}")
                return SparseVector(x.dim, x.indices, x.values * self.weights[x.indices])
            x = np.asarray(x, dtype=np.float64)
            if x.shape[-1] != self.weights.size:
                raise InvalidInputError("dimension mismatch")
            return x * self.weights
        rs = np.sqrt(self.svd.S)
        X = np.asarray(x, dtype=np.float64)
        if self.kind == "column":
            return rs[:, None] * (self.svd.U.T @ X)
        return (X @ self.svd.V) * rs


# --------------------------------------------------------------------------
# l1-regularized linear models
# --------------------------------------------------------------------------


def _as_row(x_test, p):
    if isinstance(x_test, SparseVector):
        if x_test.dim != p:
            raise InvalidInputError(f"test dimension {x_test.dim} != model dimension {p}")
        return x_test.indices, x_test.values
    x = np.asarray(x_test, dtype=np.float64).reshape(-1)
    if x.size != p:
        raise InvalidInputError(f"test dimension {x.size} != model dimension {p}")
    nz = np.flatnonzero(x)
    return nz, x[nz]


def l1_global(model, data):
    """Global importances ``alpha_i = -(1/(n lam)) l'(y_i, <x_i, theta>)``."""
    if data.dim != model.theta.size:
        raise InvalidInputError(f"model dimension {model.theta.size} != data dimension {data.dim}")
    t = data.X @ model.theta
    return -model.loss.derivative(data.y, t) / (data.n * model.lam)


class L1Explainer:
    """Precomputed state for repeated l1 attributions against one model.

    Construction computes every global importance and the projected training
    matrix (restricted to the support); each query is then a single sparse
    matrix-vector product.
    """

    def __init__(self, model, data):
        self.model = model
        self.data = data
        self.alpha = l1_global(model, data)
        self.projector = SubspaceProjector.sparse(model.theta)
        self.support = model.support
        w = self.projector.weights[self.support]
        self._proj = (data.X[:, self.support] @ sp.diags(w)).tocsr()
        # position of each coordinate inside the support, -1 if absent
        self._slot = np.full(model.theta.size, -1, dtype=np.int64)
        self._slot[self.support] = np.arange(self.support.size)

    def local(self, x_test):
        idx, val = _as_row(x_test, self.model.theta.size)
        slot = self._slot[idx]
        on = slot >= 0
        q = np.zeros(self.support.size)
        q[slot[on]] = val[on] * self.projector.weights[idx[on]]
        return self._proj @ q

    def importances(self, x_test):
        """Importance array aligned with the training samples."""
        return self.alpha * self.local(x_test)

    def explain(self, x_test):
        loc = self.local(x_test)
        return [AttributionRecord.make(i, a, l) for i, (a, l) in enumerate(zip(self.alpha, loc))]


def l1_attribute(model, data, x_test):
    """Representer records for every training sample, in dataset order."""
    return L1Explainer(model, data).explain(x_test)


# --------------------------------------------------------------------------
# nuclear-norm models
# --------------------------------------------------------------------------


def _completion_local(svd, users, items, x_test, side):
    """Local scores for indicator samples ``e_u e_i^T`` against ``x_test``."""
    U, S, V = svd.U, svd.S, svd.V
    if isinstance(x_test, tuple):
        ti, tj = x_test
        if not (0 <= ti < U.shape[0] and 0 <= tj < V.shape[0]):
            raise InvalidInputError(f"test entry {x_test} outside {svd.shape}")
        col = np.where(items == tj, (U[users] * S) @ U[ti], 0.0)
        row = np.where(users == ti, (V[items] * S) @ V[tj], 0.0)
    else:
        Xp = np.asarray(x_test, dtype=np.float64)
        if Xp.shape != svd.shape:
            raise InvalidInputError(f"test matrix shape {Xp.shape} != model shape {svd.shape}")
        col = np.einsum("ij,ij->i", U[users] * S, (U.T @ Xp).T[items])
        row = np.einsum("ij,ij->i", (Xp @ V)[users] * S, V[items])
    if side == "column":
        return col
    if side == "row":
        return row
    return 0.5 * (col + row)


def nuclear_attribute(model, x_test, side="column", samples=None, labels=None):
    """Representer records for a nuclear-norm regularized model.

    With ``samples`` omitted the model is a completion model and its
    observed entries are the training samples; ``x_test`` is then either a
    ``(row, col)`` entry or a full test matrix. Otherwise ``samples`` is an
    ``(n, d1, d2)`` stack of general input matrices with real ``labels``.

    ``side`` selects the column-space, row-space or averaged local score.
    """
    if side not in ("column", "row", "average"):
        raise InvalidInputError(f"side must be column, row or average, got {side!r}")
    svd, lam, loss = model.svd, model.lam, get_loss(model.loss)
    if samples is None:
        obs = model.observed
        if obs is None:
            raise InvalidInputError("model carries no observed entries; pass samples and labels")
        if (obs.n_users, obs.n_items) != svd.shape:
            raise InvalidInputError("observed id space does not match the model shape")
        t = model.predict(obs.users, obs.items)
        glob = -loss.derivative(obs.ratings, t) / (len(obs) * lam)
        loc = _completion_local(svd, obs.users, obs.items, x_test, side)
        refs = list(zip(obs.users.tolist(), obs.items.tolist()))
    else:
        Xs = np.asarray(samples, dtype=np.float64)
        y = np.asarray(labels, dtype=np.float64).reshape(-1)
        if Xs.ndim != 3 or Xs.shape[1:] != svd.shape:
            raise InvalidInputError(f"samples must have shape (n, {svd.shape[0]}, {svd.shape[1]})")
        if y.size != Xs.shape[0]:
            raise InvalidInputError("one label per sample is required")
        Xp = np.asarray(x_test, dtype=np.float64)
        if Xp.shape != svd.shape:
            raise InvalidInputError(f"test matrix shape {Xp.shape} != model shape {svd.shape}")
        theta = svd.reconstruct()
        t = np.einsum("nij,ij->n", Xs, theta)
        glob = -loss.derivative(y, t) / (Xs.shape[0] * lam)
        rs = np.sqrt(svd.S)
        col = np.einsum("nkj,kj->n", rs[None, :, None] * np.einsum("ik,nij->nkj", svd.U, Xs),
                        rs[:, None] * (svd.U.T @ Xp))
        row = np.einsum("nik,ik->n", np.einsum("nij,jk->nik", Xs, svd.V) * rs, (Xp @ svd.V) * rs)
        loc = {"column": col, "row": row, "average": 0.5 * (col + row)}[side]
        refs = list(range(Xs.shape[0]))
    return [AttributionRecord.make(r, g, l, side) for r, g, l in zip(refs, glob, loc)]


# --------------------------------------------------------------------------
# collaborative filtering
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class NormalizedEmbeddings:
    """``u_tilde = U sqrt(S)``, ``v_tilde = V sqrt(S)`` for ``U S V^T = U_hat V_hat^T``."""

    u_tilde: np.ndarray
    v_tilde: np.ndarray
    sigma: np.ndarray

    @property
    def rank(self):
        return int(self.sigma.size)

    def predict(self, users, items):
        return np.einsum("ij,ij->i", self.u_tilde[users], self.v_tilde[items])


def normalized_from_svd(svd):
    rs = np.sqrt(svd.S)
    return NormalizedEmbeddings(svd.U * rs, svd.V * rs, svd.S.copy())


def _svd(M, method, seed):
    if method == "exact":
        return thin_svd(M, rank_tol=0.0)
    if method == "randomized":
        k = min(M.shape)
        return randomized_svd(M, k, seed=seed)
    raise InvalidInputError(f"unknown SVD method {method!r}")


def normalize_factors(pair, method="exact", seed=0, rank_tol=DEFAULT_RANK_TOL):
    """Normalized embeddings without forming ``U_hat V_hat^T``.

    Factor ``U_hat = U1 S1 V1^T`` and ``V_hat^T = U2 S2 V2^T``, take the SVD
    ``U3 S3 V3^T`` of the k x k core ``S1 V1^T U2 S2``; then
    ``U_hat V_hat^T = (U1 U3) S3 (V2 V3)^T`` and the result is
    ``u_tilde = U1 U3 sqrt(S3)``, ``v_tilde = V2 V3 sqrt(S3)``. Directions with
    ``S3 <= rank_tol * max(S3)`` are dropped. Cost is
    O(max(|users|, |items|) k^2).
    """
    if pair.normalized:
        raise InvalidInputError("embedding pair is already normalized")
    Uh, Vh = pair.user_mat, pair.item_mat
    m, n = Uh.shape[0], Vh.shape[0]
    if pair.k < 1:
        raise InvalidInputError("embedding dimension must be at least 1")
    if m == 0 or n == 0:
        return NormalizedEmbeddings(np.zeros((m, 0)), np.zeros((n, 0)), np.zeros(0))
    left = _svd(Uh, method, seed)
    right = _svd(Vh.T, method, seed)
    U1, V2 = left.U, right.V
    core = (left.S[:, None] * left.V.T) @ (right.U * right.S)
    core_svd = thin_svd(core, rank_tol=0.0)
    S3 = core_svd.S
    smax = S3[0] if S3.size else 0.0
    keep = S3 > rank_tol * smax if smax > 0 else np.zeros(S3.size, dtype=bool)
    U3, S3, V3 = core_svd.U[:, keep], S3[keep], core_svd.V[:, keep]
    rs = np.sqrt(S3)
    return NormalizedEmbeddings((U1 @ U3) * rs, (V2 @ V3) * rs, S3)


def _scale(scale):
    return 1.0 if scale is None else float(scale)


def cf_importance(norm, loss, train, train_pt, test_pt, scale=None):
    """Importance of training interaction ``train_pt`` for ``test_pt``.

    Shares the item: ``-s l'(y_ij, <u_i, v_j>) <u_i, u_i'>``; shares the user:
    ``-s l'(...) <v_j, v_j'>``; shares neither: 0. When the two points
    coincide both branches apply and ``(user_side, item_side)`` is returned.
    ``s`` is ``scale`` (e.g. ``1 / (lam |D|)``) or 1 when omitted.
    """
    loss = get_loss(loss)
    i, j = train_pt
    ip, jp = test_pt
    y = train.rating(i, j)
    Ut, Vt = norm.u_tilde, norm.v_tilde
    glob = -_scale(scale) * float(loss.derivative(y, Ut[i] @ Vt[j]))
    user_side = glob * float(Ut[i] @ Ut[ip]) if j == jp else None
    item_side = glob * float(Vt[j] @ Vt[jp]) if i == ip else None
    if user_side is not None and item_side is not None:
        return user_side, item_side
    if user_side is not None:
        return user_side
    if item_side is not None:
        return item_side
    return 0.0


class CFExplainer:
    """Per-query explanations for a factorization model.

    Construction caches ``l'`` for every training interaction and groups the
    interactions by user and by item, so explaining ``(i', j')`` touches only
    the interactions sharing that user or item: O(n' k) per query.
    """

    def __init__(self, norm, loss, train, scale=None):
        self.norm = norm
        self.loss = get_loss(loss)
        self.train = train
        self.scale = _scale(scale)
        t = norm.predict(train.users, train.items)
        self.glob = -self.scale * self.loss.derivative(train.ratings, t)
        self._by_user = _group(train.users, train.n_users)
        self._by_item = _group(train.items, train.n_items)

    def rows_for_user(self, user):
        order, bounds = self._by_user
        return order[bounds[user]:bounds[user + 1]]

    def rows_for_item(self, item):
        order, bounds = self._by_item
        return order[bounds[item]:bounds[item + 1]]

    def scores(self, test_pt):
        """Return (user-side rows, user-side locals, item-side rows, item-side locals)."""
        ip, jp = test_pt
        Ut, Vt = self.norm.u_tilde, self.norm.v_tilde
        ru = self.rows_for_item(jp)
        ri = self.rows_for_user(ip)
        lu = Ut[self.train.users[ru]] @ Ut[ip]
        li = Vt[self.train.items[ri]] @ Vt[jp]
        return ru, lu, ri, li

    def importance_vector(self, test_pt):
        """Importance per training row (user- and item-side added for the self pair)."""
        ru, lu, ri, li = self.scores(test_pt)
        out = np.zeros(len(self.train))
        np.add.at(out, ru, self.glob[ru] * lu)
        np.add.at(out, ri, self.glob[ri] * li)
        return out

    def explain(self, test_pt):
        ru, lu, ri, li = self.scores(test_pt)
        tu, ti = self.train.users, self.train.items
        recs = [
            AttributionRecord.make((int(tu[r]), int(ti[r])), self.glob[r], l, "user")
            for r, l in zip(ru, lu)
        ]
        recs += [
            AttributionRecord.make((int(tu[r]), int(ti[r])), self.glob[r], l, "item")
            for r, l in zip(ri, li)
        ]
        return sort_records(recs)


def _group(keys, count):
    order = np.argsort(keys, kind="stable")
    bounds = np.searchsorted(keys[order], np.arange(count + 1))
    return order, bounds


def cf_explain(norm, loss, train, test_pt, scale=None):
    """User-side and item-side records for ``test_pt``, sorted for reporting."""
    return CFExplainer(norm, loss, train, scale).explain(test_pt)


def aggregate_negative_importance(norm, loss, positives, negatives, scale=None):
    """Summed importance of each negative over all positive interactions.

    ``I_neg(i, j) = -s l'(y_ij, <u_i, v_j>) * (<u_i, sum of u over item j's
    positives> + <v_j, sum of v over user i's positives>)``, computed from
    per-item and per-user embedding sums in O((|P| + |N|) k).

    Returns an array aligned with the rows of ``negatives``.
    """
    loss = get_loss(loss)
    if (positives.n_users, positives.n_items) != (negatives.n_users, negatives.n_items):
        raise InvalidInputError("positives and negatives use different id spaces")
    if np.intersect1d(positives.keys, negatives.keys).size:
        raise InvalidInputError("positives and negatives overlap")
    Ut, Vt = norm.u_tilde, norm.v_tilde
    r = Ut.shape[1]
    item_sum = np.zeros((positives.n_items, r))
    user_sum = np.zeros((positives.n_users, r))
    np.add.at(item_sum, positives.items, Ut[positives.users])
    np.add.at(user_sum, positives.users, Vt[positives.items])
    nu, ni = negatives.users, negatives.items
    t = np.einsum("ij,ij->i", Ut[nu], Vt[ni])
    glob = -_scale(scale) * loss.derivative(negatives.ratings, t)
    local = np.einsum("ij,ij->i", Ut[nu], item_sum[ni]) + np.einsum("ij,ij->i", Vt[ni], user_sum[nu])
    return glob * local


__all__ = [
    "AttributionRecord",
    "CFExplainer",
    "L1Explainer",
    "NormalizedEmbeddings",
    "SubspaceProjector",
    "aggregate_negative_importance",
    "cf_explain",
    "cf_importance",
    "l1_attribute",
    "l1_global",
    "normalize_factors",
    "normalized_from_svd",
    "nuclear_attribute",
    "sort_records",
]
