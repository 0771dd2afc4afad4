"""Solvers for the three training objectives.

* :func:`fit_l1` minimizes ``(1/n) sum_i l(y_i, <x_i, theta>) + lam * ||theta||_1``
  with monotone FISTA plus backtracking, stopping on the KKT residual.
* :func:`soft_impute` minimizes
  ``(1/|D|) sum_D 0.5 (Theta_ij - y_ij)**2 + lam * ||Theta||_*``.
* :func:`fit_mf_sgd` minimizes ``sum_D l(y_ij, <U_i, V_j>)`` over factor
  matrices with minibatch SGD, optionally adding weighted negatives.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .datasets import EmbeddingPair, InteractionSet
from .errors import ConvergenceError, DivergenceError, InvalidInputError
from .linalg import SvdTriple, svt
from .losses import SQUARED, get_loss
from .models import CheckpointTrace, L1LinearModel, LowRankModel, MFModel

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# l1-regularized linear models
# --------------------------------------------------------------------------


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def _l1_kkt(theta, grad, lam):
    on = theta != 0
    res_on = np.abs(grad[on] + lam * np.sign(theta[on]))
    res_off = np.maximum(0.0, np.abs(grad[~on]) - lam)
    return float(max(res_on.max(initial=0.0), res_off.max(initial=0.0)))


def _smooth_grad(X, y, loss, theta):
    t = X @ theta
    return X.T @ loss.derivative(y, t) / X.shape[0]


def lambda_max(data, loss):
    """Smallest ``lam`` for which ``theta = 0`` is optimal."""
    g = _smooth_grad(data.X, data.y, get_loss(loss), np.zeros(data.dim))
    return float(np.max(np.abs(g), initial=0.0))


def kkt_residual_l1(model, data):
    """Largest violation of the l1 optimality conditions at ``model.theta``.

    With ``g = (1/n) sum_i l'_i x_i``: ``|g_j + lam sign(theta_j)|`` on the
    support and ``max(0, |g_j| - lam)`` off it.
    """
    if data.dim != model.theta.size:
        raise InvalidInputError(f"model dimension {model.theta.size} != data dimension {data.dim}")
    g = _smooth_grad(data.X, data.y, model.loss, model.theta)
    return _l1_kkt(model.theta, g, model.lam)


def _lipschitz_estimate(X, curvature, iters=20, seed=0):
    n, p = X.shape
    if p == 0 or X.nnz == 0:
        return 1.0
    v = np.random.default_rng(seed).standard_normal(p)
    for _ in range(iters):
        w = X.T @ (X @ v)
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return 1.0
        v = w / nrm
    return max(curvature * float(np.linalg.norm(X @ v)) ** 2 / n, 1e-12)


def _newton_polish(X, y, loss, lam, theta, tol, max_steps=50):
    """Newton refinement on the current support with signs held fixed.

    Returns the refined vector or ``None`` if the signs change.
    """
    S = np.flatnonzero(theta)
    if S.size == 0:
        return None
    n = X.shape[0]
    XS = X[:, S]
    s = np.sign(theta[S])
    w = theta[S].copy()

    def phi(w):
        return float(np.mean(loss.value(y, XS @ w))) + lam * float(s @ w)

    cur = phi(w)
    for _ in range(max_steps):
        t = XS @ w
        g = XS.T @ loss.derivative(y, t) / n + lam * s
        if np.max(np.abs(g)) <= tol:
            break
        d2 = loss.second_derivative(y, t)
        H = (XS.T @ sp.diags(d2) @ XS) / n
        H = H.toarray() if sp.issparse(H) else np.asarray(H)
        try:
            step = scipy.linalg.solve(H, g, assume_a="pos")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        if abs(float(g @ step)) <= 1e-10 * max(1.0, abs(cur)):
            # inside the quadratic region objective changes are below rounding; take the full step
            w = w - step
            cur = phi(w)
            continue
        a = 1.0
        while a > 1e-10:
            cand = w - a * step
            val = phi(cand)
            if val <= cur + 1e-4 * float(g @ (cand - w)):
                break
            a *= 0.5
        else:
            break
        w, cur = cand, val
    if np.any(np.sign(w) != s):
        return None
    out = np.zeros_like(theta)
    out[S] = w
    return out


def fit_l1(data, loss, lam, tol=1e-8, max_iter=20000, theta0=None, polish=True):
    """Fit an l1-regularized linear model.

    Monotone FISTA with backtracking and momentum restarts. When ``polish``
    is set, a Newton step restricted to the current support (signs fixed) is
    attempted periodically; it is accepted only if it lowers the objective
    and the KKT residual. Raises :class:`ConvergenceError` carrying the best
    iterate if the residual is still above ``tol`` after ``max_iter``.
    """
    loss = get_loss(loss)
    if lam <= 0:
        raise InvalidInputError("lambda must be positive")
    if tol <= 0:
        raise InvalidInputError("tol must be positive")
    X, y = data.X, data.y
    n, p = X.shape

    def f(theta):
        return float(np.mean(loss.value(y, X @ theta)))

    def objective(theta):
        return f(theta) + lam * float(np.abs(theta).sum())

    x = np.zeros(p) if theta0 is None else np.asarray(theta0, dtype=np.float64).copy()
    g = _smooth_grad(X, y, loss, x)
    res = _l1_kkt(x, g, lam)
    Fx = objective(x)
    history = [Fx]
    best, best_res = x.copy(), res
    if res <= tol:
        return L1LinearModel(x, lam, loss, res, 0, tuple(history))

    L = _lipschitz_estimate(X, loss.curvature_bound) * 0.5
    yk = x.copy()
    t = 1.0
    polish_every = 25
    for it in range(1, max_iter + 1):
        ty = X @ yk
        fy = float(np.mean(loss.value(y, ty)))
        gy = X.T @ loss.derivative(y, ty) / n
        while True:
            z = soft_threshold(yk - gy / L, lam / L)
            d = z - yk
            fz = f(z)
            if fz <= fy + float(gy @ d) + 0.5 * L * float(d @ d) + 1e-15 * max(1.0, abs(fy)):
                break
            L *= 2.0
        Fz = fz + lam * float(np.abs(z).sum())
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        if Fz <= Fx:
            x_new, Fx_new = z, Fz
        else:
            x_new, Fx_new = x, Fx
        yk = x_new + (t / t_new) * (z - x_new) + ((t - 1.0) / t_new) * (x_new - x)
        if Fz > Fx:
            # restart momentum after a rejected step
            t_new = 1.0
            yk = x_new.copy()
        x, Fx, t = x_new, Fx_new, t_new
        history.append(Fx)

        g = _smooth_grad(X, y, loss, x)
        res = _l1_kkt(x, g, lam)
        if res < best_res:
            best, best_res = x.copy(), res
        if res <= tol:
            return L1LinearModel(x, lam, loss, res, it, tuple(history))

        if polish and it % polish_every == 0 and res < 1e-2:
            cand = _newton_polish(X, y, loss, lam, x, tol * 1e-2)
            if cand is not None:
                Fc = objective(cand)
                gc = _smooth_grad(X, y, loss, cand)
                rc = _l1_kkt(cand, gc, lam)
                # objective gaps this close to the optimum are rounding noise
                if Fc <= Fx + 1e-14 * max(1.0, abs(Fx)) and rc < res:
                    x, Fx, res = cand, Fc, rc
                    yk = x.copy()
                    t = 1.0
                    history.append(Fx)
                    if res < best_res:
                        best, best_res = x.copy(), res
                    if res <= tol:
                        return L1LinearModel(x, lam, loss, res, it, tuple(history))

    raise ConvergenceError(
        f"fit_l1 did not reach KKT residual {tol:g} in {max_iter} iterations (best {best_res:.3g})",
        best=L1LinearModel(best, lam, loss, best_res, max_iter, tuple(history)),
        residual=best_res,
    )


# --------------------------------------------------------------------------
# nuclear-norm matrix completion
# --------------------------------------------------------------------------


def soft_impute_objective(theta, observed, lam):
    """Value of ``(1/|D|) sum_D 0.5 (Theta_ij - y_ij)**2 + lam ||Theta||_*``."""
    if isinstance(theta, SvdTriple):
        nuc = float(theta.S.sum())
        pred = np.einsum("ij,ij->i", theta.U[observed.users] * theta.S, theta.V[observed.items])
    else:
        nuc = float(np.linalg.svd(theta, compute_uv=False).sum())
        pred = theta[observed.users, observed.items]
    resid = pred - observed.ratings
    return 0.5 * float(resid @ resid) / max(len(observed), 1) + lam * nuc


def soft_impute(observed, lam, max_rank=None, tol=1e-6, max_iter=1000, warm_start=None, accelerate=True):
    """Soft-impute for squared-loss nuclear-norm completion.

    The basic step is ``T(Theta) = svt(P_obs(Y) + P_unobs(Theta), lam * |D|)``;
    the threshold carries the ``|D|`` factor because the loss is averaged
    over observed entries. With ``accelerate`` each iteration also tries a
    momentum step and keeps whichever of the two has the lower objective, so
    the objective never increases; momentum restarts whenever the plain step
    wins. Stops once ``||T(Theta) - Theta||_F / max(1, ||Theta||_F) <= tol``
    and returns ``T(Theta)``.
    """
    if lam <= 0:
        raise InvalidInputError("lambda must be positive")
    m, n = observed.n_users, observed.n_items
    if max_rank is None:
        max_rank = min(m, n)
    mask = observed.mask()
    Y = observed.to_dense(fill=0.0)
    tau = lam * len(observed)

    def step(theta):
        svd = svt(np.where(mask, Y, theta), tau)
        return svd, svd.reconstruct(), soft_impute_objective(svd, observed, lam)

    def check_rank(svd):
        if svd.rank > max_rank:
            raise ConvergenceError(
                f"soft_impute iterate reached rank {svd.rank} > max_rank {max_rank}; raise max_rank or lambda",
                best=None,
            )

    x = np.zeros((m, n)) if warm_start is None else np.asarray(warm_start, dtype=np.float64).copy()
    x_prev = x
    t = 1.0
    history = []
    delta = np.inf
    svd = SvdTriple(np.zeros((m, 0)), np.zeros(0), np.zeros((n, 0)))
    for it in range(1, max_iter + 1):
        svd, plain, f_new = step(x)
        check_rank(svd)
        delta = float(np.linalg.norm(plain - x)) / max(1.0, float(np.linalg.norm(x)))
        if delta <= tol:
            history.append(f_new)
            return LowRankModel(svd, lam, SQUARED, observed, delta, it, tuple(history))
        x_new = plain
        if accelerate:
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            beta = (t - 1.0) / t_next
            if beta > 0.0:
                z_svd, z, f_z = step(x + beta * (x - x_prev))
                if f_z < f_new and z_svd.rank <= max_rank:
                    x_new, f_new = z, f_z
                else:
                    t_next = 1.0
            t = t_next
        history.append(f_new)
        x_prev, x = x, x_new
    raise ConvergenceError(
        f"soft_impute did not reach tol {tol:g} in {max_iter} iterations (delta {delta:.3g})",
        best=LowRankModel(svd, lam, SQUARED, observed, delta, max_iter, tuple(history)),
        residual=delta,
    )


# --------------------------------------------------------------------------
# matrix factorization by SGD
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class NegConfig:
    """Negative samples for implicit feedback.

    ``negatives=None`` uses every unobserved (user, item) pair. Negative
    terms are multiplied by ``weight`` and carry label ``label``.
    """

    weight: float = 0.05
    negatives: InteractionSet | None = None
    label: float = 0.0


def complement_keys(positives):
    """Sorted linear keys ``user * n_items + item`` of unobserved pairs."""
    total = positives.n_users * positives.n_items
    taken = np.zeros(total, dtype=bool)
    taken[positives.keys] = True
    return np.flatnonzero(~taken)


def iter_complement(positives, chunk=65536):
    """Yield (users, items) arrays covering the unobserved pairs in key order."""
    keys = complement_keys(positives)
    for lo in range(0, keys.size, chunk):
        block = keys[lo:lo + chunk]
        yield block // positives.n_items, block % positives.n_items


def uniform_negative_sample(positives, count="all", seed=0, label=0.0):
    """Unobserved pairs, either all of them or ``count`` drawn without replacement."""
    keys = complement_keys(positives)
    if count != "all":
        count = int(count)
        if count < 0:
            raise InvalidInputError("count must be non-negative")
        if count > keys.size:
            raise InvalidInputError(f"requested {count} negatives but only {keys.size} unobserved pairs")
        rng = np.random.default_rng(seed)
        keys = np.sort(rng.choice(keys, size=count, replace=False))
    n_items = positives.n_items
    return InteractionSet(
        positives.n_users, n_items, keys // n_items if n_items else keys, keys % n_items if n_items else keys,
        np.full(keys.size, float(label)), None, positives.user_ids, positives.item_ids,
    )


def _checkpoint_epochs(checkpoints, epochs):
    if checkpoints is None:
        return set()
    if checkpoints == "every":
        return set(range(1, epochs + 1))
    marks = {int(e) for e in checkpoints}
    if any(e < 1 or e > epochs for e in marks):
        raise InvalidInputError(f"checkpoint epochs must lie in [1, {epochs}]")
    # the returned embeddings are always the last checkpoint
    marks.add(epochs)
    return marks


def fit_mf_sgd(
    train,
    k,
    lr,
    epochs,
    batch=256,
    loss=SQUARED,
    neg=None,
    seed=0,
    checkpoints=None,
    init_scale=None,
    optimizer="sgd",
):
    """Matrix factorization by minibatch SGD.

    Each step descends the batch-averaged (weighted) loss. Initial entries
    are uniform on ``(-init_scale, init_scale)`` with ``init_scale``
    defaulting to ``1/sqrt(k)``. ``checkpoints`` is ``None``, ``"every"`` or
    a list of 1-based epochs; the final epoch is always included when
    checkpointing is on. ``optimizer="adagrad"`` scales steps per row by
    accumulated squared gradients.

    Returns an :class:`MFModel` whose ``trace`` holds the checkpoints.
    """
    loss = get_loss(loss)
    if k < 1:
        raise InvalidInputError("k must be at least 1")
    if lr <= 0:
        raise InvalidInputError("learning rate must be positive")
    if batch < 1:
        raise InvalidInputError("batch must be at least 1")
    if optimizer not in ("sgd", "adagrad"):
        raise InvalidInputError(f"unknown optimizer {optimizer!r}")
    ss = np.random.SeedSequence(seed)
    init_rng, shuffle_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    scale = 1.0 / np.sqrt(k) if init_scale is None else float(init_scale)
    U = init_rng.uniform(-scale, scale, (train.n_users, k))
    V = init_rng.uniform(-scale, scale, (train.n_items, k))

    users, items, ys = train.users, train.items, train.ratings
    weights = np.ones(len(train))
    if neg is not None:
        if neg.negatives is None:
            keys = complement_keys(train)
            nu, ni = keys // train.n_items, keys % train.n_items
            ny = np.full(keys.size, neg.label)
        else:
            if np.intersect1d(neg.negatives.keys, train.keys).size:
                raise InvalidInputError("negatives overlap the positive interactions")
            nu, ni, ny = neg.negatives.users, neg.negatives.items, neg.negatives.ratings
        users = np.concatenate([users, nu])
        items = np.concatenate([items, ni])
        ys = np.concatenate([ys, ny])
        weights = np.concatenate([weights, np.full(nu.size, neg.weight)])

    marks = _checkpoint_epochs(checkpoints, epochs)
    snaps, rates = [], []
    acc_u = np.zeros(train.n_users) if optimizer == "adagrad" else None
    acc_v = np.zeros(train.n_items) if optimizer == "adagrad" else None
    total = users.size
    # overflow is reported as DivergenceError below
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, epochs + 1):
            perm = shuffle_rng.permutation(total)
            for lo in range(0, total, batch):
                idx = perm[lo:lo + batch]
                bu, bi = users[idx], items[idx]
                Ub, Vb = U[bu], V[bi]
                pred = np.einsum("ij,ij->i", Ub, Vb)
                g = weights[idx] * loss.derivative(ys[idx], pred) / idx.size
                gU = g[:, None] * Vb
                gV = g[:, None] * Ub
                if optimizer == "sgd":
                    np.add.at(U, bu, -lr * gU)
                    np.add.at(V, bi, -lr * gV)
                else:
                    np.add.at(acc_u, bu, np.einsum("ij,ij->i", gU, gU))
                    np.add.at(acc_v, bi, np.einsum("ij,ij->i", gV, gV))
                    np.add.at(U, bu, -lr * gU / (np.sqrt(acc_u[bu])[:, None] + 1e-10))
                    np.add.at(V, bi, -lr * gV / (np.sqrt(acc_v[bi])[:, None] + 1e-10))
            if not (np.all(np.isfinite(U)) and np.all(np.isfinite(V))):
                raise DivergenceError(f"SGD diverged during epoch {epoch}; lower the learning rate", epoch)
            if epoch in marks:
                snaps.append(EmbeddingPair(U.copy(), V.copy()))
                rates.append(float(lr))
    pair = snaps[-1] if snaps and epochs in marks else EmbeddingPair(U.copy(), V.copy())
    trace = CheckpointTrace(tuple(snaps), tuple(rates)) if checkpoints is not None else None
    config = {
        "k": int(k), "lr": float(lr), "epochs": int(epochs), "batch": int(batch),
        "seed": int(seed), "optimizer": optimizer,
        "neg_weight": None if neg is None else float(neg.weight),
    }
    return MFModel(pair, loss, trace, config)
