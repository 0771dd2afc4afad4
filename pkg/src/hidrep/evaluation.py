"""Case-deletion diagnostics, prediction metrics and the negative-sample audit.

A deletion curve removes the top-k positive (or negative) impact training
points according to some attribution, retrains from scratch with the same
hyperparameters and seed, and records the change in the test prediction.
AUC-DEL is the mean of that change over the k schedule.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .baselines import InfluenceWorkspace, l2_representer, random_scores, tracin_cp_vector
from .datasets import InteractionSet
from .errors import InvalidInputError
from .losses import BCE, SQUARED, get_loss
from .representers import (
    CFExplainer,
    L1Explainer,
    aggregate_negative_importance,
    normalize_factors,
    normalized_from_svd,
)
from .solvers import NegConfig, complement_keys, fit_l1, fit_mf_sgd, soft_impute

logger = logging.getLogger(__name__)

Z95 = 1.959963984540054


# --------------------------------------------------------------------------
# curves and AUC
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DeletionCurve:
    test_point: object
    ks: tuple
    deltas: tuple
    sign: str

    def __post_init__(self):
        if len(self.ks) != len(self.deltas):
            raise InvalidInputError("ks and deltas must have equal length")
        if any(b <= a for a, b in zip(self.ks, self.ks[1:])):
            raise InvalidInputError("ks must be strictly increasing")


def _check_sign(sign):
    if sign not in ("plus", "minus"):
        raise InvalidInputError(f"sign must be 'plus' or 'minus', got {sign!r}")


def deletion_order(scores, sign):
    """Eligible indices ordered for removal.

    ``plus`` takes positive scores, largest first; ``minus`` takes negative
    scores, smallest first. Ties keep ascending index order.
    """
    _check_sign(sign)
    scores = np.asarray(scores, dtype=np.float64)
    if sign == "plus":
        pool = np.flatnonzero(scores > 0)
        return pool[np.argsort(-scores[pool], kind="stable")]
    pool = np.flatnonzero(scores < 0)
    return pool[np.argsort(scores[pool], kind="stable")]


def del_curve(retrain, scores, test_point, ks, sign, seed=0, base_prediction=None):
    """Deletion curve for one test point.

    ``retrain(keep_mask, seed)`` must train from scratch on the kept points
    and return a callable mapping a test point to a prediction. The
    reference prediction comes from ``retrain`` on all points unless
    ``base_prediction`` is given. Schedule entries larger than the eligible
    pool are dropped with a warning.
    """
    _check_sign(sign)
    ks = [int(k) for k in ks]
    if any(k < 0 for k in ks):
        raise InvalidInputError("ks must be non-negative")
    if any(b <= a for a, b in zip(ks, ks[1:])):
        raise InvalidInputError("ks must be strictly increasing")
    scores = np.asarray(scores, dtype=np.float64)
    order = deletion_order(scores, sign)
    usable = [k for k in ks if k <= order.size]
    if len(usable) < len(ks):
        logger.warning(
            "eligible pool of %d points is smaller than k=%d; curve truncated",
            order.size, ks[len(usable)],
        )
    if base_prediction is None:
        base_prediction = retrain(np.ones(scores.size, dtype=bool), seed)(test_point)
    deltas = []
    for k in usable:
        keep = np.ones(scores.size, dtype=bool)
        keep[order[:k]] = False
        try:
            pred = retrain(keep, seed)(test_point)
        except Exception as exc:
            raise RuntimeError(f"retraining failed at k={k}: {exc}") from exc
        deltas.append(float(pred) - float(base_prediction))
    return DeletionCurve(test_point, tuple(usable), tuple(deltas), sign)


def auc_del(curve):
    """Mean of the curve's prediction changes."""
    deltas = curve.deltas if isinstance(curve, DeletionCurve) else tuple(curve)
    if len(deltas) == 0:
        raise InvalidInputError("cannot take AUC of an empty deletion curve")
    return float(np.mean(deltas))


@dataclass(frozen=True)
class DeletionReport:
    aucs: tuple
    mean: float
    ci_half_width: float
    trials: int
    tests_per_trial: int
    sign: str = "plus"
    method: str = ""
    curves: tuple = field(default=(), compare=False, repr=False)

    @classmethod
    def from_aucs(cls, aucs, tests_per_trial, sign="plus", method="", curves=()):
        aucs = tuple(float(a) for a in aucs)
        if not aucs:
            raise InvalidInputError("no trials to summarize")
        mean = float(np.mean(aucs))
        half = Z95 * float(np.std(aucs, ddof=1)) / math.sqrt(len(aucs)) if len(aucs) > 1 else 0.0
        return cls(aucs, mean, half, len(aucs), tests_per_trial, sign, method, tuple(curves))

    def to_dict(self):
        return {
            "method": self.method,
            "sign": self.sign,
            "per_trial_auc": list(self.aucs),
            "mean": self.mean,
            "ci95_half_width": self.ci_half_width,
            "trials": self.trials,
            "tests_per_trial": self.tests_per_trial,
        }

    def summary_line(self):
        tag = "AUC-DEL+" if self.sign == "plus" else "AUC-DEL-"
        return f"{tag} {self.mean:.6f} ± {self.ci_half_width:.6f}"


# --------------------------------------------------------------------------
# model families for the harness
# --------------------------------------------------------------------------


class L1Family:
    """l1-regularized linear classifier; test points are rows of ``test``.

    With ``lam_n`` the product ``n * lambda`` is held fixed across refits,
    so a refit on ``m`` kept samples uses ``lambda = lam_n / m``.
    """

    name = "l1"
    methods = ("hidrep", "l2", "influence", "random")

    def __init__(self, train, test, loss="logistic", lam=None, lam_n=None, tol=1e-8, max_iter=20000,
                 damping="auto"):
        if (lam is None) == (lam_n is None):
            raise InvalidInputError("give exactly one of lam and lam_n")
        self.train, self.test = train, test
        self.loss = get_loss(loss)
        self.lam, self.lam_n = lam, lam_n
        self.tol, self.max_iter, self.damping = tol, max_iter, damping

    @property
    def n_train(self):
        return self.train.n

    @property
    def n_test(self):
        return self.test.n

    def test_point(self, idx):
        return self.test.sample(int(idx))

    def schedule(self, fractions):
        """Counts for fractions of the training set; duplicates are merged."""
        return sorted({max(1, int(round(f * self.n_train))) for f in fractions})

    def fit(self, keep, seed=0):
        data = self.train if keep is None or keep.all() else self.train.subset(keep)
        lam = self.lam if self.lam_n is None else self.lam_n / data.n
        return fit_l1(data, self.loss, lam, tol=self.tol, max_iter=self.max_iter)

    def predictor(self, model):
        return model.predict

    def scorer(self, model, method):
        if method == "hidrep":
            ex = L1Explainer(model, self.train)
            return lambda x, seed: ex.importances(x)
        if method == "l2":
            return lambda x, seed: l2_representer(model, self.train, x)
        if method == "influence":
            ws = InfluenceWorkspace.build(model, self.train, self.damping)
            return lambda x, seed: ws.scores(x)
        if method == "random":
            return lambda x, seed: random_scores(self.n_train, seed)
        raise InvalidInputError(f"method {method!r} is not available for the l1 family")


class MFFamily:
    """Matrix factorization trained by SGD; test points are held-out pairs."""

    name = "mf"
    methods = ("hidrep", "tracin", "random")

    def __init__(self, train, test, k=8, lr=0.05, epochs=50, batch=256, loss=SQUARED,
                 optimizer="sgd", init_scale=None, checkpoints=None):
        self.train, self.test = train, test
        self.loss = get_loss(loss)
        self.params = dict(k=k, lr=lr, epochs=epochs, batch=batch, optimizer=optimizer,
                           init_scale=init_scale)
        self.checkpoints = checkpoints

    @property
    def n_train(self):
        return len(self.train)

    @property
    def n_test(self):
        return len(self.test)

    def test_point(self, idx):
        return (int(self.test.users[idx]), int(self.test.items[idx]))

    def schedule(self, ks):
        return list(ks)

    def fit(self, keep, seed=0, checkpoints=None):
        data = self.train if keep is None or keep.all() else self.train.subset(keep)
        return fit_mf_sgd(data, loss=self.loss, seed=seed, checkpoints=checkpoints, **self.params)

    def predictor(self, model):
        U, V = model.embeddings.user_mat, model.embeddings.item_mat
        return lambda pt: float(U[pt[0]] @ V[pt[1]])

    def _neighbourhood(self, pt):
        return (self.train.users == pt[0]) | (self.train.items == pt[1])

    def scorer(self, model, method):
        if method == "hidrep":
            ex = CFExplainer(normalize_factors(model.embeddings), self.loss, self.train)
            return lambda pt, seed: ex.importance_vector(pt)
        if method == "tracin":
            if model.trace is None:
                raise InvalidInputError("TracInCP needs a model trained with checkpoints")
            return lambda pt, seed: tracin_cp_vector(model.trace, self.loss, self.train, pt)
        if method == "random":
            def score(pt, seed):
                return np.where(self._neighbourhood(pt), random_scores(self.n_train, seed), 0.0)
            return score
        raise InvalidInputError(
            f"method {method!r} is not available for the mf family "
            "(the l2 representer does not apply to two-encoder models)"
        )


class NuclearFamily(MFFamily):
    """Nuclear-norm completion trained by soft-impute.

    ``lam_n`` holds ``|D| * lambda`` (the singular-value threshold) fixed
    across refits, as ``lam_n`` does for :class:`L1Family`.
    """

    name = "nuclear"
    methods = ("hidrep", "random")

    def __init__(self, train, test, lam=None, lam_n=None, max_rank=None, tol=1e-6, max_iter=1000):
        if (lam is None) == (lam_n is None):
            raise InvalidInputError("give exactly one of lam and lam_n")
        self.train, self.test = train, test
        self.loss = SQUARED
        self.lam, self.lam_n = lam, lam_n
        self.max_rank, self.tol, self.max_iter = max_rank, tol, max_iter

    def fit(self, keep, seed=0, checkpoints=None):
        data = self.train if keep is None or keep.all() else self.train.subset(keep)
        lam = self.lam if self.lam_n is None else self.lam_n / len(data)
        return soft_impute(data, lam, self.max_rank, self.tol, self.max_iter)

    def predictor(self, model):
        return lambda pt: model.svd.entry(pt[0], pt[1])

    def scorer(self, model, method):
        if method == "hidrep":
            scale = 1.0 / (model.lam * self.n_train)
            ex = CFExplainer(normalized_from_svd(model.svd), self.loss, self.train, scale)
            return lambda pt, seed: ex.importance_vector(pt)
        return super().scorer(model, method)


# --------------------------------------------------------------------------
# harness
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CaseDeletionConfig:
    method: str
    ks: tuple
    trials: int = 1
    tests_per_trial: int = 1
    seed: int = 0
    signs: tuple = ("plus", "minus")
    workers: int = 1

    def __post_init__(self):
        if self.trials < 1 or self.tests_per_trial < 1:
            raise InvalidInputError("trials and tests_per_trial must be positive")
        for s in self.signs:
            _check_sign(s)


def _trial_points(family, config):
    """Test-point indices per trial, drawn without replacement within a trial."""
    ss = np.random.SeedSequence(config.seed)
    out = []
    for child in ss.spawn(config.trials):
        rng = np.random.default_rng(child)
        if config.tests_per_trial > family.n_test:
            raise InvalidInputError(
                f"tests_per_trial={config.tests_per_trial} exceeds {family.n_test} test points"
            )
        out.append(rng.choice(family.n_test, config.tests_per_trial, replace=False))
    return out


def run_case_deletion(config, family, model=None):
    """Run trials x test-point deletion curves; one report per sign.

    The base model is trained once on all training points with
    ``config.seed``; every retraining reuses that seed. Each test point gets
    its own AUC, a trial's AUC is the mean over its test points, and the
    report carries the mean and normal-approximation 95% CI over trials.
    """
    if config.method not in family.methods:
        raise InvalidInputError(f"method {config.method!r} not available for family {family.name!r}")
    fit_kwargs = {}
    if config.method == "tracin":
        fit_kwargs["checkpoints"] = getattr(family, "checkpoints", None) or "every"
    if model is None:
        model = family.fit(None, config.seed, **fit_kwargs)
    base_predict = family.predictor(model)
    scorer = family.scorer(model, config.method)
    points = _trial_points(family, config)
    ks = list(config.ks)

    def retrain(keep, seed):
        return family.predictor(family.fit(keep, seed))

    jobs = []
    for t, idxs in enumerate(points):
        for n, idx in enumerate(idxs):
            jobs.append((t, n, int(idx)))

    def run(job):
        t, n, idx = job
        pt = family.test_point(idx)
        score_seed = int(np.random.SeedSequence([config.seed, t, n]).generate_state(1)[0])
        scores = scorer(pt, score_seed)
        base = base_predict(pt)
        return {
            s: del_curve(retrain, scores, pt, ks, s, seed=config.seed, base_prediction=base)
            for s in config.signs
        }

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    reports = {}
    for s in config.signs:
        per_trial = [[] for _ in points]
        curves = []
        for (t, _, _), res in zip(jobs, results):
            curve = res[s]
            curves.append(curve)
            if curve.deltas:
                per_trial[t].append(auc_del(curve))
        aucs = [float(np.mean(a)) for a in per_trial if a]
        if len(aucs) < len(per_trial):
            logger.warning("%d of %d trials had no eligible points for sign %s and were skipped",
                           len(per_trial) - len(aucs), len(per_trial), s)
        if not aucs:
            raise RuntimeError(f"no test point had eligible {s} points to delete")
        reports[s] = DeletionReport.from_aucs(aucs, config.tests_per_trial, s, config.method, curves)
    return reports


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def mae(predictions, truths):
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    t = np.asarray(truths, dtype=np.float64).reshape(-1)
    if p.size != t.size:
        raise InvalidInputError(f"length mismatch: {p.size} vs {t.size}")
    if p.size == 0:
        raise InvalidInputError("mae needs at least one value")
    return float(np.mean(np.abs(p - t)))


def recall_at_k(ranked, held_out, k):
    """Mean over users of ``|top-k ∩ held-out| / |held-out|``.

    ``ranked`` maps user -> ranked item list (training positives already
    excluded); ``held_out`` maps user -> collection of held-out positives.
    Users with no held-out positives are skipped.
    """
    if k < 1:
        raise InvalidInputError("k must be at least 1")
    vals = []
    skipped = 0
    for user, pos in held_out.items():
        pos = set(pos)
        if not pos:
            skipped += 1
            continue
        top = list(ranked.get(user, ()))[:k]
        vals.append(len(pos.intersection(top)) / len(pos))
    if skipped:
        logger.warning("skipped %d users without held-out positives", skipped)
    return float(np.mean(vals)) if vals else 0.0


def rank_items(pair, exclude, k):
    """Top-``k`` items per user by predicted score, skipping ``exclude`` pairs."""
    scores = pair.user_mat @ pair.item_mat.T
    if len(exclude):
        scores[exclude.users, exclude.items] = -np.inf
    k = min(k, scores.shape[1])
    top = np.argpartition(-scores, k - 1, axis=1)[:, :k] if k else np.zeros((scores.shape[0], 0), int)
    ranked = {}
    for u in range(scores.shape[0]):
        row = top[u]
        # stable order: score descending, then item id
        row = row[np.lexsort((row, -scores[u, row]))]
        ranked[u] = [int(i) for i in row if np.isfinite(scores[u, i])]
    return ranked


def _held_out(test):
    out = {}
    for u, i in zip(test.users.tolist(), test.items.tolist()):
        out.setdefault(u, set()).add(i)
    return out


# --------------------------------------------------------------------------
# negative-sample audit
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AuditConfig:
    method: str = "hidrep"
    fractions: tuple = (0.01, 0.03, 0.05)
    order: str = "least"
    k: int = 8
    lr: float = 20.0
    epochs: int = 200
    batch: int = 512
    neg_weight: float = 0.05
    seed: int = 0
    recall_k: int = 20

    def __post_init__(self):
        if self.method not in ("hidrep", "loss", "random"):
            raise InvalidInputError(f"unknown audit method {self.method!r}")
        if self.order not in ("least", "largest"):
            raise InvalidInputError("order must be 'least' or 'largest'")
        if any(not 0.0 <= p <= 1.0 for p in self.fractions):
            raise InvalidInputError("fractions must lie in [0, 1]")


def negative_scores(model, positives, negatives, method, seed=0):
    """Per-negative scores used to pick removals (aligned with ``negatives``)."""
    if method == "hidrep":
        norm = normalize_factors(model.embeddings)
        return aggregate_negative_importance(norm, model.loss, positives, negatives)
    if method == "loss":
        pred = model.predict(negatives.users, negatives.items)
        return model.loss.value(negatives.ratings, pred)
    return random_scores(len(negatives), seed)


def removal_order(scores, method, order):
    """Indices of negatives in removal priority (stable by index)."""
    scores = np.asarray(scores, dtype=np.float64)
    if method == "loss":
        return np.argsort(-scores, kind="stable")
    if method == "hidrep" and order == "least":
        return np.argsort(scores, kind="stable")
    return np.argsort(-scores, kind="stable")


def negative_audit_experiment(train, test, config):
    """Remove the top fraction of negatives by each criterion and retrain.

    ``train`` and ``test`` hold binarized positives over the same id space.
    The base model uses every unobserved training pair as a weighted BCE
    negative. For each fraction the report row gives the number of removed
    negatives that are test positives and the recall@k before and after.
    """
    if (train.n_users, train.n_items) != (test.n_users, test.n_items):
        raise InvalidInputError("train and test must share the id space")
    keys = complement_keys(train)
    n_items = train.n_items
    negatives = InteractionSet(
        train.n_users, n_items, keys // n_items, keys % n_items, np.zeros(keys.size),
        None, train.user_ids, train.item_ids,
    )
    params = dict(k=config.k, lr=config.lr, epochs=config.epochs, batch=config.batch, loss=BCE,
                  seed=config.seed)
    base = fit_mf_sgd(train, neg=NegConfig(config.neg_weight, negatives), **params)
    held = _held_out(test)
    base_recall = recall_at_k(rank_items(base.embeddings, train, config.recall_k), held, config.recall_k)
    score_seed = int(np.random.SeedSequence([config.seed, 1]).generate_state(1)[0])
    scores = negative_scores(base, train, negatives, config.method, score_seed)
    order = removal_order(scores, config.method, config.order)
    test_keys = set(test.keys.tolist())
    rows = []
    for p in config.fractions:
        n_remove = int(round(p * len(negatives)))
        removed = order[:n_remove]
        hits = sum(1 for key in negatives.keys[removed].tolist() if key in test_keys)
        if n_remove == 0:
            new_recall = base_recall
        else:
            keep = np.ones(len(negatives), dtype=bool)
            keep[removed] = False
            model = fit_mf_sgd(train, neg=NegConfig(config.neg_weight, negatives.subset(keep)), **params)
            new_recall = recall_at_k(rank_items(model.embeddings, train, config.recall_k), held,
                                     config.recall_k)
        rows.append({
            "fraction": float(p),
            "removed": int(n_remove),
            "false_negatives_hit": int(hits),
            "recall_base": base_recall,
            "recall_after": new_recall,
            "recall_delta": new_recall - base_recall,
        })
    return {"method": config.method, "order": config.order, "rows": rows}
