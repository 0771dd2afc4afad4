"""End-to-end acceptance checks.

Each test prints a single PASS/FAIL line (visible under ``pytest -v`` or
``-s``) and then asserts the same condition.
"""

import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.stats import spearmanr

from hidrep.baselines import influence_l1, tracin_cp
from hidrep.datasets import EmbeddingPair, InteractionSet, LabeledDataset
from hidrep.evaluation import CaseDeletionConfig, L1Family, MFFamily, run_case_deletion
from hidrep.losses import BCE, LOGISTIC, SQUARED, get_loss
from hidrep.models import CheckpointTrace, L1LinearModel
from hidrep.representers import (
    L1Explainer,
    NormalizedEmbeddings,
    aggregate_negative_importance,
    cf_importance,
    normalize_factors,
    nuclear_attribute,
)
from hidrep.solvers import fit_l1, lambda_max, soft_impute

from conftest import sparse_logistic_problem

TESTS = Path(__file__).resolve().parent


@pytest.fixture
def verdict(capsys):
    def emit(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return emit


def _loglog_r2(sizes, times):
    x, y = np.log(sizes), np.log(times)
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    return 1.0 - resid @ resid / np.sum((y - y.mean()) ** 2), slope


def _best_time(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def test_l1_decomposition_exact(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for prob, scale in enumerate(10.0 ** np.linspace(-3, 0, 20)):
        loss = SQUARED if prob % 2 == 0 else LOGISTIC
        X = rng.normal(size=(50, 20))
        theta = np.where(rng.random(20) < 0.3, rng.normal(size=20), 0.0)
        if loss is SQUARED:
            y = X @ theta + 0.5 * rng.normal(size=50)
        else:
            y = np.where(rng.random(50) < 1.0 / (1.0 + np.exp(-X @ theta)), 1.0, -1.0)
        data = LabeledDataset.from_dense(X, y)
        # largest lambda sits just below the all-zero threshold
        model = fit_l1(data, loss, 0.9 * scale * lambda_max(data, loss), tol=1e-9)
        ex = L1Explainer(model, data)
        for _ in range(10):
            xt = rng.normal(size=20)
            pred = xt @ model.theta
            err = abs(ex.importances(xt).sum() - pred) / (1.0 + abs(pred))
            worst = max(worst, err)
    elapsed = time.perf_counter() - start
    verdict("l1 decomposition exactness", worst <= 1e-6 and elapsed < 10,
            f"max relative error {worst:.2e} (tol 1e-6), {elapsed:.1f}s")


def test_nuclear_decomposition_exact(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    m, n = 30, 20
    truth = rng.normal(size=(m, 3)) @ rng.normal(size=(3, n))
    u, i = np.nonzero(rng.random((m, n)) < 0.4)
    obs = InteractionSet(m, n, u, i, truth[u, i])
    model = soft_impute(obs, 1.0 / len(obs), tol=1e-10, max_iter=100000)
    theta = model.matrix()
    worst = 0.0
    for _ in range(20):
        entry = (int(rng.integers(m)), int(rng.integers(n)))
        for side in ("column", "row", "average"):
            total = sum(r.importance for r in nuclear_attribute(model, entry, side=side))
            worst = max(worst, abs(total - theta[entry]))
    elapsed = time.perf_counter() - start
    verdict("nuclear decomposition exactness", worst <= 1e-5 and elapsed < 30,
            f"rank {model.rank}, max error {worst:.2e} (tol 1e-5), {elapsed:.1f}s")


def test_normalized_factor_identity(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    worst_prod, worst_gram = 0.0, 0.0
    for case in range(50):
        m, n, k = int(rng.integers(1, 51)), int(rng.integers(1, 41)), int(rng.integers(1, 9))
        U, V = rng.normal(size=(m, k)), rng.normal(size=(n, k))
        if case % 3 == 1:
            U[:, 0] = 0.0
        elif case % 3 == 2 and k > 1:
            # rank-deficient user factor
            U = rng.normal(size=(m, 1)) @ rng.normal(size=(1, k))
        norm = normalize_factors(EmbeddingPair(U, V))
        P = U @ V.T
        Pt = norm.u_tilde @ norm.v_tilde.T
        worst_prod = max(worst_prod, np.linalg.norm(Pt - P) / max(1.0, np.linalg.norm(P)))
        D = np.diag(norm.sigma)
        worst_gram = max(worst_gram, np.abs(norm.u_tilde.T @ norm.u_tilde - D).max(initial=0.0),
                         np.abs(norm.v_tilde.T @ norm.v_tilde - D).max(initial=0.0))
    elapsed = time.perf_counter() - start
    ok = worst_prod <= 1e-8 and worst_gram <= 1e-8 and elapsed < 5
    verdict("normalized factor identity", ok,
            f"product error {worst_prod:.2e}, gram error {worst_gram:.2e} (tol 1e-8), {elapsed:.2f}s")


def test_tracin_matches_raw_representer(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    m, n, k = 12, 10, 4
    keys = rng.choice(m * n, size=60, replace=False)
    train = InteractionSet(m, n, keys // n, keys % n, rng.normal(size=60))
    U, V = rng.normal(size=(m, k)), rng.normal(size=(n, k))
    trace = CheckpointTrace((EmbeddingPair(U, V),), (1.0,))
    raw = NormalizedEmbeddings(U, V, np.ones(k))
    worst, shared = 0.0, 0
    for _ in range(100):
        r = int(rng.integers(60))
        tr = (int(train.users[r]), int(train.items[r]))
        mode = rng.integers(4)
        te = [tr, (tr[0], int(rng.integers(n))), (int(rng.integers(m)), tr[1]),
              (int(rng.integers(m)), int(rng.integers(n)))][mode]
        shared += te[0] == tr[0] or te[1] == tr[1]
        a = tracin_cp(trace, SQUARED, train, tr, te)
        b = cf_importance(raw, SQUARED, train, tr, te)
        b = sum(b) if isinstance(b, tuple) else b
        worst = max(worst, abs(a - b) / max(1.0, abs(b)))
    elapsed = time.perf_counter() - start
    verdict("tracin equals raw-embedding representer", worst <= 1e-12 and elapsed < 1,
            f"{shared}/100 pairs share a user or item, max error {worst:.1e} (tol 1e-12), {elapsed:.3f}s")


def _planted_ratings(seed=0, n_users=200, n_items=300, k=8, density=0.3, noise=0.1):
    rng = np.random.default_rng(seed)
    Ut = rng.normal(size=(n_users, k)) / k ** 0.25
    Vt = rng.normal(size=(n_items, k)) / k ** 0.25
    u, i = np.nonzero(rng.random((n_users, n_items)) < density)
    r = np.einsum("ij,ij->i", Ut[u], Vt[i]) + noise * rng.normal(size=u.size)
    perm = rng.permutation(u.size)
    te, tr = np.sort(perm[: u.size // 10]), np.sort(perm[u.size // 10:])
    return (InteractionSet(n_users, n_items, u[tr], i[tr], r[tr]),
            InteractionSet(n_users, n_items, u[te], i[te], r[te]))


@pytest.mark.slow
def test_cf_deletion_direction(verdict):
    start = time.perf_counter()
    train, test = _planted_ratings()
    fam = MFFamily(train, test, k=8, lr=1.0, epochs=100, batch=len(train), optimizer="adagrad")
    model = fam.fit(None, 0)
    reps = {
        method: run_case_deletion(CaseDeletionConfig(method, (5, 10, 15), trials=5, tests_per_trial=10,
                                                     seed=0, workers=4), fam, model=model)
        for method in ("hidrep", "random")
    }
    h, r = reps["hidrep"], reps["random"]
    elapsed = time.perf_counter() - start
    ok = (h["plus"].mean < 0 < h["minus"].mean
          and abs(h["plus"].mean) > abs(r["plus"].mean)
          and abs(h["minus"].mean) > abs(r["minus"].mean)
          and abs(r["plus"].mean) <= 0.05 and abs(r["minus"].mean) <= 0.05
          and elapsed < 900)
    detail = (f"hidrep {h['plus'].summary_line()}, {h['minus'].summary_line()}; "
              f"random {r['plus'].summary_line()}, {r['minus'].summary_line()}; {elapsed:.0f}s")
    verdict("cf deletion direction", ok, detail)


@pytest.mark.slow
def test_l1_deletion_ordering(verdict):
    start = time.perf_counter()
    wins, rows = 0, []
    for rep in range(5):
        train, test = sparse_logistic_problem(100 + rep)
        fam = L1Family(train, test, "logistic", lam=0.15 * lambda_max(train, LOGISTIC))
        model = fam.fit(None, 0)
        ks = fam.schedule([0.01, 0.02, 0.03, 0.04, 0.05])
        reps = [run_case_deletion(CaseDeletionConfig(m, ks, trials=1, tests_per_trial=10, seed=rep),
                                  fam, model=model) for m in ("hidrep", "l2", "random")]
        plus = [r["plus"].mean for r in reps]
        minus = [r["minus"].mean for r in reps]
        good = plus[0] <= plus[1] <= plus[2] and minus[0] >= minus[1] >= minus[2]
        wins += good
        rows.append(f"{'ok' if good else 'x'}")
    elapsed = time.perf_counter() - start
    verdict("l1 deletion ordering", wins >= 4 and elapsed < 600,
            f"hidrep <= l2 <= random ordering held in {wins}/5 repetitions {rows}, {elapsed:.0f}s")


def _naive_negative_importance(norm, loss, pos, neg):
    loss = get_loss(loss)
    out = np.zeros(len(neg))
    for a, (i, j, y) in enumerate(zip(neg.users, neg.items, neg.ratings)):
        g = -float(loss.derivative(y, norm.u_tilde[i] @ norm.v_tilde[j]))
        for ip, jp in zip(pos.users, pos.items):
            if jp == j:
                out[a] += g * float(norm.u_tilde[i] @ norm.u_tilde[ip])
            if ip == i:
                out[a] += g * float(norm.v_tilde[j] @ norm.v_tilde[jp])
    return out


def test_negative_aggregation_matches_naive(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(25):
        m, n, k = int(rng.integers(2, 16)), int(rng.integers(2, 16)), int(rng.integers(1, 6))
        total = min(m * n, int(rng.integers(2, 61)))
        keys = rng.choice(m * n, size=total, replace=False)
        cut = int(rng.integers(1, total))
        pk, nk = keys[:cut][:30], keys[cut:][:30]
        pos = InteractionSet(m, n, pk // n, pk % n, np.ones(pk.size))
        neg = InteractionSet(m, n, nk // n, nk % n, np.zeros(nk.size))
        norm = normalize_factors(EmbeddingPair(rng.normal(size=(m, k)), rng.normal(size=(n, k))))
        fast = aggregate_negative_importance(norm, BCE, pos, neg)
        slow = _naive_negative_importance(norm, BCE, pos, neg)
        worst = max(worst, np.abs(fast - slow).max(initial=0.0))
    elapsed = time.perf_counter() - start
    verdict("negative aggregation fast path", worst <= 1e-9 and elapsed < 2,
            f"max error {worst:.1e} (tol 1e-9), {elapsed:.2f}s")


def test_influence_tracks_leave_one_out(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    X = rng.normal(size=(20, 5))
    y = X @ np.array([2.0, -1.5, 1.0, 0.0, 0.0]) + 0.3 * rng.normal(size=20)
    data = LabeledDataset.from_dense(X, y)
    lam_n = 0.2 * 20
    model = fit_l1(data, SQUARED, lam_n / 20, tol=1e-12)
    xt = rng.normal(size=5)
    scores = influence_l1(model, data, xt)
    drops, stable = [], True
    for i in range(20):
        keep = np.ones(20, dtype=bool)
        keep[i] = False
        sub = fit_l1(data.subset(keep), SQUARED, lam_n / 19, tol=1e-12)
        stable &= np.array_equal(sub.support, model.support)
        drops.append(xt @ model.theta - xt @ sub.theta)
    rho = spearmanr(scores, drops)[0]
    elapsed = time.perf_counter() - start
    verdict("influence vs leave-one-out", stable and rho >= 0.8 and elapsed < 120,
            f"support stable={stable}, spearman {rho:.3f} (min 0.8), {elapsed:.2f}s")


def test_attribution_cost_scales_linearly(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(9)
    p = 1000
    theta = np.zeros(p)
    theta[rng.choice(p, 50, replace=False)] = rng.normal(size=50)
    model = L1LinearModel(theta, 0.01, LOGISTIC, 0.0)
    xt = rng.normal(size=p)
    sizes = [1000, 10000, 100000]
    l1_times = []
    for n in sizes:
        X = sp.random(n, p, density=0.05, format="csr", random_state=n)
        data = LabeledDataset(X, np.where(rng.random(n) < 0.5, 1.0, -1.0))
        l1_times.append(_best_time(lambda: L1Explainer(model, data).importances(xt), 7))
    nf_times = []
    for size in sizes:
        pair = EmbeddingPair(rng.normal(size=(size, 16)), rng.normal(size=(size // 2, 16)))
        nf_times.append(_best_time(lambda: normalize_factors(pair), 3))
    r2_l1, slope_l1 = _loglog_r2(sizes, l1_times)
    r2_nf, slope_nf = _loglog_r2(sizes, nf_times)
    elapsed = time.perf_counter() - start
    # a slope well below quadratic rules out superlinear growth
    ok = min(r2_l1, r2_nf) >= 0.95 and max(slope_l1, slope_nf) < 1.5 and elapsed < 300
    verdict("attribution cost scaling", ok,
            f"l1 query R2 {r2_l1:.3f} slope {slope_l1:.2f}; normalize R2 {r2_nf:.3f} "
            f"slope {slope_nf:.2f}; {elapsed:.1f}s")


def test_unit_suites(verdict):
    start = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", str(TESTS),
         "--ignore", str(TESTS / "test_acceptance.py")],
        capture_output=True, text=True, cwd=TESTS.parent,
    )
    elapsed = time.perf_counter() - start
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    verdict("unit suites and derivative checks", proc.returncode == 0 and elapsed < 60,
            f"{tail} ({elapsed:.1f}s)")
