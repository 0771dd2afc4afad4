"""Command-line front end.

Every command accepts ``--config run.json``; explicit flags override config
keys, and unknown keys are rejected. Exit codes: 0 success, 1 runtime
failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import zlib

import numpy as np

from . import __version__
from .baselines import InfluenceWorkspace, l2_representer, tracin_cp_vector
from .datasets import (
    EmbeddingPair,
    binarize,
    dataset_stats,
    filter_min_interactions,
    load_embeddings,
    normalize_ratings,
    parse_libsvm,
    parse_movielens,
    random_split,
    save_embeddings,
)
from .errors import ConvergenceError, InvalidInputError
from .evaluation import (
    AuditConfig,
    CaseDeletionConfig,
    L1Family,
    MFFamily,
    NuclearFamily,
    negative_audit_experiment,
    run_case_deletion,
)
from .models import L1LinearModel, LowRankModel, MFModel, load_model, save_model
from .representers import CFExplainer, L1Explainer, nuclear_attribute, normalize_factors, sort_records
from .solvers import NegConfig, fit_l1, fit_mf_sgd, soft_impute

logger = logging.getLogger("hidrep")


class UsageError(Exception):
    """Bad flags or config; exits with status 2."""


def substream(seed, name):
    """Deterministic child seed of ``seed`` for the named purpose."""
    state = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1)
    return int(state[0])


# --------------------------------------------------------------------------
# config handling
# --------------------------------------------------------------------------

DEFAULTS = {
    "train": {
        "family": None, "data": None, "out": None, "loss": None, "lambda": None, "lambda_n": None,
        "tol": None, "max_iter": None, "k": 8, "lr": 0.05, "epochs": 50, "batch": 256,
        "optimizer": "sgd", "checkpoints": None, "implicit": False, "neg_weight": 0.05,
        "max_rank": None, "rating_range": None, "seed": 0,
    },
    "explain": {
        "model": None, "data": None, "test": None, "test_index": None, "test_user": None,
        "test_item": None, "method": "hidrep", "side": "column", "top": None, "out": None,
        "rating_range": None, "damping": "auto",
    },
    "evaluate": {
        "family": None, "data": None, "test": None, "out": None, "curves": None, "method": "hidrep",
        "ks": None, "fractions": None, "trials": 5, "tests_per_trial": 10, "loss": None,
        "lambda": None, "lambda_n": None, "tol": None, "max_iter": None, "k": 8, "lr": 0.05,
        "epochs": 50, "batch": 256, "optimizer": "sgd", "max_rank": None, "rating_range": None,
        "seed": 0, "threads": None,
    },
    "audit-negatives": {
        "data": None, "out": None, "threshold": None, "test_fraction": 0.5, "fractions": [1, 3, 5],
        "method": "hidrep", "order": "least", "k": 8, "lr": 20.0, "epochs": 200, "batch": 512,
        "neg_weight": 0.05, "recall_k": 20, "seed": 0,
    },
    "normalize-factors": {
        "user_emb": None, "item_emb": None, "out_user": None, "out_item": None, "method": "exact",
        "seed": 0,
    },
    "datasets info": {
        "path": None, "format": "movielens", "threshold": None, "min_count": None,
    },
}

INPUTS = {"data", "test", "model", "user_emb", "item_emb", "path"}
OUTPUTS = {"out", "curves", "out_user", "out_item"}


def resolve(command, args):
    """Merge defaults, the config file and explicit flags (flags win)."""
    defaults = DEFAULTS[command]
    conf = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                conf = json.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from None
        if not isinstance(conf, dict):
            raise UsageError("config must be a JSON object")
        conf = {k.replace("-", "_"): v for k, v in conf.items()}
        unknown = sorted(set(conf) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    out = dict(defaults)
    out.update(conf)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None and val is not False:
            out[key] = val
    _validate_paths(out)
    return out


def _validate_paths(cfg):
    for key in INPUTS:
        path = cfg.get(key)
        if path is not None and not os.path.isfile(path):
            raise UsageError(f"--{key.replace('_', '-')}: no such file: {path}")
    for key in OUTPUTS:
        path = cfg.get(key)
        if path is not None and path != "-":
            parent = os.path.dirname(os.path.abspath(path))
            if not os.path.isdir(parent):
                raise UsageError(f"--{key.replace('_', '-')}: directory does not exist: {parent}")


def require(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _lambda(cfg, n):
    if (cfg["lambda"] is None) == (cfg["lambda_n"] is None):
        raise UsageError("give exactly one of --lambda and --lambda-n")
    return float(cfg["lambda"]) if cfg["lambda"] is not None else float(cfg["lambda_n"]) / n


def load_ratings(cfg, path_key="data"):
    data = parse_movielens(cfg[path_key])
    if cfg.get("rating_range") is not None:
        lo, hi = cfg["rating_range"]
        data = normalize_ratings(data, lo, hi)
    return data


def _open_out(path):
    if path is None or path == "-":
        return sys.stdout, False
    return open(path, "w", encoding="utf-8", newline=""), True


def _write_json(doc, path):
    fh, close = _open_out(path)
    try:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    finally:
        if close:
            fh.close()


def _num(x):
    return "" if x is None else repr(float(x))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_train(cfg):
    require(cfg, "family", "data", "out")
    family = cfg["family"]
    try:
        if family == "l1":
            data = parse_libsvm(cfg["data"])
            lam = _lambda(cfg, data.n)
            model = fit_l1(data, cfg["loss"] or "logistic", lam, tol=cfg["tol"] or 1e-8,
                           max_iter=cfg["max_iter"] or 20000)
            print(f"kkt_residual {model.kkt_residual:.3e} iterations {model.n_iter} "
                  f"support {model.support.size}", file=sys.stderr)
        elif family == "nuclear":
            data = load_ratings(cfg)
            lam = _lambda(cfg, len(data))
            model = soft_impute(data, lam, cfg["max_rank"], tol=cfg["tol"] or 1e-6,
                                max_iter=cfg["max_iter"] or 1000)
            print(f"relative_change {model.converged_delta:.3e} iterations {model.n_iter} "
                  f"rank {model.rank}", file=sys.stderr)
        elif family == "mf":
            data = load_ratings(cfg)
            neg = NegConfig(cfg["neg_weight"]) if cfg["implicit"] else None
            loss = cfg["loss"] or ("bce" if cfg["implicit"] else "squared")
            model = fit_mf_sgd(
                data, cfg["k"], cfg["lr"], cfg["epochs"], cfg["batch"], loss, neg,
                substream(cfg["seed"], "train"), cfg["checkpoints"], None, cfg["optimizer"],
            )
            pred = model.predict(data.users, data.items)
            print(f"train_loss {float(np.mean(model.loss.value(data.ratings, pred))):.6f}", file=sys.stderr)
        else:
            raise UsageError(f"unknown family {family!r}")
    except ConvergenceError as exc:
        print(f"did not converge: {exc} (residual {exc.residual:.3e})", file=sys.stderr)
        return 1
    save_model(model, cfg["out"])
    return 0


L1_HEADER = ["index", "label", "global", "local", "importance"]
CF_HEADER = ["side", "train_user", "train_item", "observed_rating", "global", "local", "importance"]


def _top(rows, top):
    if top is None:
        return rows
    if top < 0:
        raise UsageError("--top must be non-negative")
    return rows[:top]


def _l1_rows(model, data, x, method, damping):
    if method == "hidrep":
        recs = L1Explainer(model, data).explain(x)
        return [[r.train_ref, data.y[r.train_ref], r.global_score, r.local_score, r.importance]
                for r in sort_records(recs)]
    if method == "l2":
        t = data.X @ model.theta
        glob = -model.loss.derivative(data.y, t)
        scores = l2_representer(model, data, x)
        loc = np.divide(scores, glob, out=np.zeros_like(scores), where=glob != 0)
        order = np.lexsort((np.arange(data.n), -np.abs(scores)))
        return [[int(i), data.y[i], glob[i], loc[i], scores[i]] for i in order]
    if method == "influence":
        ws = InfluenceWorkspace.build(model, data, damping)
        scores = ws.scores(x)
        order = np.lexsort((np.arange(data.n), -np.abs(scores)))
        return [[int(i), data.y[i], None, None, scores[i]] for i in order]
    raise UsageError(f"method {method!r} is not available for l1 models")


def _cf_test_point(cfg, data):
    require(cfg, "test_user", "test_item")
    try:
        return data.dense_user(cfg["test_user"]), data.dense_item(cfg["test_item"])
    except InvalidInputError as exc:
        raise UsageError(str(exc)) from None


def _cf_rows(model, data, pt, method):
    raw_u = data.user_ids if data.user_ids is not None else np.arange(data.n_users)
    raw_i = data.item_ids if data.item_ids is not None else np.arange(data.n_items)

    def row(side, u, i, g, l, imp):
        return [side, int(raw_u[u]), int(raw_i[i]), data.rating(u, i), g, l, imp]

    if method == "hidrep":
        recs = CFExplainer(normalize_factors(model.embeddings), model.loss, data).explain(pt)
        return [row(r.side, *r.train_ref, r.global_score, r.local_score, r.importance) for r in recs]
    if method == "tracin":
        if model.trace is None:
            raise UsageError("tracin needs a model trained with --checkpoints")
        scores = tracin_cp_vector(model.trace, model.loss, data, pt)
        keep = np.flatnonzero((data.users == pt[0]) | (data.items == pt[1]))
        keep = keep[np.lexsort((keep, -np.abs(scores[keep])))]
        return [row("na", data.users[r], data.items[r], None, None, scores[r]) for r in keep]
    raise UsageError(
        f"method {method!r} is not applicable to matrix factorization models "
        "(two separate encoders); use hidrep or tracin"
    )


def cmd_explain(cfg):
    require(cfg, "model", "data")
    model = load_model(cfg["model"])
    method = cfg["method"]
    if isinstance(model, L1LinearModel):
        require(cfg, "test", "test_index")
        data = parse_libsvm(cfg["data"], dim_hint=model.dim)
        test = parse_libsvm(cfg["test"], dim_hint=model.dim)
        if not 0 <= cfg["test_index"] < test.n:
            raise UsageError(f"--test-index out of range [0, {test.n})")
        header = L1_HEADER
        rows = _l1_rows(model, data, test.sample(cfg["test_index"]), method, cfg["damping"])
    elif isinstance(model, LowRankModel):
        data = load_ratings(cfg)
        if method != "hidrep":
            raise UsageError(f"method {method!r} is not available for nuclear-norm models")
        pt = _cf_test_point(cfg, data)
        model = LowRankModel(model.svd, model.lam, model.loss, data)
        recs = sort_records(nuclear_attribute(model, pt, cfg["side"]))
        header = L1_HEADER
        rows = [[data.position(*r.train_ref), data.rating(*r.train_ref), r.global_score, r.local_score,
                 r.importance] for r in recs if r.importance != 0.0]
    elif isinstance(model, MFModel):
        data = load_ratings(cfg)
        pt = _cf_test_point(cfg, data)
        header = CF_HEADER
        rows = _cf_rows(model, data, pt, method)
    else:
        raise UsageError("unsupported model file")
    rows = _top(rows, cfg["top"])
    if method != "hidrep":
        header = header + ["method"]
        rows = [r + [method] for r in rows]
    fh, close = _open_out(cfg["out"])
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_num(v) if isinstance(v, (float, np.floating)) or v is None else v for v in r])
    finally:
        if close:
            fh.close()
    return 0


def _family(cfg):
    fam = cfg["family"]
    if fam == "l1":
        train = parse_libsvm(cfg["data"])
        test = parse_libsvm(cfg["test"], dim_hint=train.dim)
        if (cfg["lambda"] is None) == (cfg["lambda_n"] is None):
            raise UsageError("give exactly one of --lambda and --lambda-n")
        family = L1Family(train, test, cfg["loss"] or "logistic", lam=cfg["lambda"], lam_n=cfg["lambda_n"],
                          tol=cfg["tol"] or 1e-8, max_iter=cfg["max_iter"] or 20000)
        if cfg["fractions"] is not None:
            return family, family.schedule([f / 100.0 for f in cfg["fractions"]])
        return family, cfg["ks"] or family.schedule([0.01, 0.02, 0.03, 0.04, 0.05])
    train = load_ratings(cfg)
    test = parse_movielens(cfg["test"])
    if cfg.get("rating_range") is not None:
        test = normalize_ratings(test, *cfg["rating_range"])
    users = np.array([train.dense_user(test.raw_user(u)) for u in test.users.tolist()], dtype=np.int64)
    items = np.array([train.dense_item(test.raw_item(i)) for i in test.items.tolist()], dtype=np.int64)
    test = type(train)(train.n_users, train.n_items, users, items, test.ratings)
    if fam == "mf":
        family = MFFamily(train, test, cfg["k"], cfg["lr"], cfg["epochs"], cfg["batch"],
                          cfg["loss"] or "squared", cfg["optimizer"])
    elif fam == "nuclear":
        _lambda(cfg, len(train))
        family = NuclearFamily(train, test, cfg["lambda"], cfg["lambda_n"], cfg["max_rank"], cfg["tol"] or 1e-6,
                               cfg["max_iter"] or 1000)
    else:
        raise UsageError(f"unknown family {fam!r}")
    return family, cfg["ks"] or [5, 10, 15]


def cmd_evaluate(cfg):
    require(cfg, "family", "data", "test", "out")
    family, ks = _family(cfg)
    threads = cfg["threads"] or os.cpu_count() or 1
    if cfg["method"] not in family.methods:
        raise UsageError(f"method {cfg['method']!r} is not available for family {family.name!r}")
    config = CaseDeletionConfig(cfg["method"], tuple(int(k) for k in ks), int(cfg["trials"]),
                                int(cfg["tests_per_trial"]), substream(cfg["seed"], "evaluate"),
                                workers=int(threads))
    reports = run_case_deletion(config, family)
    doc = {"ks": list(config.ks), "reports": [reports[s].to_dict() for s in config.signs]}
    _write_json(doc, cfg["out"])
    if cfg["curves"]:
        with open(cfg["curves"], "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sign", "test_point", "k", "delta"])
            for s in config.signs:
                for c in reports[s].curves:
                    tp = c.test_point if isinstance(c.test_point, tuple) else "sample"
                    for k, d in zip(c.ks, c.deltas):
                        w.writerow([s, " ".join(map(str, tp)) if isinstance(tp, tuple) else tp, k, _num(d)])
    for s in config.signs:
        print(reports[s].summary_line())
    return 0


def cmd_audit_negatives(cfg):
    require(cfg, "data", "out")
    data = parse_movielens(cfg["data"])
    if cfg["threshold"] is not None:
        data = binarize(data, cfg["threshold"])
    else:
        data = data.with_ratings(np.ones(len(data)))
    train, test = random_split(data, cfg["test_fraction"], substream(cfg["seed"], "split"))
    config = AuditConfig(
        method=cfg["method"], fractions=tuple(p / 100.0 for p in cfg["fractions"]), order=cfg["order"],
        k=cfg["k"], lr=cfg["lr"], epochs=cfg["epochs"], batch=cfg["batch"], neg_weight=cfg["neg_weight"],
        seed=substream(cfg["seed"], "audit"), recall_k=cfg["recall_k"],
    )
    report = negative_audit_experiment(train, test, config)
    _write_json(report, cfg["out"])
    for row in report["rows"]:
        print(f"p={100 * row['fraction']:g}% hits {row['false_negatives_hit']} "
              f"recall@{config.recall_k} delta {row['recall_delta']:+.6f}")
    return 0


def cmd_normalize_factors(cfg):
    require(cfg, "user_emb", "item_emb", "out_user", "out_item")
    pair = load_embeddings(cfg["user_emb"], cfg["item_emb"])
    norm = normalize_factors(pair, cfg["method"], substream(cfg["seed"], "normalize"))
    save_embeddings(EmbeddingPair(norm.u_tilde, norm.v_tilde, True), cfg["out_user"], cfg["out_item"])
    print("sigma " + " ".join(repr(float(s)) for s in norm.sigma))
    return 0


def cmd_datasets_info(cfg):
    require(cfg, "path")
    if cfg["format"] == "libsvm":
        data = parse_libsvm(cfg["path"])
        labels, counts = np.unique(data.y, return_counts=True)
        stats = {"samples": data.n, "features": data.dim, "nonzeros": int(data.X.nnz),
                 "labels": {repr(float(l)): int(c) for l, c in zip(labels, counts)}}
    else:
        data = parse_movielens(cfg["path"])
        if cfg["threshold"] is not None:
            data = binarize(data, cfg["threshold"])
        if cfg["min_count"] is not None:
            data = filter_min_interactions(data, cfg["min_count"])
        stats = dataset_stats(data)
    _write_json(stats, None)
    return 0


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def _ints(text):
    return [int(t) for t in text.split(",") if t]


def _floats(text):
    return [float(t) for t in text.split(",") if t]


def _checkpoints(text):
    return text if text == "every" else _ints(text)


def _add_lambda(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--lambda", dest="lambda", type=float, help="regularization strength")
    g.add_argument("--lambda-n", dest="lambda_n", type=float, help="n times lambda")


def _add_mf(p):
    p.add_argument("--k", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--optimizer", choices=["sgd", "adagrad"])


def build_parser():
    parser = argparse.ArgumentParser(prog="hidrep", description="Representer-point explanations.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def cmd(name, **kw):
        p = sub.add_parser(name, **kw)
        p.add_argument("--config", help="JSON run config; flags override its keys")
        p.add_argument("--seed", type=int)
        return p

    p = cmd("train", help="fit a model and write its JSON file")
    p.add_argument("--family", choices=["l1", "nuclear", "mf"])
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--loss", choices=["squared", "logistic", "bce"])
    _add_lambda(p)
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--max-rank", type=int)
    _add_mf(p)
    p.add_argument("--checkpoints", type=_checkpoints, help="'every' or comma-separated epochs")
    p.add_argument("--implicit", action="store_true", help="treat all unobserved pairs as weighted negatives")
    p.add_argument("--neg-weight", type=float)
    p.add_argument("--rating-range", type=float, nargs=2, metavar=("LO", "HI"))

    p = cmd("explain", help="attribution CSV for one test point")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--test")
    p.add_argument("--test-index", type=int)
    p.add_argument("--test-user", type=int)
    p.add_argument("--test-item", type=int)
    p.add_argument("--method", choices=["hidrep", "l2", "influence", "tracin"])
    p.add_argument("--side", choices=["column", "row", "average"])
    p.add_argument("--top", type=int)
    p.add_argument("--out")
    p.add_argument("--rating-range", type=float, nargs=2, metavar=("LO", "HI"))

    p = cmd("evaluate", help="case-deletion evaluation")
    p.add_argument("--family", choices=["l1", "nuclear", "mf"])
    p.add_argument("--data")
    p.add_argument("--test")
    p.add_argument("--out")
    p.add_argument("--curves")
    p.add_argument("--method", choices=["hidrep", "l2", "influence", "random", "tracin"])
    p.add_argument("--ks", type=_ints)
    p.add_argument("--fractions", type=_floats, help="percent of the training set, l1 only")
    p.add_argument("--trials", type=int)
    p.add_argument("--tests-per-trial", type=int)
    p.add_argument("--loss", choices=["squared", "logistic", "bce"])
    _add_lambda(p)
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--max-rank", type=int)
    _add_mf(p)
    p.add_argument("--rating-range", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--threads", type=int)

    p = cmd("audit-negatives", help="remove suspected false negatives and retrain")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--threshold", type=float, help="binarize ratings at this value")
    p.add_argument("--test-fraction", type=float)
    p.add_argument("--fractions", type=_floats, help="percent of negatives to remove")
    p.add_argument("--method", choices=["hidrep", "loss", "random"])
    p.add_argument("--order", choices=["least", "largest"])
    _add_mf(p)
    p.add_argument("--neg-weight", type=float)
    p.add_argument("--recall-k", type=int)

    p = cmd("normalize-factors", help="rebalance embedding matrices")
    p.add_argument("--user-emb")
    p.add_argument("--item-emb")
    p.add_argument("--out-user")
    p.add_argument("--out-item")
    p.add_argument("--method", choices=["exact", "randomized"])

    p = sub.add_parser("datasets", help="dataset utilities")
    dsub = p.add_subparsers(dest="dataset_command", required=True)
    q = dsub.add_parser("info", help="print dataset statistics")
    q.add_argument("path")
    q.add_argument("--config")
    q.add_argument("--format", choices=["movielens", "libsvm"])
    q.add_argument("--threshold", type=float)
    q.add_argument("--min-count", type=int)
    return parser


COMMANDS = {
    "train": cmd_train,
    "explain": cmd_explain,
    "evaluate": cmd_evaluate,
    "audit-negatives": cmd_audit_negatives,
    "normalize-factors": cmd_normalize_factors,
    "datasets info": cmd_datasets_info,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    name = args.command if args.command != "datasets" else "datasets " + args.dataset_command
    try:
        cfg = resolve(name, args)
        return COMMANDS[name](cfg)
    except UsageError as exc:
        print(f"hidrep {name}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        if args.verbose:
            logger.exception("command failed")
        print(f"hidrep {name}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
