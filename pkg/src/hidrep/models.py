"""Fitted-model containers and their versioned JSON documents."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .datasets import EmbeddingPair, InteractionSet, _text_stream
from .errors import InvalidInputError, ParseError
from .linalg import SvdTriple
from .losses import LossFunction, get_loss

FORMAT = "hidrep-model"
VERSION = 1


@dataclass(frozen=True)
class L1LinearModel:
    theta: np.ndarray
    lam: float
    loss: LossFunction
    kkt_residual: float
    n_iter: int = 0
    history: tuple = field(default=(), compare=False, repr=False)

    @property
    def support(self):
        return np.flatnonzero(self.theta)

    @property
    def dim(self):
        return self.theta.size

    def predict(self, X):
        """Scores ``<x_i, theta>`` for a CSR matrix, dense array or SparseVector."""
        if hasattr(X, "indices") and hasattr(X, "dim"):
            return float(np.dot(X.values, self.theta[X.indices]))
        return np.asarray(X @ self.theta).reshape(-1)


@dataclass(frozen=True)
class LowRankModel:
    """Nuclear-norm minimizer held as its SVD.

    ``observed`` is the completion training set; it is ``None`` for models
    fit on general matrix samples elsewhere.
    """

    svd: SvdTriple
    lam: float
    loss: LossFunction
    observed: InteractionSet | None = None
    converged_delta: float = float("nan")
    n_iter: int = 0
    history: tuple = field(default=(), compare=False, repr=False)

    @property
    def rank(self):
        return self.svd.rank

    def matrix(self):
        return self.svd.reconstruct()

    def predict(self, users, items):
        users = np.asarray(users)
        items = np.asarray(items)
        return np.einsum("ij,ij->i", self.svd.U[users] * self.svd.S, self.svd.V[items])


@dataclass(frozen=True)
class CheckpointTrace:
    """Embedding snapshots and the learning rate in force at each one."""

    embeddings: tuple
    learning_rates: tuple

    def __post_init__(self):
        if len(self.embeddings) != len(self.learning_rates):
            raise InvalidInputError("one learning rate per checkpoint is required")
        ks = {e.k for e in self.embeddings}
        if len(ks) > 1:
            raise InvalidInputError(f"inconsistent embedding dimension across checkpoints: {sorted(ks)}")

    def __len__(self):
        return len(self.embeddings)


@dataclass(frozen=True)
class MFModel:
    embeddings: EmbeddingPair
    loss: LossFunction
    trace: CheckpointTrace | None = None
    config: dict = field(default_factory=dict, compare=False)

    def predict(self, users, items):
        return self.embeddings.predict(np.asarray(users), np.asarray(items))


# --------------------------------------------------------------------------
# JSON documents
# --------------------------------------------------------------------------


def _arr(a):
    return np.asarray(a, dtype=np.float64).tolist()


def _interactions_doc(s):
    doc = {
        "n_users": s.n_users,
        "n_items": s.n_items,
        "users": s.users.tolist(),
        "items": s.items.tolist(),
        "ratings": _arr(s.ratings),
    }
    if s.user_ids is not None:
        doc["user_ids"] = s.user_ids.tolist()
    if s.item_ids is not None:
        doc["item_ids"] = s.item_ids.tolist()
    return doc


def _interactions_from(doc):
    return InteractionSet(
        doc["n_users"], doc["n_items"], doc["users"], doc["items"], doc["ratings"],
        None, doc.get("user_ids"), doc.get("item_ids"),
    )


def _matrix_from(rows, ncols):
    M = np.asarray(rows, dtype=np.float64)
    return M if M.ndim == 2 else M.reshape(0, ncols)


def model_to_dict(model):
    if isinstance(model, L1LinearModel):
        return {
            "format": FORMAT,
            "version": VERSION,
            "family": "l1",
            "loss": model.loss.kind,
            "lambda": float(model.lam),
            "theta": _arr(model.theta),
            "diagnostics": {"kkt_residual": float(model.kkt_residual), "n_iter": int(model.n_iter)},
        }
    if isinstance(model, LowRankModel):
        doc = {
            "format": FORMAT,
            "version": VERSION,
            "family": "nuclear",
            "loss": model.loss.kind,
            "lambda": float(model.lam),
            "shape": list(model.svd.shape),
            "U": _arr(model.svd.U),
            "S": _arr(model.svd.S),
            "V": _arr(model.svd.V),
            "diagnostics": {"converged_delta": float(model.converged_delta), "n_iter": int(model.n_iter)},
        }
        if model.observed is not None:
            doc["observed"] = _interactions_doc(model.observed)
        return doc
    if isinstance(model, MFModel):
        doc = {
            "format": FORMAT,
            "version": VERSION,
            "family": "mf",
            "loss": model.loss.kind,
            "k": model.embeddings.k,
            "user_mat": _arr(model.embeddings.user_mat),
            "item_mat": _arr(model.embeddings.item_mat),
            "config": dict(model.config),
        }
        if model.trace is not None:
            doc["checkpoints"] = [
                {"lr": float(lr), "user_mat": _arr(e.user_mat), "item_mat": _arr(e.item_mat)}
                for e, lr in zip(model.trace.embeddings, model.trace.learning_rates)
            ]
        return doc
    raise InvalidInputError(f"cannot serialize {type(model).__name__}")


def model_from_dict(doc):
    if doc.get("format") != FORMAT:
        raise ParseError("not a hidrep model document")
    if doc.get("version") != VERSION:
        raise ParseError(f"unsupported model version {doc.get('version')!r}")
    loss = get_loss(doc["loss"])
    family = doc.get("family")
    if family == "l1":
        d = doc["diagnostics"]
        return L1LinearModel(
            np.asarray(doc["theta"], dtype=np.float64), doc["lambda"], loss,
            d["kkt_residual"], d["n_iter"],
        )
    if family == "nuclear":
        m, n = doc["shape"]
        S = np.asarray(doc["S"], dtype=np.float64)
        svd = SvdTriple(_matrix_from(doc["U"], S.size).reshape(m, S.size),
                        S, _matrix_from(doc["V"], S.size).reshape(n, S.size))
        obs = _interactions_from(doc["observed"]) if "observed" in doc else None
        d = doc["diagnostics"]
        return LowRankModel(svd, doc["lambda"], loss, obs, d["converged_delta"], d["n_iter"])
    if family == "mf":
        k = doc["k"]
        pair = EmbeddingPair(_matrix_from(doc["user_mat"], k), _matrix_from(doc["item_mat"], k))
        trace = None
        if "checkpoints" in doc:
            trace = CheckpointTrace(
                tuple(EmbeddingPair(_matrix_from(c["user_mat"], k), _matrix_from(c["item_mat"], k))
                      for c in doc["checkpoints"]),
                tuple(c["lr"] for c in doc["checkpoints"]),
            )
        return MFModel(pair, loss, trace, doc.get("config", {}))
    raise ParseError(f"unknown model family {family!r}")


def save_model(model, path):
    with _text_stream(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_model(path):
    with _text_stream(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid model JSON: {exc}") from None
    return model_from_dict(doc)
