"""Dataset containers, text-format parsers and preprocessing.

Supported on-disk formats:

* libsvm: ``<label> <idx>:<val> ...`` with 1-based, strictly increasing
  indices.
* MovieLens ``u.data``: ``<user>\\t<item>\\t<rating>\\t<timestamp>``.
* Embedding matrices: a ``<count> <k>`` header followed by ``count`` rows of
  ``k`` whitespace-separated reals.
* Id maps: ``<raw_id> <dense_id>`` per line.
"""

from __future__ import annotations

import contextlib
import io
import logging
import math
import os
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import InvalidInputError, ParseError
from .linalg import SparseVector

logger = logging.getLogger(__name__)


@contextlib.contextmanager
def _text_stream(src, mode="r"):
    if isinstance(src, (str, os.PathLike)):
        with open(src, mode, encoding="utf-8") as fh:
            yield fh
    else:
        yield src


def _fmt(x):
    # repr round-trips doubles exactly
    return repr(float(x))


# --------------------------------------------------------------------------
# labeled sparse data
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LabeledDataset:
    """``n`` sparse samples in R^p with real labels.

    Samples are held as the rows of a CSR matrix so that batched products
    stay O(nnz).
    """

    X: sp.csr_matrix
    y: np.ndarray

    def __post_init__(self):
        X = sp.csr_matrix(self.X, dtype=np.float64)
        X.sum_duplicates()
        X.sort_indices()
        X.eliminate_zeros()
        y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if X.shape[0] != y.size:
            raise InvalidInputError(f"{X.shape[0]} samples but {y.size} labels")
        if not (np.all(np.isfinite(X.data)) and np.all(np.isfinite(y))):
            raise InvalidInputError("dataset contains non-finite values")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @classmethod
    def from_samples(cls, samples, labels, dim=None):
        samples = list(samples)
        if dim is None:
            dims = {s.dim for s in samples}
            if len(dims) > 1:
                raise InvalidInputError(f"samples have differing dimensions {sorted(dims)}")
            dim = dims.pop() if dims else 0
        indptr = [0]
        indices, data = [], []
        for s in samples:
            if s.dim != dim:
                raise InvalidInputError(f"sample dimension {s.dim} != {dim}")
            indices.append(s.indices)
            data.append(s.values)
            indptr.append(indptr[-1] + s.nnz)
        idx = np.concatenate(indices) if indices else np.zeros(0, dtype=np.int64)
        val = np.concatenate(data) if data else np.zeros(0)
        X = sp.csr_matrix((val, idx, np.asarray(indptr)), shape=(len(samples), dim))
        return cls(X, labels)

    @classmethod
    def from_dense(cls, X, y):
        return cls(sp.csr_matrix(np.asarray(X, dtype=np.float64)), y)

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def dim(self):
        return self.X.shape[1]

    def sample(self, i):
        lo, hi = self.X.indptr[i], self.X.indptr[i + 1]
        return SparseVector(self.dim, self.X.indices[lo:hi], self.X.data[lo:hi])

    @property
    def samples(self):
        return [self.sample(i) for i in range(self.n)]

    @property
    def labels(self):
        return self.y

    def subset(self, keep):
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.flatnonzero(keep)
        return LabeledDataset(self.X[keep], self.y[keep])

    def __len__(self):
        return self.n


def parse_libsvm(stream, dim_hint=None):
    """Parse libsvm text into a :class:`LabeledDataset`.

    Indices are converted from 1-based to 0-based. The dimension is the
    largest index seen, or ``dim_hint`` when given (which must cover every
    index).
    """
    labels = []
    indptr = [0]
    indices, values = [], []
    max_index = 0
    with _text_stream(stream) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                labels.append(float(parts[0]))
            except ValueError:
                raise ParseError(f"bad label {parts[0]!r}", lineno) from None
            prev = 0
            for tok in parts[1:]:
                idx_s, sep, val_s = tok.partition(":")
                if not sep:
                    raise ParseError(f"expected idx:val, got {tok!r}", lineno)
                try:
                    idx = int(idx_s)
                    val = float(val_s)
                except ValueError:
                    raise ParseError(f"malformed feature {tok!r}", lineno) from None
                if idx < 1:
                    raise ParseError(f"indices are 1-based, got {idx}", lineno)
                if idx <= prev:
                    raise ParseError(f"indices must be strictly increasing ({prev} then {idx})", lineno)
                if not math.isfinite(val):
                    raise ParseError(f"non-finite value {val_s!r}", lineno)
                prev = idx
                if val != 0.0:
                    indices.append(idx - 1)
                    values.append(val)
            max_index = max(max_index, prev)
            indptr.append(len(indices))
    dim = max_index
    if dim_hint is not None:
        if dim_hint < max_index:
            raise ParseError(f"index {max_index} exceeds dim_hint {dim_hint}")
        dim = dim_hint
    X = sp.csr_matrix(
        (np.asarray(values, dtype=np.float64), np.asarray(indices, dtype=np.int64), np.asarray(indptr)),
        shape=(len(labels), dim),
    )
    return LabeledDataset(X, np.asarray(labels))


def serialize_libsvm(data, stream):
    with _text_stream(stream, "w") as fh:
        for i in range(data.n):
            s = data.sample(i)
            feats = " ".join(f"{j + 1}:{_fmt(v)}" for j, v in zip(s.indices, s.values))
            fh.write(f"{_fmt(data.y[i])} {feats}".rstrip() + "\n")


# --------------------------------------------------------------------------
# interaction data
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Interaction:
    user: int
    item: int
    rating: float
    timestamp: int | None = None


@dataclass(frozen=True)
class InteractionSet:
    """Observed (user, item, rating) triples over dense 0-based id spaces.

    ``user_ids`` / ``item_ids`` optionally hold the raw id for every dense
    index, which is what the id-map sidecar files persist.
    """

    n_users: int
    n_items: int
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray | None = None
    user_ids: np.ndarray | None = field(default=None, compare=False)
    item_ids: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        u = np.asarray(self.users, dtype=np.int64).reshape(-1)
        i = np.asarray(self.items, dtype=np.int64).reshape(-1)
        r = np.asarray(self.ratings, dtype=np.float64).reshape(-1)
        if not (u.size == i.size == r.size):
            raise InvalidInputError("users, items and ratings must have equal length")
        if u.size and (u.min() < 0 or u.max() >= self.n_users):
            raise InvalidInputError("user id out of range")
        if i.size and (i.min() < 0 or i.max() >= self.n_items):
            raise InvalidInputError("item id out of range")
        if not np.all(np.isfinite(r)):
            raise InvalidInputError("ratings must be finite")
        keys = u * self.n_items + i
        if np.unique(keys).size != keys.size:
            raise InvalidInputError("duplicate (user, item) pairs")
        object.__setattr__(self, "users", u)
        object.__setattr__(self, "items", i)
        object.__setattr__(self, "ratings", r)
        if self.timestamps is not None:
            t = np.asarray(self.timestamps, dtype=np.int64).reshape(-1)
            if t.size != u.size:
                raise InvalidInputError("timestamps length mismatch")
            object.__setattr__(self, "timestamps", t)
        for name, count in (("user_ids", self.n_users), ("item_ids", self.n_items)):
            ids = getattr(self, name)
            if ids is not None:
                ids = np.asarray(ids)
                if ids.size != count:
                    raise InvalidInputError(f"{name} must have {count} entries")
                object.__setattr__(self, name, ids)

    @classmethod
    def from_interactions(cls, interactions, n_users=None, n_items=None):
        rows = list(interactions)
        users = np.array([x.user for x in rows], dtype=np.int64)
        items = np.array([x.item for x in rows], dtype=np.int64)
        ratings = np.array([x.rating for x in rows], dtype=np.float64)
        ts = None
        if rows and all(x.timestamp is not None for x in rows):
            ts = np.array([x.timestamp for x in rows], dtype=np.int64)
        if n_users is None:
            n_users = int(users.max()) + 1 if rows else 0
        if n_items is None:
            n_items = int(items.max()) + 1 if rows else 0
        return cls(n_users, n_items, users, items, ratings, ts)

    def __len__(self):
        return int(self.users.size)

    @property
    def interactions(self):
        ts = self.timestamps
        return [
            Interaction(int(u), int(i), float(r), None if ts is None else int(ts[k]))
            for k, (u, i, r) in enumerate(zip(self.users, self.items, self.ratings))
        ]

    @cached_property
    def keys(self):
        """Linear pair keys ``user * n_items + item``."""
        return self.users * self.n_items + self.items

    @cached_property
    def _index(self):
        return {int(k): n for n, k in enumerate(self.keys)}

    def position(self, user, item):
        """Row position of the pair, or ``None`` if unobserved."""
        return self._index.get(int(user) * self.n_items + int(item))

    def __contains__(self, pair):
        return self.position(*pair) is not None

    def rating(self, user, item):
        pos = self.position(user, item)
        if pos is None:
            raise InvalidInputError(f"pair ({user}, {item}) is not observed")
        return float(self.ratings[pos])

    def subset(self, keep):
        """Rows selected by a boolean mask or index array; id spaces kept."""
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.flatnonzero(keep)
        return InteractionSet(
            self.n_users,
            self.n_items,
            self.users[keep],
            self.items[keep],
            self.ratings[keep],
            None if self.timestamps is None else self.timestamps[keep],
            self.user_ids,
            self.item_ids,
        )

    def with_ratings(self, ratings):
        return InteractionSet(
            self.n_users, self.n_items, self.users, self.items, ratings,
            self.timestamps, self.user_ids, self.item_ids,
        )

    def concat(self, other):
        if (self.n_users, self.n_items) != (other.n_users, other.n_items):
            raise InvalidInputError("id spaces differ")
        ts = None
        if self.timestamps is not None and other.timestamps is not None:
            ts = np.concatenate([self.timestamps, other.timestamps])
        return InteractionSet(
            self.n_users,
            self.n_items,
            np.concatenate([self.users, other.users]),
            np.concatenate([self.items, other.items]),
            np.concatenate([self.ratings, other.ratings]),
            ts,
            self.user_ids,
            self.item_ids,
        )

    def to_dense(self, fill=np.nan):
        Y = np.full((self.n_users, self.n_items), fill, dtype=np.float64)
        Y[self.users, self.items] = self.ratings
        return Y

    def mask(self):
        M = np.zeros((self.n_users, self.n_items), dtype=bool)
        M[self.users, self.items] = True
        return M

    def user_counts(self):
        return np.bincount(self.users, minlength=self.n_users)

    def item_counts(self):
        return np.bincount(self.items, minlength=self.n_items)

    def raw_user(self, dense):
        return dense if self.user_ids is None else self.user_ids[dense].item()

    def raw_item(self, dense):
        return dense if self.item_ids is None else self.item_ids[dense].item()

    def dense_user(self, raw):
        return _lookup_dense(self.user_ids, raw, self.n_users, "user")

    def dense_item(self, raw):
        return _lookup_dense(self.item_ids, raw, self.n_items, "item")


def _lookup_dense(ids, raw, count, what):
    if ids is None:
        if not 0 <= int(raw) < count:
            raise InvalidInputError(f"{what} {raw} out of range")
        return int(raw)
    hits = np.flatnonzero(ids == int(raw))
    if hits.size == 0:
        raise InvalidInputError(f"unknown {what} id {raw}")
    return int(hits[0])


def _densify(raw):
    uniq, dense = np.unique(raw, return_inverse=True)
    return uniq, dense.astype(np.int64)


def parse_movielens(stream):
    """Parse MovieLens ``u.data`` lines.

    Raw user and item ids are remapped to dense 0-based ids in ascending raw
    order; the raw ids are kept on the result for the id-map sidecar.
    Lines may carry 3 fields (no timestamp) or 4.
    """
    users, items, ratings, stamps = [], [], [], []
    seen = set()
    have_ts = True
    with _text_stream(stream) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\r\n").split("\t")
            if len(parts) == 1:
                parts = line.split()
            if len(parts) not in (3, 4):
                raise ParseError(f"expected 3 or 4 fields, got {len(parts)}", lineno)
            try:
                u, i = int(parts[0]), int(parts[1])
                r = float(parts[2])
                ts = int(parts[3]) if len(parts) == 4 else None
            except ValueError:
                raise ParseError(f"non-numeric field in {line.strip()!r}", lineno) from None
            if not math.isfinite(r):
                raise ParseError("non-finite rating", lineno)
            if (u, i) in seen:
                raise ParseError(f"duplicate (user, item) pair ({u}, {i})", lineno)
            seen.add((u, i))
            users.append(u)
            items.append(i)
            ratings.append(r)
            if ts is None:
                have_ts = False
            stamps.append(ts)
    user_ids, du = _densify(np.asarray(users, dtype=np.int64))
    item_ids, di = _densify(np.asarray(items, dtype=np.int64))
    ts_arr = np.asarray(stamps, dtype=np.int64) if (have_ts and stamps) else None
    return InteractionSet(
        user_ids.size, item_ids.size, du, di, np.asarray(ratings, dtype=np.float64),
        ts_arr, user_ids, item_ids,
    )


def serialize_movielens(s, stream):
    """Write ``s`` in ``u.data`` layout using raw ids when available."""
    with _text_stream(stream, "w") as fh:
        for k in range(len(s)):
            u = s.raw_user(int(s.users[k]))
            i = s.raw_item(int(s.items[k]))
            r = float(s.ratings[k])
            r_s = str(int(r)) if r.is_integer() else _fmt(r)
            fields = [str(u), str(i), r_s]
            if s.timestamps is not None:
                fields.append(str(int(s.timestamps[k])))
            fh.write("\t".join(fields) + "\n")


def write_id_map(ids, stream):
    with _text_stream(stream, "w") as fh:
        for dense, raw in enumerate(ids):
            fh.write(f"{raw} {dense}\n")


def read_id_map(stream):
    """Read an id-map sidecar into an array indexed by dense id."""
    pairs = []
    with _text_stream(stream) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ParseError("expected '<raw_id> <dense_id>'", lineno)
            try:
                pairs.append((int(parts[1]), int(parts[0])))
            except ValueError:
                raise ParseError("non-integer id", lineno) from None
    pairs.sort()
    if [d for d, _ in pairs] != list(range(len(pairs))):
        raise ParseError("dense ids must be exactly 0..count-1")
    return np.asarray([r for _, r in pairs], dtype=np.int64)


def normalize_ratings(s, lo, hi, target=(-1.0, 1.0)):
    """Affinely map ratings from the raw range ``[lo, hi]`` onto ``target``.

    With the default target this is ``r -> 2 (r - lo) / (hi - lo) - 1``.
    """
    if not lo < hi:
        raise InvalidInputError("raw range requires lo < hi")
    t_lo, t_hi = target
    if not t_lo < t_hi:
        raise InvalidInputError("target range requires lo < hi")
    r = s.ratings
    if r.size and (r.min() < lo or r.max() > hi):
        raise InvalidInputError(f"rating outside declared range [{lo}, {hi}]")
    scaled = (r - lo) / (hi - lo) * (t_hi - t_lo) + t_lo
    return s.with_ratings(scaled)


def split_per_user_holdout(s, per_user=1, seed=0):
    """Hold out ``per_user`` interactions per user for validation and test.

    Each user's interactions are permuted with a generator seeded by
    ``seed``; the first ``per_user`` go to validation, the next ``per_user``
    to test, the rest to train.
    """
    if per_user < 0:
        raise InvalidInputError("per_user must be non-negative")
    if per_user == 0:
        empty = s.subset(np.zeros(len(s), dtype=bool))
        return s, empty, empty
    rng = np.random.default_rng(seed)
    order = np.argsort(s.users, kind="stable")
    bounds = np.searchsorted(s.users[order], np.arange(s.n_users + 1))
    role = np.zeros(len(s), dtype=np.int8)
    need = 2 * per_user + 1
    for u in range(s.n_users):
        rows = order[bounds[u]:bounds[u + 1]]
        if rows.size == 0:
            continue
        if rows.size < need:
            raise InvalidInputError(
                f"user {s.raw_user(u)} has {rows.size} interactions; holdout needs {need}"
            )
        perm = rows[rng.permutation(rows.size)]
        role[perm[:per_user]] = 1
        role[perm[per_user:2 * per_user]] = 2
    return s.subset(role == 0), s.subset(role == 1), s.subset(role == 2)


def random_split(s, test_fraction=0.5, seed=0):
    """Uniform random split of interactions into (train, test)."""
    if not 0.0 <= test_fraction <= 1.0:
        raise InvalidInputError("test_fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    n_test = int(round(test_fraction * len(s)))
    is_test = np.zeros(len(s), dtype=bool)
    is_test[rng.permutation(len(s))[:n_test]] = True
    return s.subset(~is_test), s.subset(is_test)


def filter_min_interactions(s, min_count):
    """Drop users and items with fewer than ``min_count`` interactions.

    Removal is repeated until no user or item falls below the threshold;
    surviving ids are re-densified (raw ids follow along).
    """
    if min_count < 0:
        raise InvalidInputError("min_count must be non-negative")
    keep = np.ones(len(s), dtype=bool)
    while True:
        uc = np.bincount(s.users[keep], minlength=s.n_users)
        ic = np.bincount(s.items[keep], minlength=s.n_items)
        bad = keep & ((uc[s.users] < min_count) | (ic[s.items] < min_count))
        if not bad.any():
            break
        keep &= ~bad
    users, items = s.users[keep], s.items[keep]
    u_keep = np.unique(users)
    i_keep = np.unique(items)
    if u_keep.size == s.n_users and i_keep.size == s.n_items:
        return s.subset(keep)
    return InteractionSet(
        int(u_keep.size),
        int(i_keep.size),
        np.searchsorted(u_keep, users),
        np.searchsorted(i_keep, items),
        s.ratings[keep],
        None if s.timestamps is None else s.timestamps[keep],
        u_keep if s.user_ids is None else s.user_ids[u_keep],
        i_keep if s.item_ids is None else s.item_ids[i_keep],
    )


def binarize(s, threshold):
    """Keep interactions rated at least ``threshold`` and set them to 1."""
    kept = s.subset(s.ratings >= threshold)
    return kept.with_ratings(np.ones(len(kept)))


def dataset_stats(s):
    cells = s.n_users * s.n_items
    return {
        "users": s.n_users,
        "items": s.n_items,
        "interactions": len(s),
        "density_percent": 100.0 * len(s) / cells if cells else 0.0,
    }


# --------------------------------------------------------------------------
# embeddings
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EmbeddingPair:
    """User and item embedding matrices sharing the inner dimension ``k``."""

    user_mat: np.ndarray
    item_mat: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        U = np.asarray(self.user_mat, dtype=np.float64)
        V = np.asarray(self.item_mat, dtype=np.float64)
        if U.ndim != 2 or V.ndim != 2:
            raise InvalidInputError("embedding matrices must be 2-dimensional")
        if U.shape[1] != V.shape[1]:
            raise InvalidInputError(f"inner dimensions differ: {U.shape[1]} vs {V.shape[1]}")
        if not (np.all(np.isfinite(U)) and np.all(np.isfinite(V))):
            raise InvalidInputError("embeddings contain non-finite entries")
        object.__setattr__(self, "user_mat", U)
        object.__setattr__(self, "item_mat", V)

    @property
    def k(self):
        return self.user_mat.shape[1]

    def predict(self, users, items):
        return np.einsum("ij,ij->i", self.user_mat[users], self.item_mat[items])


def read_matrix(stream):
    """Read one embedding matrix file (``<count> <k>`` header, then rows)."""
    with _text_stream(stream) as fh:
        lines = [(n, ln) for n, ln in enumerate(fh, start=1) if ln.strip()]
    if not lines:
        raise ParseError("empty embedding file")
    lineno, header = lines[0]
    try:
        count, k = (int(t) for t in header.split())
    except ValueError:
        raise ParseError("header must be '<count> <k>'", lineno) from None
    rows = lines[1:]
    if len(rows) != count:
        raise ParseError(f"header declares {count} rows, found {len(rows)}")
    M = np.zeros((count, k))
    for r, (lineno, ln) in enumerate(rows):
        toks = ln.split()
        if len(toks) != k:
            raise ParseError(f"expected {k} values, got {len(toks)}", lineno)
        try:
            vals = [float(t) for t in toks]
        except ValueError:
            raise ParseError("non-numeric entry", lineno) from None
        if not all(math.isfinite(v) for v in vals):
            raise ParseError("non-finite entry", lineno)
        M[r] = vals
    return M


def write_matrix(M, stream):
    M = np.asarray(M, dtype=np.float64)
    with _text_stream(stream, "w") as fh:
        fh.write(f"{M.shape[0]} {M.shape[1]}\n")
        for row in M:
            fh.write(" ".join(_fmt(v) for v in row) + "\n")


def load_embeddings(user_file, item_file):
    U = read_matrix(user_file)
    V = read_matrix(item_file)
    if U.shape[1] != V.shape[1]:
        raise InvalidInputError(f"user k={U.shape[1]} differs from item k={V.shape[1]}")
    return EmbeddingPair(U, V, normalized=False)


def save_embeddings(pair, user_file, item_file):
    write_matrix(pair.user_mat, user_file)
    write_matrix(pair.item_mat, item_file)


def from_text(text):
    """Wrap a string as a text stream (handy for tests and small inputs)."""
    return io.StringIO(text)
