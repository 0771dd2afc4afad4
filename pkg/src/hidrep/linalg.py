"""Dense and sparse linear-algebra primitives.

Matrices are plain ``numpy`` arrays. SVD results are returned as
:class:`SvdTriple` with the convention ``M ~= U @ diag(S) @ V.T`` and
singular values sorted in non-increasing order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

DEFAULT_RANK_TOL = 1e-12


@dataclass(frozen=True)
class SparseVector:
    """A vector in R^dim stored as strictly increasing (index, value) pairs."""

    dim: int
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        val = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if idx.shape != val.shape:
            raise InvalidInputError("indices and values must have equal length")
        if self.dim < 0:
            raise InvalidInputError("dimension must be non-negative")
        if idx.size:
            if np.any(np.diff(idx) <= 0):
                raise InvalidInputError("indices must be strictly increasing")
            if idx[0] < 0 or idx[-1] >= self.dim:
                raise InvalidInputError(f"index out of range for dimension {self.dim}")
        if not np.all(np.isfinite(val)):
            raise InvalidInputError("sparse vector values must be finite")
        # explicit zeros are dropped so the stored support is the true support
        keep = val != 0.0
        object.__setattr__(self, "indices", idx[keep])
        object.__setattr__(self, "values", val[keep])

    @classmethod
    def from_dict(cls, entries, dim):
        items = sorted(entries.items())
        return cls(dim, [i for i, _ in items], [v for _, v in items])

    @classmethod
    def from_dense(cls, x):
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        nz = np.flatnonzero(x)
        return cls(x.size, nz, x[nz])

    def to_dense(self):
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out

    def to_dict(self):
        return {int(i): float(v) for i, v in zip(self.indices, self.values)}

    @property
    def nnz(self):
        return int(self.indices.size)

    def __len__(self):
        return self.dim


@dataclass(frozen=True)
class SvdTriple:
    """Thin SVD factors: ``U`` is m x r, ``S`` has length r, ``V`` is n x r."""

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    @property
    def rank(self):
        return int(self.S.size)

    @property
    def shape(self):
        return (self.U.shape[0], self.V.shape[0])

    def reconstruct(self):
        return (self.U * self.S) @ self.V.T

    def entry(self, i, j):
        return float(np.dot(self.U[i] * self.S, self.V[j]))


def as_dense(M, name="matrix"):
    """Return ``M`` as a finite 2-D float array or raise InvalidInputError."""
    A = np.asarray(M, dtype=np.float64)
    if A.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-dimensional, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return A


def _fix_signs(U, V):
    # first nonzero entry of each left singular vector made nonnegative
    if U.size == 0:
        return U, V
    nz = np.abs(U) > 0
    first = np.argmax(nz, axis=0)
    lead = U[first, np.arange(U.shape[1])]
    flip = np.where(lead < 0, -1.0, 1.0)
    return U * flip, V * flip


def _empty_triple(m, n):
    return SvdTriple(np.zeros((m, 0)), np.zeros(0), np.zeros((n, 0)))


def thin_svd(M, rank_tol=DEFAULT_RANK_TOL):
    """Thin SVD with numerically-zero directions removed.

    Singular values ``<= rank_tol * max(S)`` are dropped; with
    ``rank_tol == 0`` only exact zeros of a zero matrix are kept out.
    """
    A = as_dense(M)
    if rank_tol < 0:
        raise InvalidInputError("rank_tol must be non-negative")
    m, n = A.shape
    if A.size == 0:
        return _empty_triple(m, n)
    U, S, Vt = np.linalg.svd(A, full_matrices=False)
    smax = S[0] if S.size else 0.0
    if rank_tol > 0:
        keep = S > rank_tol * smax
    else:
        keep = np.ones(S.size, dtype=bool)
    U, S, V = U[:, keep], S[keep], Vt[keep].T
    U, V = _fix_signs(U, V)
    return SvdTriple(np.ascontiguousarray(U), S.copy(), np.ascontiguousarray(V))


def randomized_svd(M, k, oversample=8, power_iters=2, seed=0):
    """Rank-``k`` randomized SVD (range finder with subspace iteration).

    Returns exactly ``k`` singular triples; no rank truncation is applied.
    """
    A = as_dense(M)
    m, n = A.shape
    if k < 0 or k > min(m, n):
        raise InvalidInputError(f"k={k} must lie in [0, {min(m, n)}]")
    if k == 0:
        return _empty_triple(m, n)
    rng = np.random.default_rng(seed)
    ell = min(k + oversample, min(m, n))
    Y = A @ rng.standard_normal((n, ell))
    Q, _ = np.linalg.qr(Y)
    for _ in range(power_iters):
        Z, _ = np.linalg.qr(A.T @ Q)
        Q, _ = np.linalg.qr(A @ Z)
    B = Q.T @ A
    Ub, S, Vt = np.linalg.svd(B, full_matrices=False)
    U = Q @ Ub[:, :k]
    U, V = _fix_signs(U, Vt[:k].T)
    return SvdTriple(np.ascontiguousarray(U), S[:k].copy(), np.ascontiguousarray(V))


def soft_threshold_svd(svd, tau):
    """Shrink the singular values of an existing triple by ``tau``."""
    if tau < 0:
        raise InvalidInputError("tau must be non-negative")
    S = svd.S - tau
    keep = S > 0
    return SvdTriple(svd.U[:, keep], S[keep], svd.V[:, keep])


def svt(M, tau):
    """Singular-value soft-thresholding: SVD of the shrunk matrix.

    Directions whose singular value does not exceed ``tau`` are dropped, so
    ``tau >= max(S)`` yields a rank-0 triple.
    """
    if tau < 0:
        raise InvalidInputError("tau must be non-negative")
    return soft_threshold_svd(thin_svd(M, rank_tol=0.0), tau)


def sparse_inner(a, b):
    """Inner product of two :class:`SparseVector` of equal dimension."""
    if a.dim != b.dim:
        raise InvalidInputError(f"dimension mismatch: {a.dim} vs {b.dim}")
    _, ia, ib = np.intersect1d(a.indices, b.indices, assume_unique=True, return_indices=True)
    return float(np.dot(a.values[ia], b.values[ib]))
