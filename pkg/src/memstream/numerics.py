"""Dense numerical kernels shared by the cache, encoder, retrieval and analysis.

Every kernel is a pure function. Inputs may be any real dtype; arithmetic is
carried out in float64 and callers decide what precision to store.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DistributionError, ShapeError, ZeroNormError

__all__ = [
    "as_matrix",
    "as_vector",
    "cosine_sim",
    "paired_cosine",
    "cosine_scores",
    "softmax",
    "softmax_row",
    "scaled_dot_attention",
    "multihead_attention",
    "mean_pool_rows",
    "normalized_entropy",
    "order_desc",
    "top_k_desc",
]


def as_vector(x, name: str = "vector") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def _cosine_from_products(dot, na, nb):
    # dot / sqrt(|a|^2 |b|^2): identical inputs give exactly 1.0 because
    # sqrt(x*x) == x under IEEE round-to-nearest.
    return dot / np.sqrt(na * nb)


def cosine_sim(a, b) -> float:
    """Cosine similarity of two vectors.

    Raises ZeroNormError if either vector is all zeros; a silent 0.0 would
    corrupt downstream rankings.
    """
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = float(a @ a)
    nb = float(b @ b)
    if na == 0.0 or nb == 0.0:
        raise ZeroNormError("cosine similarity of a zero-norm vector")
    value = _cosine_from_products(float(a @ b), na, nb)
    return float(min(1.0, max(-1.0, value)))


def paired_cosine(A, B) -> np.ndarray:
    """Row-wise cosine: out[n] = cos(A[n], B[n])."""
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    if A.shape != B.shape:
        raise ShapeError(f"shape mismatch: {A.shape} vs {B.shape}")
    na = np.einsum("ij,ij->i", A, A)
    nb = np.einsum("ij,ij->i", B, B)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise ZeroNormError("zero-norm row in paired cosine")
    dot = np.einsum("ij,ij->i", A, B)
    return np.clip(_cosine_from_products(dot, na, nb), -1.0, 1.0)


def cosine_scores(query, rows) -> np.ndarray:
    """Cosine between one query vector and every row of a matrix."""
    q = as_vector(query, "query")
    M = as_matrix(rows, "rows")
    if M.shape[1] != q.shape[0]:
        raise ShapeError(f"dimension mismatch: query {q.shape[0]} vs rows {M.shape[1]}")
    nq = float(q @ q)
    nm = np.einsum("ij,ij->i", M, M)
    if nq == 0.0:
        raise ZeroNormError("zero-norm query vector")
    if np.any(nm == 0.0):
        bad = int(np.flatnonzero(nm == 0.0)[0])
        raise ZeroNormError(f"zero-norm row {bad}")
    return np.clip(_cosine_from_products(M @ q, nq, nm), -1.0, 1.0)


def softmax(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_row(logits) -> np.ndarray:
    logits = as_vector(logits, "logits")
    if logits.size == 0:
        raise ValueError("softmax of an empty vector")
    return softmax(logits)


def scaled_dot_attention(Q, K, V) -> tuple[np.ndarray, np.ndarray]:
    """Single-head attention ``softmax(Q K^T / sqrt(d)) V``.

    Returns:
        (O, weights) with O of shape (m, d_v) and weights of shape (m, n).
    """
    Q = as_matrix(Q, "Q")
    K = as_matrix(K, "K")
    V = as_matrix(V, "V")
    if K.shape[0] < 1:
        raise ShapeError("attention needs at least one key")
    if Q.shape[1] != K.shape[1]:
        raise ShapeError(f"Q/K dim mismatch: {Q.shape[1]} vs {K.shape[1]}")
    if K.shape[0] != V.shape[0]:
        raise ShapeError(f"K/V row mismatch: {K.shape[0]} vs {V.shape[0]}")
    weights = softmax(Q @ K.T / math.sqrt(Q.shape[1]), axis=-1)
    return weights @ V, weights


def multihead_attention(Q, K, V, heads: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-head attention over head-flattened rows.

    Q is (m, H*D), K and V are (n, H*D). Columns are split into ``heads``
    contiguous blocks; outputs are concatenated back in the same layout.
    Scaling uses the per-head dimension D.

    Returns:
        (O, weights) with O of shape (m, H*D) and weights of shape (H, m, n).
    """
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ShapeError("attention inputs must be 2-D")
    m, width = Q.shape
    n = K.shape[0]
    if n < 1:
        raise ShapeError("attention needs at least one key")
    if K.shape[1] != width or V.shape != K.shape:
        raise ShapeError(f"shape mismatch: Q {Q.shape}, K {K.shape}, V {V.shape}")
    if heads < 1 or width % heads:
        raise ShapeError(f"width {width} not divisible into {heads} heads")
    d = width // heads
    qh = Q.reshape(m, heads, d).transpose(1, 0, 2)
    kh = K.reshape(n, heads, d).transpose(1, 0, 2)
    vh = V.reshape(n, heads, d).transpose(1, 0, 2)
    weights = softmax(qh @ kh.transpose(0, 2, 1) / math.sqrt(d), axis=-1)
    out = (weights @ vh).transpose(1, 0, 2).reshape(m, width)
    return out, weights


def mean_pool_rows(X) -> np.ndarray:
    X = as_matrix(X, "X")
    if X.shape[0] == 0:
        raise ShapeError("mean of an empty matrix")
    return X.mean(axis=0)


def normalized_entropy(p, atol: float = 1e-6) -> float:
    """Shannon entropy divided by log(n); 0*log(0) is taken as 0."""
    p = as_vector(p, "p")
    n = p.size
    if n < 2:
        raise DistributionError("normalized entropy needs at least 2 outcomes")
    if np.any(p < 0) or abs(float(p.sum()) - 1.0) > atol:
        raise DistributionError("input is not a probability distribution")
    nz = p[p > 0]
    h = float(-(nz * np.log(nz)).sum())
    return min(1.0, max(0.0, h / math.log(n)))


def order_desc(scores) -> np.ndarray:
    """Indices sorting scores descending; ties go to the smaller index."""
    s = as_vector(scores, "scores")
    # lexsort's last key is primary; the index key makes ties explicit.
    return np.lexsort((np.arange(s.size), -s))


def top_k_desc(scores, k: int) -> list[int]:
    if k < 1:
        raise ValueError("k must be >= 1")
    return [int(i) for i in order_desc(scores)[:k]]
