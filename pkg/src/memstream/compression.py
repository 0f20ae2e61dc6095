"""Window compression strategies for sparse sliding-window attention.

Patch-wise strategies shrink each window frame on its own (pooling, dilated
sampling, token merging, adaptive key selection). Frame-wise strategies keep
a subset of whole window frames (uniform sampling, k-means centroids,
temporal change). None of them touch what is stored in the cache; they only
decide what the current frame attends to.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError
from .numerics import cosine_scores, order_desc, paired_cosine

PATCH_WISE = frozenset({"pool", "dilated", "tome", "aks"})
FRAME_WISE = frozenset({"uniform", "kmeans", "temporal"})
STRATEGY_NAMES = ("full", "pool", "dilated", "uniform", "tome", "kmeans", "temporal", "aks")

# Default parameter per strategy; ratios are fractions of tokens kept.
_DEFAULTS = {
    "pool": {"k": 2},
    "dilated": {"k": 4},
    "uniform": {"k": 8},
    "kmeans": {"k": 8},
    "temporal": {"k": 8},
    "tome": {"ratio": 1 / 12},
    "aks": {"ratio": 1 / 16},
}

KMEANS_MAX_ITER = 25


@dataclass(frozen=True)
class CompressionStrategy:
    """A compression choice and its parameter.

    ``k`` is the kernel (pool), stride (dilated), kept frame count (uniform,
    kmeans, temporal), merge count r (tome) or kept token count (aks). For
    tome and aks a ``ratio`` of kept tokens per frame may be given instead,
    which turns into a per-frame count ``ceil(N * ratio)``.
    """

    name: str = "full"
    k: Optional[int] = None
    ratio: Optional[float] = None

    def __post_init__(self):
        name = self.name.lower()
        if name not in STRATEGY_NAMES:
            raise ValueError(f"unknown strategy {self.name!r}; expected one of {STRATEGY_NAMES}")
        object.__setattr__(self, "name", name)
        if name == "full":
            return
        if self.k is None and self.ratio is None:
            defaults = _DEFAULTS[name]
            object.__setattr__(self, "k", defaults.get("k"))
            object.__setattr__(self, "ratio", defaults.get("ratio"))
        if self.k is not None and self.ratio is not None:
            raise ValueError("give either k or ratio, not both")
        if self.ratio is not None:
            if name not in ("tome", "aks"):
                raise ValueError(f"strategy {name!r} takes an integer k, not a ratio")
            if not 0 < self.ratio <= 1:
                raise ValueError("ratio must be in (0, 1]")
        elif name == "tome":
            if self.k < 0:
                raise ValueError("merge count must be >= 0")
        elif self.k < 1:
            raise ValueError(f"{name} parameter must be >= 1")

    @property
    def patch_wise(self) -> bool:
        return self.name in PATCH_WISE

    @property
    def frame_wise(self) -> bool:
        return self.name in FRAME_WISE

    def keep_tokens(self, n: int) -> int:
        """Per-frame kept token count for aks."""
        if self.k is not None:
            return min(self.k, n)
        return min(n, max(1, math.ceil(round(n * self.ratio, 9))))

    def merges(self, n: int) -> int:
        """Per-frame merge count r for tome."""
        r = self.k if self.k is not None else n - max(1, math.ceil(round(n * self.ratio, 9)))
        if not 0 <= r < n:
            raise ValueError(f"token merge count {r} incompatible with {n} tokens")
        return r

    def to_dict(self) -> dict:
        out = {"name": self.name}
        if self.k is not None:
            out["k"] = self.k
        if self.ratio is not None:
            out["ratio"] = self.ratio
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "CompressionStrategy":
        return cls(data.get("name", "full"), data.get("k"), data.get("ratio"))

    @classmethod
    def parse(cls, text: str) -> "CompressionStrategy":
        """Parse ``name``, ``name:k`` or ``name:a/b`` (ratio)."""
        name, _, param = text.partition(":")
        if not param:
            return cls(name)
        if "/" in param or "." in param:
            num, _, den = param.partition("/")
            return cls(name, ratio=float(num) / float(den or 1))
        return cls(name, k=int(param))


def _check_grid(grid, n: int) -> tuple[int, int]:
    h, w = int(grid[0]), int(grid[1])
    if h < 1 or w < 1 or h * w != n:
        raise ShapeError(f"grid {grid} does not match {n} tokens")
    return h, w


# -- patch-wise -------------------------------------------------------------------


def aks_select(K_t, K_prev, keep: int) -> np.ndarray:
    """Adaptive key selection: keep the tokens least similar to the previous frame.

    Token n of the current frame is compared with token n of the previous
    frame by cosine similarity; the ``min(keep, N)`` lowest-similarity
    tokens are kept (ties to the smaller index). With differing token
    counts only the first ``min(N_t, N_prev)`` tokens are compared; any
    surplus current tokens are used, in order, only if ``keep`` exceeds the
    compared count.

    Returns:
        Kept token indices, ascending.
    """
    K_t = np.asarray(K_t, dtype=np.float64)
    K_prev = np.asarray(K_prev, dtype=np.float64)
    if K_t.ndim != 2 or K_prev.ndim != 2 or K_t.shape[1] != K_prev.shape[1]:
        raise ShapeError(f"incompatible key shapes {K_t.shape} and {K_prev.shape}")
    if keep < 1:
        raise ValueError("keep must be >= 1")
    n = K_t.shape[0]
    m = min(n, K_prev.shape[0])
    sims = paired_cosine(K_t[:m], K_prev[:m])
    chosen = order_desc(-sims)[: min(keep, m)]
    if keep > m:
        chosen = np.concatenate([chosen, np.arange(m, min(keep, n))])
    return np.sort(chosen).astype(np.int64)


def dilated_select(grid, stride: int) -> np.ndarray:
    """Linear indices of grid positions (r*stride, c*stride)."""
    h, w = int(grid[0]), int(grid[1])
    if stride < 1:
        raise ValueError("stride must be >= 1")
    rows = np.arange(0, h, stride)
    cols = np.arange(0, w, stride)
    return (rows[:, None] * w + cols[None, :]).ravel().astype(np.int64)


def stride_for_budget(grid, keep: int) -> int:
    """Smallest dilation stride whose selection has at most ``keep`` tokens."""
    h, w = int(grid[0]), int(grid[1])
    s = 1
    while math.ceil(h / s) * math.ceil(w / s) > keep:
        s += 1
    return s


def pool_tokens(K, V, grid, kernel: int) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping kernel x kernel average pooling over the token grid.

    Edge cells that do not fill a whole kernel average the tokens they have.
    Output tokens are ordered row-major over the pooled grid.
    """
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    h, w = _check_grid(grid, K.shape[0])
    if kernel < 1:
        raise ValueError("kernel must be >= 1")
    ph, pw = math.ceil(h / kernel), math.ceil(w / kernel)
    cell = (np.arange(h)[:, None] // kernel) * pw + (np.arange(w)[None, :] // kernel)
    cell = cell.ravel()
    counts = np.bincount(cell, minlength=ph * pw).astype(np.float64)[:, None]
    outs = []
    for X in (K, V):
        acc = np.zeros((ph * pw, X.shape[1]))
        np.add.at(acc, cell, X)
        outs.append(acc / counts)
    return outs[0], outs[1]


def token_merge(K, V, r: int, sizes=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bipartite soft matching merge of ``r`` tokens within one frame.

    Tokens alternate between set A (even position) and set B (odd position).
    Every A token proposes its most similar B token by key cosine (ties to
    the smaller B position); the r strongest proposals (ties to the smaller A
    position) are merged into their partners by size-weighted averaging of
    keys and values. A single pass can merge at most |A| tokens, so larger r
    repeats the pass on the survivors.

    Returns:
        (keys, values, sizes) of the N - r surviving tokens in original order.
    """
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    n = K.shape[0]
    if not 0 <= r < max(n, 1):
        raise ValueError(f"merge count {r} must be in [0, {n})")
    size = np.ones(n) if sizes is None else np.asarray(sizes, dtype=np.float64).copy()
    remaining = r
    while remaining > 0:
        a_idx = np.arange(0, K.shape[0], 2)
        b_idx = np.arange(1, K.shape[0], 2)
        if b_idx.size == 0:
            break
        Kb = K[b_idx]
        best = np.empty(a_idx.size, dtype=np.int64)
        best_sim = np.empty(a_idx.size)
        for j, a in enumerate(a_idx):
            sims = cosine_scores(K[a], Kb)
            best[j] = int(np.argmax(sims))
            best_sim[j] = sims[best[j]]
        take = order_desc(best_sim)[: min(remaining, a_idx.size)]
        Ksum = K * size[:, None]
        Vsum = V * size[:, None]
        drop = np.zeros(K.shape[0], dtype=bool)
        for j in take:
            a, b = a_idx[j], b_idx[best[j]]
            Ksum[b] += Ksum[a]
            Vsum[b] += Vsum[a]
            size[b] += size[a]
            drop[a] = True
        keep = ~drop
        size = size[keep]
        K = Ksum[keep] / size[:, None]
        V = Vsum[keep] / size[:, None]
        remaining -= take.size
    return K, V, size


# -- frame-wise ---------------------------------------------------------------------


def uniform_frame_select(window_size: int, keep: int) -> list[int]:
    """Evenly spaced window positions: floor(linspace(0, w-1, keep)), unique."""
    if keep < 1:
        raise ValueError("keep must be >= 1")
    if window_size <= 0:
        return []
    if keep >= window_size:
        return list(range(window_size))
    pos = np.floor(np.linspace(0, window_size - 1, keep)).astype(np.int64)
    return sorted(set(int(p) for p in pos))


def kmeans_frame_select(reps, k: int, max_iter: int = KMEANS_MAX_ITER) -> list[int]:
    """Cluster window frames by their mean-pooled keys and keep, per cluster,
    the frame nearest the centroid.

    Seeds are evenly spaced frames, iteration stops at convergence or
    ``max_iter``, and an empty cluster is re-seeded with the point farthest
    from its own centroid. Every tie resolves to the smaller index.
    """
    X = np.asarray(reps, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ShapeError("kmeans needs a non-empty (frames, dim) matrix")
    if k < 1:
        raise ValueError("k must be >= 1")
    n = X.shape[0]
    if k >= n:
        return list(range(n))
    seeds = np.floor(np.linspace(0, n - 1, k)).astype(np.int64)
    C = X[seeds].copy()
    assign = None
    for _ in range(max_iter):
        dist = ((X[:, None, :] - C[None, :, :]) ** 2).sum(-1)
        new = np.argmin(dist, axis=1)
        for c in range(k):
            if not np.any(new == c):
                # donors must leave their own cluster non-empty
                counts = np.bincount(new, minlength=k)
                own = np.where(counts[new] > 1, dist[np.arange(n), new], -np.inf)
                far = int(np.argmax(own))
                new[far] = c
                C[c] = X[far]
                dist[:, c] = ((X - C[c]) ** 2).sum(-1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for c in range(k):
            C[c] = X[assign == c].mean(axis=0)
    kept = set()
    for c in range(k):
        members = np.flatnonzero(assign == c)
        if members.size == 0:
            continue
        d = ((X[members] - C[c]) ** 2).sum(-1)
        kept.add(int(members[int(np.argmin(d))]))
    return sorted(kept)


def adjacent_change_score(K_t, K_prev) -> float:
    """Mean token-wise cosine between a frame and its predecessor, over the
    first min(N_t, N_prev) tokens."""
    K_t = np.asarray(K_t, dtype=np.float64)
    K_prev = np.asarray(K_prev, dtype=np.float64)
    m = min(K_t.shape[0], K_prev.shape[0])
    return float(paired_cosine(K_t[:m], K_prev[:m]).mean())


def temporal_change_select(window_keys: Sequence, keep: int, scores=None) -> list[int]:
    """Keep the window frames that changed most from their predecessor.

    Position 0 is always kept and counts toward ``keep``; the other
    ``keep - 1`` are the positions with the lowest change score (ties to the
    smaller position). ``scores`` may supply precomputed scores for
    positions 1..w-1.
    """
    w = len(window_keys)
    if keep < 1:
        raise ValueError("keep must be >= 1")
    if keep >= w:
        return list(range(w))
    if scores is None:
        scores = [adjacent_change_score(window_keys[t], window_keys[t - 1]) for t in range(1, w)]
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (w - 1,):
        raise ShapeError(f"expected {w - 1} change scores, got {scores.shape}")
    lowest = order_desc(-scores)[: keep - 1] + 1
    return sorted([0] + [int(p) for p in lowest])
