"""Question-time frame retrieval and answer attention.

Frames are scored by up to two kinds of experts:

* internal, per layer: cosine between the mean question query and each
  frame's representative key vector,
* external: cosine between an encoder's question embedding and per-frame
  embeddings.

``moe`` mode fuses the layer's internal ranking with the external one, by
reciprocal rank fusion or by concatenating l2-normalized embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .errors import CacheStateError, ManifestError, ShapeError, ZeroNormError
from .kv_store import TieredCacheStore
from .numerics import cosine_scores, mean_pool_rows, multihead_attention, order_desc

MODES = ("internal", "external", "moe")
FUSIONS = ("rrf", "l2concat")
DEFAULT_RRF_K = 60
DEFAULT_BUDGET = 64


@dataclass
class Ranking:
    """One expert's ordering of frames. ``rank_of[t]`` is 1-based."""

    expert: str
    scores: np.ndarray
    rank_of: np.ndarray

    @classmethod
    def from_scores(cls, expert: str, scores) -> "Ranking":
        scores = np.asarray(scores, dtype=np.float64)
        order = order_desc(scores)
        rank_of = np.empty(scores.size, dtype=np.int64)
        rank_of[order] = np.arange(1, scores.size + 1)
        return cls(expert, scores, rank_of)

    def order(self) -> list[int]:
        return [int(i) for i in np.argsort(self.rank_of, kind="stable")]

    def to_dict(self) -> dict:
        return {
            "expert": self.expert,
            "order": self.order(),
            "scores": [float(s) for s in self.scores],
        }


@dataclass
class ExternalEmbeddings:
    """Frame embeddings (T, d) and question embeddings keyed by question id."""

    frames: np.ndarray
    questions: Mapping[str, np.ndarray]
    name: str = "external"

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ShapeError("frame embeddings must be (T, d)")
        d = self.frames.shape[1]
        for qid, q in self.questions.items():
            if np.asarray(q).shape != (d,):
                raise ShapeError(f"question {qid!r} embedding has shape {np.shape(q)}, expected ({d},)")


@dataclass
class QuestionFeatures:
    """Per-layer (Q, K, V) of a question's tokens, each (N_q, H*D)."""

    question_id: str
    qkv: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]]


@dataclass
class RetrievalResult:
    question_id: str
    mode: str
    fusion: str
    budget: int
    layers: list[list[int]]
    scores: list[list[float]]
    recall: Optional[list[float]] = None
    rankings: list[dict] = field(default_factory=list)

    def to_dict(self, include_rankings: bool = False) -> dict:
        out = {
            "question_id": self.question_id,
            "mode": self.mode,
            "fusion": self.fusion,
            "budget": self.budget,
            "layers": self.layers,
            "scores": self.scores,
        }
        if self.recall is not None:
            out["recall"] = self.recall
        if include_rankings:
            out["rankings"] = self.rankings
        return out


def question_repr(question_queries) -> np.ndarray:
    """Mean over the question's token rows at one layer."""
    return mean_pool_rows(question_queries)


def _rep_matrix(store: TieredCacheStore, layer: int) -> np.ndarray:
    idx, reps = store.rep_matrix(layer)
    if idx != list(range(len(idx))) or not store.is_flushed():
        raise CacheStateError(
            f"layer {layer} is missing representative vectors; flush the store first"
        )
    return reps


def internal_scores(store: TieredCacheStore, layer: int, q_repr) -> np.ndarray:
    """Cosine between the question representation and every frame's rep vector."""
    return cosine_scores(q_repr, _rep_matrix(store, layer))


def external_scores(emb: ExternalEmbeddings, question_id: str) -> np.ndarray:
    try:
        q = emb.questions[question_id]
    except KeyError:
        raise ManifestError(f"no external embedding for question {question_id!r}") from None
    return cosine_scores(q, emb.frames)


def rrf_fuse(rankings: Sequence[Ranking], rrf_k: float = DEFAULT_RRF_K, weights=None) -> np.ndarray:
    """Reciprocal rank fusion: score(t) = sum_r w_r / (rrf_k + rank_r(t))."""
    if not rankings:
        raise ValueError("rrf_fuse needs at least one ranking")
    if rrf_k < 0:
        raise ValueError("rrf_k must be >= 0")
    T = rankings[0].rank_of.size
    if any(r.rank_of.size != T for r in rankings):
        raise ShapeError("rankings cover different numbers of frames")
    if weights is None:
        weights = [1.0] * len(rankings)
    if len(weights) != len(rankings):
        raise ValueError("one weight per ranking required")
    fused = np.zeros(T)
    for w, r in zip(weights, rankings):
        fused += w / (rrf_k + r.rank_of.astype(np.float64))
    return fused


def _unit_rows(X, what: str) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    norms = np.sqrt(np.einsum("ij,ij->i", X, X))
    if np.any(norms == 0):
        raise ZeroNormError(f"zero-norm {what}")
    return X / norms[:, None]


def l2_concat_fuse(q_internal, reps, q_external, frame_embeddings) -> np.ndarray:
    """Score frames by cosine between concatenations of per-modality
    l2-normalized question and frame vectors."""
    reps = _unit_rows(reps, "representative vector")
    ext = _unit_rows(frame_embeddings, "frame embedding")
    if reps.shape[0] != ext.shape[0]:
        raise ShapeError(f"{reps.shape[0]} rep vectors vs {ext.shape[0]} frame embeddings")
    q = np.concatenate([_unit_rows(q_internal, "question")[0], _unit_rows(q_external, "question")[0]])
    return cosine_scores(q, np.concatenate([reps, ext], axis=1))


def select_top(scores, budget: int) -> list[int]:
    """Top ``budget`` frames by score, returned ascending by frame index."""
    return sorted(int(i) for i in order_desc(scores)[:budget])


def fuse_and_select(
    internal: Optional[Sequence[np.ndarray]],
    external: Optional[Union[np.ndarray, Sequence[np.ndarray]]],
    mode: str,
    budget: int = DEFAULT_BUDGET,
    rrf_k: float = DEFAULT_RRF_K,
    weights: Optional[Mapping[str, float]] = None,
    layer_count: Optional[int] = None,
) -> tuple[list[list[int]], list[np.ndarray], list[list[Ranking]]]:
    """Rank-level retrieval from precomputed scores.

    Args:
        internal: per-layer internal score vectors (internal and moe modes).
        external: one score vector, or a list for several external experts.
        mode: "internal", "external" or "moe".
        weights: optional RRF weights under keys "internal" and "external".
        layer_count: number of layers for external mode when ``internal`` is
            not given.

    Returns:
        Per-layer ascending frame lists, per-layer fused scores, and the
        rankings that went into each layer.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if budget < 1:
        raise ValueError("budget must be >= 1")
    weights = dict(weights or {})
    ext_list: list[np.ndarray] = []
    if external is not None:
        ext_list = [external] if np.ndim(external[0]) == 0 else list(external)
    ext_rankings = [
        Ranking.from_scores("external" if len(ext_list) == 1 else f"external:{j}", s)
        for j, s in enumerate(ext_list)
    ]
    w_int = weights.get("internal", 1.0)
    w_ext = weights.get("external", 1.0)
    if mode in ("internal", "moe") and internal is None:
        raise ValueError(f"{mode} mode needs internal scores")
    if mode in ("external", "moe") and not ext_list:
        raise ValueError(f"{mode} mode needs external scores")

    L = len(internal) if internal is not None else layer_count
    if L is None:
        raise ValueError("layer_count required for external-only retrieval")
    layers, fused_all, used = [], [], []
    shared = None
    if mode == "external":
        shared = ext_list[0] if len(ext_rankings) == 1 else rrf_fuse(ext_rankings, rrf_k, [w_ext] * len(ext_rankings))
    for i in range(L):
        if mode == "external":
            fused, rankings = np.asarray(shared, dtype=np.float64), ext_rankings
        else:
            r_int = Ranking.from_scores(f"layer:{i}", internal[i])
            if mode == "internal":
                fused, rankings = r_int.scores, [r_int]
            else:
                rankings = [r_int] + ext_rankings
                fused = rrf_fuse(rankings, rrf_k, [w_int] + [w_ext] * len(ext_rankings))
        layers.append(select_top(fused, budget))
        fused_all.append(fused)
        used.append(rankings)
    return layers, fused_all, used


def retrieve(
    store: TieredCacheStore,
    question: QuestionFeatures,
    mode: str = "moe",
    fusion: str = "rrf",
    budget: int = DEFAULT_BUDGET,
    emb: Optional[Union[ExternalEmbeddings, Sequence[ExternalEmbeddings]]] = None,
    rrf_k: float = DEFAULT_RRF_K,
    weights: Optional[Mapping[str, float]] = None,
    include_rankings: bool = False,
) -> RetrievalResult:
    """Select up to ``budget`` frame features per layer for a question."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if fusion not in FUSIONS:
        raise ValueError(f"unknown fusion {fusion!r}")
    if not store.is_flushed():
        raise CacheStateError("retrieve requires a flushed store")
    experts = [] if emb is None else ([emb] if isinstance(emb, ExternalEmbeddings) else list(emb))
    if mode != "internal" and not experts:
        raise ValueError(f"{mode} mode needs external embeddings")
    L = store.layer_count
    if mode != "external" and len(question.qkv) != L:
        raise ShapeError(f"question has {len(question.qkv)} layers, store has {L}")

    ext_scores = [external_scores(e, question.question_id) for e in experts]
    int_scores = None
    q_reprs = None
    if mode != "external":
        q_reprs = [question_repr(question.qkv[i][0]) for i in range(L)]
        int_scores = [internal_scores(store, i, q_reprs[i]) for i in range(L)]
    T = len(store.rep_matrix(0)[0])
    for s in ext_scores:
        if s.size != T:
            raise ShapeError(f"external embeddings cover {s.size} frames, cache has {T}")

    if mode == "moe" and fusion == "l2concat":
        layers, fused, rankings = [], [], []
        for i in range(L):
            scores = l2_concat_fuse(q_reprs[i], _rep_matrix(store, i),
                                    experts[0].questions[question.question_id], experts[0].frames)
            layers.append(select_top(scores, budget))
            fused.append(scores)
            rankings.append([Ranking.from_scores(f"l2concat:{i}", scores)])
    else:
        layers, fused, rankings = fuse_and_select(
            int_scores, ext_scores or None, mode, budget, rrf_k, weights, layer_count=L
        )
    return RetrievalResult(
        question_id=question.question_id,
        mode=mode,
        fusion=fusion,
        budget=budget,
        layers=layers,
        scores=[[float(x) for x in f] for f in fused],
        rankings=[[r.to_dict() for r in rs] for rs in rankings] if include_rankings else [],
    )


def answer_attention(question: QuestionFeatures, result: RetrievalResult, store: TieredCacheStore) -> list[np.ndarray]:
    """Per layer, attend from the question over [retrieved frames ; question].

    Retrieved frames enter in ascending frame order with their full keys and
    values.
    """
    outputs = []
    for i, (Q, K, V) in enumerate(question.qkv):
        frames = store.fetch_frames(i, result.layers[i])
        Ks = [f.keys for f in frames] + [np.asarray(K, dtype=np.float32)]
        Vs = [f.values for f in frames] + [np.asarray(V, dtype=np.float32)]
        out, _ = multihead_attention(Q, np.concatenate(Ks), np.concatenate(Vs), store.head_count)
        outputs.append(out.astype(np.float32))
    return outputs
