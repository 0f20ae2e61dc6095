"""Streaming encode loop with sparse sliding-window attention.

For every frame t and layer i the current queries attend to a compressed view
of the hot window followed by the frame's own tokens::

    O_t = Attn(Q_t, [K_window ; K_t], [V_window ; V_t])

The frame's full keys and values are then appended to the cache. Compression
changes only what is attended, never what is stored.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .compression import (
    CompressionStrategy,
    adjacent_change_score,
    aks_select,
    dilated_select,
    kmeans_frame_select,
    pool_tokens,
    stride_for_budget,
    temporal_change_select,
    token_merge,
    uniform_frame_select,
)
from .errors import ShapeError
from .kv_store import FrameKV, TieredCacheStore
from .numerics import softmax

_F32 = np.dtype("<f4")


@dataclass(frozen=True)
class FrameInput:
    """Per-layer (Q, K, V) for one frame feature, each (N, H*D)."""

    frame_index: int
    grid: tuple[int, int]
    qkv: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class SelectionMask:
    frame_index: int
    layer: int
    indices: tuple[int, ...]


@dataclass
class TraceRecord:
    frame: int
    layer: int
    window_frames: int
    full_tokens: int
    attended_tokens: int
    entropy: Optional[float]


@dataclass
class EncodeTrace:
    """Per (frame, layer) attention statistics gathered during encoding.

    ``timings`` holds wall-clock seconds per layer; it is kept out of every
    export so exported traces stay byte-deterministic.
    """

    records: dict[int, list[TraceRecord]] = field(default_factory=dict)
    masks: dict[int, list[SelectionMask]] = field(default_factory=dict)
    timings: dict[int, float] = field(default_factory=dict)

    def add(self, record: TraceRecord) -> None:
        self.records.setdefault(record.layer, []).append(record)

    def all_records(self) -> list[TraceRecord]:
        out = [r for recs in self.records.values() for r in recs]
        return sorted(out, key=lambda r: (r.frame, r.layer))

    def entropies(self) -> list[float]:
        return [r.entropy for r in self.all_records() if r.entropy is not None]

    def token_totals(self) -> tuple[int, int]:
        recs = self.all_records()
        return sum(r.full_tokens for r in recs), sum(r.attended_tokens for r in recs)

    def compression_rate(self) -> Optional[float]:
        full, attended = self.token_totals()
        return full / attended if attended else None

    def to_dict(self) -> dict:
        full, attended = self.token_totals()
        return {
            "records": [asdict(r) for r in self.all_records()],
            "full_window_tokens": full,
            "attended_window_tokens": attended,
            "compression_rate": self.compression_rate(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EncodeTrace":
        trace = cls()
        for rec in data.get("records", []):
            trace.add(TraceRecord(**rec))
        return trace


def window_attention(Q_t, K_window, V_window, K_t, V_t, heads: int) -> tuple[np.ndarray, Optional[float]]:
    """Per-head attention over ``[window ; current]`` keys and values.

    The entropy is the normalized entropy of attention restricted to the
    window tokens (renormalized over them), averaged over query tokens and
    heads. It is None when fewer than two window tokens are attended.
    """
    Q = np.asarray(Q_t, dtype=np.float64)
    Kc = np.asarray(K_t, dtype=np.float64)
    Vc = np.asarray(V_t, dtype=np.float64)
    width = Q.shape[1]
    if K_window is None:
        K_window = np.zeros((0, width))
        V_window = np.zeros((0, width))
    Kw = np.asarray(K_window, dtype=np.float64)
    Vw = np.asarray(V_window, dtype=np.float64)
    if Kc.shape[1] != width or Kw.shape[1] != width or Vw.shape != Kw.shape or Vc.shape != Kc.shape:
        raise ShapeError(f"window attention shape mismatch: Q {Q.shape}, K {Kc.shape}, window {Kw.shape}")
    if heads < 1 or width % heads:
        raise ShapeError(f"width {width} not divisible into {heads} heads")
    d = width // heads
    nw = Kw.shape[0]
    K = np.concatenate([Kw, Kc])
    V = np.concatenate([Vw, Vc])

    def split(X):
        return X.reshape(X.shape[0], heads, d).transpose(1, 0, 2)

    logits = split(Q) @ split(K).transpose(0, 2, 1) / math.sqrt(d)
    weights = softmax(logits, axis=-1)
    out = (weights @ split(V)).transpose(1, 0, 2).reshape(Q.shape[0], width)
    entropy = None
    if nw >= 2:
        # Softmax over window logits alone equals the renormalized window mass
        # without the underflow risk of dividing tiny probabilities.
        p = softmax(logits[:, :, :nw], axis=-1)
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
        h = -plogp.sum(-1) / math.log(nw)
        entropy = float(np.clip(h, 0.0, 1.0).mean())
    return out, entropy


class _LayerState:
    def __init__(self):
        self.views: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self.prev_keys: Optional[np.ndarray] = None
        self.change: dict[tuple[int, int], float] = {}


class StreamEncoder:
    """Encodes frames one at a time into a :class:`TieredCacheStore`.

    Layers are independent; with ``workers > 1`` they run on a thread pool.
    Within a layer frames are strictly sequential.
    """

    def __init__(
        self,
        store: TieredCacheStore,
        strategy: CompressionStrategy = CompressionStrategy(),
        trace: Optional[EncodeTrace] = None,
        workers: int = 1,
    ):
        self.store = store
        self.strategy = strategy
        self.trace = trace if trace is not None else EncodeTrace()
        self.workers = workers
        self._states = [_LayerState() for _ in range(store.layer_count)]
        self._pool = ThreadPoolExecutor(workers) if workers > 1 else None

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def encode_frame(self, frame: FrameInput) -> list[np.ndarray]:
        if len(frame.qkv) != self.store.layer_count:
            raise ShapeError(
                f"frame {frame.frame_index} has {len(frame.qkv)} layers, store has {self.store.layer_count}"
            )
        layers = range(self.store.layer_count)
        if self._pool is None:
            return [self._encode_layer(frame, i) for i in layers]
        return list(self._pool.map(lambda i: self._encode_layer(frame, i), layers))

    def finish(self) -> None:
        self.store.flush()
        self.close()

    # -- per layer ------------------------------------------------------------------

    def _encode_layer(self, frame: FrameInput, layer: int) -> np.ndarray:
        start = time.perf_counter()
        store = self.store
        state = self._states[layer]
        Q, K, V = (np.ascontiguousarray(x, dtype=_F32) for x in frame.qkv[layer])
        kv = FrameKV(frame.frame_index, layer, K, V, frame.grid, store.head_count, store.head_dim)
        if Q.shape != K.shape:
            raise ShapeError(f"Q {Q.shape} and K {K.shape} differ at frame {frame.frame_index}")

        window = store.hot_frames(layer)
        Kw, Vw = self._window_view(layer, state, window)
        out, entropy = window_attention(Q, Kw, Vw, K, V, store.head_count)
        self.trace.add(
            TraceRecord(
                frame=frame.frame_index,
                layer=layer,
                window_frames=len(window),
                full_tokens=sum(f.tokens for f in window),
                attended_tokens=0 if Kw is None else int(Kw.shape[0]),
                entropy=entropy,
            )
        )

        if self.strategy.patch_wise or self.strategy.name == "full":
            state.views[frame.frame_index] = self._compress_frame(layer, state, kv)
        report = store.append_frame(layer, kv)
        for idx in report.evicted:
            state.views.pop(idx, None)
        if report.evicted and state.change:
            hot = set(store.hot_indices(layer))
            state.change = {p: s for p, s in state.change.items() if p[0] in hot}
        state.prev_keys = kv.keys
        self.trace.timings[layer] = self.trace.timings.get(layer, 0.0) + time.perf_counter() - start
        return out.astype(_F32)

    def _compress_frame(self, layer: int, state: _LayerState, kv: FrameKV):
        s = self.strategy
        K, V = kv.keys, kv.values
        if s.name == "full":
            return K, V
        if s.name == "pool":
            Kp, Vp = pool_tokens(K, V, kv.grid, s.k)
            return Kp, Vp
        if s.name == "tome":
            Km, Vm, _ = token_merge(K, V, s.merges(kv.tokens))
            return Km, Vm
        if s.name == "dilated":
            mask = dilated_select(kv.grid, s.k)
        else:  # aks
            keep = s.keep_tokens(kv.tokens)
            if state.prev_keys is None:
                mask = dilated_select(kv.grid, stride_for_budget(kv.grid, keep))
            else:
                mask = aks_select(K, state.prev_keys, keep)
        self.trace.masks.setdefault(layer, []).append(
            SelectionMask(kv.frame_index, layer, tuple(int(i) for i in mask))
        )
        return K[mask], V[mask]

    def _window_view(self, layer: int, state: _LayerState, window: list[FrameKV]):
        if not window:
            return None, None
        s = self.strategy
        if not s.frame_wise:
            parts = [state.views[f.frame_index] for f in window]
        else:
            if s.name == "uniform":
                kept = uniform_frame_select(len(window), s.k)
            elif s.name == "kmeans":
                reps = np.stack([f.keys.astype(np.float64).mean(axis=0) for f in window])
                kept = kmeans_frame_select(reps, s.k)
            else:
                kept = temporal_change_select(
                    [f.keys for f in window], s.k, self._change_scores(state, window)
                ) if len(window) > 1 else [0]
            parts = [(window[p].keys, window[p].values) for p in kept]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

    @staticmethod
    def _change_scores(state: _LayerState, window: list[FrameKV]) -> list[float]:
        scores = []
        for prev, cur in zip(window, window[1:]):
            key = (prev.frame_index, cur.frame_index)
            if key not in state.change:
                state.change[key] = adjacent_change_score(cur.keys, prev.keys)
            scores.append(state.change[key])
        return scores


def encode_stream(
    frames: Iterable[FrameInput],
    store: TieredCacheStore,
    strategy: CompressionStrategy = CompressionStrategy(),
    trace: Optional[EncodeTrace] = None,
    workers: int = 1,
    return_outputs: bool = False,
):
    """Encode a whole stream and flush the store at the end.

    Returns:
        The list of per-frame, per-layer outputs when ``return_outputs`` is
        set, otherwise None.
    """
    encoder = StreamEncoder(store, strategy, trace, workers)
    outputs = [] if return_outputs else None
    try:
        for frame in frames:
            out = encoder.encode_frame(frame)
            if outputs is not None:
                outputs.append(out)
    finally:
        encoder.close()
    store.flush()
    return outputs
