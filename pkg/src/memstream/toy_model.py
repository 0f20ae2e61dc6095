"""Seeded stand-in for the video LLM and the external encoder.

Every random draw comes from a Philox generator keyed by ``(seed, role,
...)``, so outputs depend only on the integer seed and not on call order.

Token rows of a frame are ``(x * g_n) @ W`` where ``x`` is the frame's input
feature, ``g_n`` a fixed per-token gain vector and ``W`` a per-layer random
projection. Queries use a slight perturbation of the key projection, which
keeps question queries aligned with the keys of frames carrying the same
concept, so internal retrieval is meaningful.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .analysis import ClueAnnotation
from .encoder import FrameInput
from .errors import ShapeError
from .retrieval import ExternalEmbeddings, QuestionFeatures

_F32 = np.dtype("<f4")

# generator roles
_KEY, _QUERY, _VALUE, _GAINS, _EXTERNAL, _QGAINS, _BENCH, _CLUES = range(1, 9)

# With unit-norm base features and concept vectors, margins at or above this
# make clue frames separable for input_dim >= 32 and T in the hundreds.
SEPARABLE_MARGIN = 2.0


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


@dataclass(frozen=True)
class ToyModelConfig:
    layers: int = 28
    heads: int = 4
    head_dim: int = 128
    grid: tuple[int, int] = (16, 16)
    grid_schedule: Optional[tuple[tuple[int, int], ...]] = None
    input_dim: int = 64
    question_tokens: int = 8
    ext_dim: int = 64
    token_jitter: float = 0.3
    query_mix: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        if self.grid_schedule is not None:
            object.__setattr__(self, "grid_schedule", tuple(tuple(int(v) for v in g) for g in self.grid_schedule))
        grids = [self.grid] + list(self.grid_schedule or ())
        ints = (self.layers, self.heads, self.head_dim, self.input_dim, self.question_tokens, self.ext_dim)
        if min(ints) < 1 or any(min(g) < 1 for g in grids):
            raise ValueError("toy model sizes must all be >= 1")

    @property
    def width(self) -> int:
        return self.heads * self.head_dim

    def grid_for(self, frame_index: int) -> tuple[int, int]:
        if self.grid_schedule:
            return self.grid_schedule[frame_index % len(self.grid_schedule)]
        return self.grid

    def to_dict(self) -> dict:
        return {
            "layers": self.layers, "heads": self.heads, "head_dim": self.head_dim,
            "grid": list(self.grid),
            "grid_schedule": [list(g) for g in self.grid_schedule] if self.grid_schedule else None,
            "input_dim": self.input_dim, "question_tokens": self.question_tokens,
            "ext_dim": self.ext_dim, "token_jitter": self.token_jitter,
            "query_mix": self.query_mix, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ToyModelConfig":
        data = dict(data)
        if data.get("grid") is not None:
            data["grid"] = tuple(data["grid"])
        if data.get("grid_schedule"):
            data["grid_schedule"] = tuple(tuple(g) for g in data["grid_schedule"])
        return cls(**data)


@functools.lru_cache(maxsize=256)
def _layer_weights(config: ToyModelConfig, layer: int):
    d, w = config.input_dim, config.width
    scale = 1.0 / np.sqrt(d)
    wk = _rng(config.seed, _KEY, layer).standard_normal((d, w)) * scale
    wq = wk + config.query_mix * _rng(config.seed, _QUERY, layer).standard_normal((d, w)) * scale
    wv = _rng(config.seed, _VALUE, layer).standard_normal((d, w)) * scale
    return wq, wk, wv


@functools.lru_cache(maxsize=64)
def _gains(config: ToyModelConfig, role: int, n: int) -> np.ndarray:
    return 1.0 + config.token_jitter * _rng(config.seed, role, n).standard_normal((n, config.input_dim))


@functools.lru_cache(maxsize=8)
def _external_weights(config: ToyModelConfig) -> np.ndarray:
    return _rng(config.seed, _EXTERNAL).standard_normal((config.input_dim, config.ext_dim))


def _expand(x, layer: int, config: ToyModelConfig, gains: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (config.input_dim,):
        raise ShapeError(f"input feature has shape {x.shape}, expected ({config.input_dim},)")
    if not 0 <= layer < config.layers:
        raise IndexError(f"layer {layer} out of range")
    U = x[None, :] * gains
    return tuple((U @ W).astype(_F32) for W in _layer_weights(config, layer))


def project_frame(x, layer: int, config: ToyModelConfig, grid: Optional[tuple[int, int]] = None):
    """(Q, K, V) for one frame at one layer, each (h*w, H*D) float32."""
    h, w = grid or config.grid
    return _expand(x, layer, config, _gains(config, _GAINS, h * w))


def project_question(c, layer: int, config: ToyModelConfig):
    """(Q, K, V) for a question's tokens at one layer."""
    return _expand(c, layer, config, _gains(config, _QGAINS, config.question_tokens))


def external_encode(x, config: ToyModelConfig) -> np.ndarray:
    """Unit-norm external embedding of an input feature."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (config.input_dim,):
        raise ShapeError(f"input feature has shape {x.shape}, expected ({config.input_dim},)")
    y = x @ _external_weights(config)
    n = np.linalg.norm(y)
    if n == 0:
        raise ValueError("external embedding of a zero input")
    return (y / n).astype(_F32)


@dataclass
class SyntheticBenchmark:
    """Frame input features with planted clue concepts and matching questions."""

    config: ToyModelConfig
    frames: np.ndarray  # (T, input_dim) float32
    concepts: np.ndarray  # (questions, input_dim) float32
    clues: list[ClueAnnotation]
    margin: float
    redundancy: float
    question_ids: list[str] = field(default_factory=list)

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    def frame_inputs(self) -> Iterator[FrameInput]:
        cfg = self.config
        for t, x in enumerate(self.frames):
            grid = cfg.grid_for(t)
            yield FrameInput(t, grid, [project_frame(x, i, cfg, grid) for i in range(cfg.layers)])

    def question_features(self, j: int) -> QuestionFeatures:
        c = self.concepts[j]
        return QuestionFeatures(
            self.question_ids[j], [project_question(c, i, self.config) for i in range(self.config.layers)]
        )

    def external_embeddings(self) -> ExternalEmbeddings:
        frames = np.stack([external_encode(x, self.config) for x in self.frames]) if self.frame_count else \
            np.zeros((0, self.config.ext_dim), dtype=_F32)
        questions = {qid: external_encode(c, self.config) for qid, c in zip(self.question_ids, self.concepts)}
        return ExternalEmbeddings(frames, questions)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def random_clues(T: int, questions: int, clue_size: int, seed: int) -> list[list[int]]:
    """Contiguous, non-overlapping clue runs placed at seeded random offsets."""
    if clue_size < 1 or questions * clue_size > T:
        raise ValueError(f"cannot place {questions} clue runs of {clue_size} frames in {T} frames")
    rng = _rng(seed, _CLUES)
    slots = T // clue_size
    starts = sorted(rng.choice(slots, size=questions, replace=False))
    order = rng.permutation(questions)
    runs = [list(range(s * clue_size, (s + 1) * clue_size)) for s in starts]
    return [runs[j] for j in order]


def gen_benchmark(
    T: int,
    clues: Sequence[Sequence[int]],
    margin: float = 4.0,
    redundancy: float = 0.9,
    seed: int = 0,
    config: Optional[ToyModelConfig] = None,
) -> SyntheticBenchmark:
    """Build a benchmark of ``T`` frames.

    The base signal is a unit-norm AR(1) drift whose correlation between
    neighbours is ``redundancy`` (1.0 gives constant frames). Each question
    j owns a random unit concept vector added with weight ``margin`` to its
    clue frames.
    """
    config = config or ToyModelConfig(seed=seed)
    if T < 0:
        raise ValueError("T must be >= 0")
    if not 0.0 <= redundancy <= 1.0:
        raise ValueError("redundancy must be in [0, 1]")
    if margin < 0:
        raise ValueError("margin must be >= 0")
    for j, clue in enumerate(clues):
        if not clue or min(clue) < 0 or max(clue) >= T:
            raise ValueError(f"clue set {j} is empty or out of range for {T} frames")
    rng = _rng(seed, _BENCH)
    d = config.input_dim
    frames = np.zeros((T, d))
    b = rng.standard_normal(d)
    noise = np.sqrt(max(0.0, 1.0 - redundancy**2))
    for t in range(T):
        if t:
            b = redundancy * b + noise * rng.standard_normal(d)
        frames[t] = _unit(b)
    concepts = np.stack([_unit(rng.standard_normal(d)) for _ in clues]) if clues else np.zeros((0, d))
    for c, clue in zip(concepts, clues):
        frames[sorted(set(clue))] += margin * c
    ids = [f"q{j:03d}" for j in range(len(clues))]
    return SyntheticBenchmark(
        config=config,
        frames=frames.astype(_F32),
        concepts=concepts.astype(_F32),
        clues=[ClueAnnotation(q, tuple(c)) for q, c in zip(ids, clues)],
        margin=margin,
        redundancy=redundancy,
        question_ids=ids,
    )
