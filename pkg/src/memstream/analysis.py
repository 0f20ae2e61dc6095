"""Retrieval and attention diagnostics, exported as plot-ready tables."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ZeroNormError

DEFAULT_TEMPORAL_PATCH = 2


@dataclass(frozen=True)
class ClueAnnotation:
    """Ground-truth clue frame features for a question."""

    question_id: str
    frames: tuple[int, ...]

    def __post_init__(self):
        frames = tuple(sorted(set(int(f) for f in self.frames)))
        if not frames:
            raise ValueError(f"question {self.question_id!r} has no clue frames")
        if frames[0] < 0:
            raise ValueError("clue frame indices must be non-negative")
        object.__setattr__(self, "frames", frames)

    @classmethod
    def from_raw_frames(cls, question_id: str, raw_frames: Iterable[int],
                        temporal_patch: int = DEFAULT_TEMPORAL_PATCH) -> "ClueAnnotation":
        """Map raw video frame indices to frame-feature indices (floor division
        by the temporal patch size)."""
        return cls(question_id, tuple(raw_to_feature(raw_frames, temporal_patch)))

    def check_bounds(self, T: int) -> None:
        if self.frames[-1] >= T:
            raise ValueError(f"clue frame {self.frames[-1]} out of range for {T} frames")


def raw_to_feature(raw_frames: Iterable[int], temporal_patch: int = DEFAULT_TEMPORAL_PATCH) -> list[int]:
    if temporal_patch < 1:
        raise ValueError("temporal_patch must be >= 1")
    return sorted(set(int(r) // temporal_patch for r in raw_frames))


def recall_at_k(retrieved: Iterable[int], clue) -> float:
    """|retrieved ∩ clue| / |clue|."""
    clue_set = set(clue.frames if isinstance(clue, ClueAnnotation) else clue)
    if not clue_set:
        raise ValueError("recall over an empty clue set")
    return len(clue_set.intersection(int(r) for r in retrieved)) / len(clue_set)


def layer_recall_distribution(recalls) -> list[dict]:
    """Per-layer order statistics of recall over questions.

    Args:
        recalls: (questions, layers) array-like.

    Returns:
        One dict per layer with mean, median, q1, q3, min and max. Quantiles
        use linear interpolation, so the median of an even count is the
        midpoint of the central pair.
    """
    R = np.asarray(recalls, dtype=np.float64)
    if R.ndim != 2 or R.shape[0] < 1:
        raise ValueError("need a (questions, layers) array with at least one question")
    out = []
    for i in range(R.shape[1]):
        col = R[:, i]
        q1, med, q3 = np.percentile(col, [25, 50, 75])
        out.append({
            "layer": i,
            "mean": float(col.mean()),
            "median": float(med),
            "q1": float(q1),
            "q3": float(q3),
            "min": float(col.min()),
            "max": float(col.max()),
        })
    return out


def mean_recall_both_orders(recalls) -> dict:
    """Average recall aggregated layer-first and question-first."""
    R = np.asarray(recalls, dtype=np.float64)
    return {
        "mean_over_layers_then_questions": float(R.mean(axis=1).mean()),
        "mean_over_questions_then_layers": float(R.mean(axis=0).mean()),
    }


def clue_intervals(frames: Sequence[int]) -> list[tuple[int, int]]:
    """Contiguous runs of clue frames as inclusive (start, end) pairs."""
    runs: list[tuple[int, int]] = []
    for f in sorted(set(frames)):
        if runs and f == runs[-1][1] + 1:
            runs[-1] = (runs[-1][0], f)
        else:
            runs.append((f, f))
    return runs


@dataclass
class ScoreTrace:
    question_id: str
    expert: str
    scores: list[float]
    clue_frames: list[int]
    intervals: list[tuple[int, int]]

    def rows(self) -> list[list]:
        clue = set(self.clue_frames)
        return [
            [self.question_id, self.expert, t, repr(float(s)), int(t in clue)]
            for t, s in enumerate(self.scores)
        ]


def score_trace(scores, clue: ClueAnnotation, expert: str = "") -> ScoreTrace:
    return ScoreTrace(
        question_id=clue.question_id,
        expert=expert,
        scores=[float(s) for s in scores],
        clue_frames=list(clue.frames),
        intervals=clue_intervals(clue.frames),
    )


def self_similarity(reps) -> np.ndarray:
    """Pairwise cosine similarity of representative vectors.

    The upper triangle is computed once and mirrored, so the result is
    exactly symmetric; the diagonal is exactly 1.
    """
    X = np.asarray(reps, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("need at least one representative vector")
    sq = np.einsum("ij,ij->i", X, X)
    if np.any(sq == 0):
        raise ZeroNormError("zero-norm representative vector")
    G = X @ X.T
    np.fill_diagonal(G, sq)
    M = np.clip(G / np.sqrt(np.outer(sq, sq)), -1.0, 1.0)
    upper = np.triu(M)
    return upper + np.triu(M, 1).T


def entropy_histogram(values, bins: int = 10) -> dict:
    """Counts of normalized entropies over equal-width bins on [0, 1].

    Accepts an EncodeTrace or a plain sequence of entropies. The last bin is
    closed so that 1.0 is counted.
    """
    if hasattr(values, "entropies"):
        values = values.entropies()
    vals = np.asarray(list(values), dtype=np.float64)
    counts, edges = np.histogram(vals, bins=bins, range=(0.0, 1.0))
    return {
        "edges": [float(e) for e in edges],
        "counts": [int(c) for c in counts],
        "total": int(vals.size),
    }


# -- report -------------------------------------------------------------------------


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


@dataclass
class AnalysisReport:
    config: dict
    question_ids: list[str] = field(default_factory=list)
    recalls: list[list[float]] = field(default_factory=list)  # (questions, layers)
    traces: list[ScoreTrace] = field(default_factory=list)
    similarity: dict[int, np.ndarray] = field(default_factory=dict)
    entropy: Optional[dict] = None

    def summary(self) -> dict:
        out = {"config": self.config, "config_hash": config_hash(self.config),
               "questions": self.question_ids}
        if self.recalls:
            out["per_question_recall"] = dict(zip(self.question_ids, self.recalls))
            out["layer_recall"] = layer_recall_distribution(self.recalls)
            out["mean_recall"] = mean_recall_both_orders(self.recalls)
        if self.entropy is not None:
            out["entropy_histogram"] = self.entropy
        out["similarity_layers"] = sorted(self.similarity)
        return out

    def write(self, out_dir) -> dict[str, Path]:
        """Write the JSON summary and one CSV per table; returns the paths."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        tag = config_hash(self.config)
        files: dict[str, str] = {}
        files[f"report_{tag}.json"] = json.dumps(self.summary(), sort_keys=True, indent=2) + "\n"
        if self.recalls:
            L = len(self.recalls[0])
            files[f"recall_{tag}.csv"] = _csv_text(
                ["question", "layer", "recall"],
                ([q, i, repr(r[i])] for q, r in zip(self.question_ids, self.recalls) for i in range(L)),
            )
            files[f"layer_recall_{tag}.csv"] = _csv_text(
                ["layer", "mean", "median", "q1", "q3", "min", "max"],
                ([d["layer"]] + [repr(d[k]) for k in ("mean", "median", "q1", "q3", "min", "max")]
                 for d in layer_recall_distribution(self.recalls)),
            )
        if self.traces:
            files[f"score_traces_{tag}.csv"] = _csv_text(
                ["question", "expert", "frame", "score", "is_clue"],
                (row for tr in self.traces for row in tr.rows()),
            )
        if self.similarity:
            files[f"self_similarity_{tag}.csv"] = _csv_text(
                ["layer", "frame_a", "frame_b", "cosine"],
                ([layer, a, b, repr(float(M[a, b]))]
                 for layer, M in sorted(self.similarity.items())
                 for a in range(M.shape[0]) for b in range(M.shape[1])),
            )
        if self.entropy is not None:
            e = self.entropy
            files[f"entropy_histogram_{tag}.csv"] = _csv_text(
                ["bin_low", "bin_high", "count"],
                ([repr(e["edges"][j]), repr(e["edges"][j + 1]), e["counts"][j]]
                 for j in range(len(e["counts"]))),
            )
        paths = {}
        for name, text in files.items():
            path = out_dir / name
            with open(path, "w", newline="") as fh:
                fh.write(text)
            paths[name] = path
        return paths
