"""Stream manifests and run configuration.

A manifest is JSON describing one feature stream. Paths are relative to the
manifest's directory. Frames carry either a toy-model input feature or
precomputed per-layer Q/K/V tensors::

    {
      "video_id": "...",
      "temporal_patch": 2,
      "model": {"layers": L, "heads": H, "head_dim": D},
      "toy_model": {...} | null,
      "frames": [
        {"index": 0, "grid": [h, w], "input": {"path": "frames.mstn", "row": 0}},
        {"index": 1, "grid": [h, w], "qkv": [{"q": "...", "k": "...", "v": "..."}, ...]}
      ],
      "questions": [
        {"id": "q000", "clue_frames": [raw frame indices],
         "concept": {"path": "concepts.mstn", "row": 0}  |  "qkv": [...]}
      ],
      "external": {"frame_embeddings": "...", "question_embeddings": "..."} | null
    }
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .analysis import DEFAULT_TEMPORAL_PATCH, ClueAnnotation
from .compression import CompressionStrategy
from .encoder import FrameInput
from .errors import ManifestError
from .kv_store import DEFAULT_WINDOW_TOKENS
from .retrieval import DEFAULT_BUDGET, DEFAULT_RRF_K, FUSIONS, MODES, ExternalEmbeddings, QuestionFeatures
from .tensorio import read_tensor, write_tensor
from .toy_model import SyntheticBenchmark, ToyModelConfig, project_frame, project_question

MANIFEST_VERSION = 1
SPILL_ENV = "MEMSTREAM_SPILL_DIR"


@dataclass
class RunConfig:
    strategy: CompressionStrategy = field(default_factory=lambda: CompressionStrategy("aks"))
    window_tokens: Optional[int] = DEFAULT_WINDOW_TOKENS
    window_frames: Optional[int] = None
    budget: int = DEFAULT_BUDGET
    mode: str = "moe"
    fusion: str = "rrf"
    rrf_k: float = DEFAULT_RRF_K
    rrf_weights: Optional[dict] = None
    seed: int = 0
    entropy_bins: int = 10
    spill_threshold_bytes: Optional[int] = None
    spill_dir: Optional[str] = None
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.strategy, dict):
            self.strategy = CompressionStrategy.from_dict(self.strategy)
        elif isinstance(self.strategy, str):
            self.strategy = CompressionStrategy.parse(self.strategy)
        if self.mode not in MODES:
            raise ManifestError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.fusion not in FUSIONS:
            raise ManifestError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        for name in ("budget", "entropy_bins", "workers"):
            if getattr(self, name) < 1:
                raise ManifestError(f"{name} must be >= 1")
        for name in ("window_tokens", "window_frames"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ManifestError(f"{name} must be >= 1")
        if self.rrf_k < 0:
            raise ManifestError("rrf_k must be >= 0")
        env = os.environ.get(SPILL_ENV)
        if env:
            self.spill_dir = env

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ManifestError(f"cannot read config {path}: {exc}") from None
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ManifestError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        """Settings that affect outputs (spill placement and threading do not)."""
        return {
            "strategy": self.strategy.to_dict(),
            "window_tokens": self.window_tokens,
            "window_frames": self.window_frames,
            "budget": self.budget,
            "mode": self.mode,
            "fusion": self.fusion,
            "rrf_k": self.rrf_k,
            "rrf_weights": self.rrf_weights,
            "seed": self.seed,
            "entropy_bins": self.entropy_bins,
        }


class StreamManifest:
    """A validated manifest. Construction checks every referenced tensor."""

    def __init__(self, data: dict, root: Path):
        self.data = data
        self.root = Path(root)
        self._tensors: dict[str, np.ndarray] = {}
        try:
            self._parse()
        except (KeyError, TypeError, IndexError) as exc:
            raise ManifestError(f"malformed manifest: {exc!r}") from None

    @classmethod
    def load(cls, path) -> "StreamManifest":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ManifestError(f"cannot read manifest {path}: {exc}") from None
        return cls(data, path.parent)

    def _tensor(self, rel: str) -> np.ndarray:
        if rel not in self._tensors:
            path = self.root / rel
            if not path.is_file():
                raise ManifestError(f"referenced file does not exist: {rel}")
            self._tensors[rel] = read_tensor(path)
        return self._tensors[rel]

    def _row(self, ref, dim: int, what: str) -> np.ndarray:
        if isinstance(ref, str):
            vec = self._tensor(ref)
        else:
            arr = self._tensor(ref["path"])
            row = int(ref["row"])
            if arr.ndim != 2 or not 0 <= row < arr.shape[0]:
                raise ManifestError(f"{what}: row {row} not in tensor of shape {arr.shape}")
            vec = arr[row]
        if vec.shape != (dim,):
            raise ManifestError(f"{what}: expected a vector of length {dim}, got shape {vec.shape}")
        return vec

    def _qkv(self, refs, n: int, what: str):
        if len(refs) != self.layers:
            raise ManifestError(f"{what}: {len(refs)} layers of qkv, model has {self.layers}")
        out = []
        for i, ref in enumerate(refs):
            mats = tuple(self._tensor(ref[r]) for r in ("q", "k", "v"))
            for m in mats:
                if m.ndim != 2 or m.shape[1] != self.width or (n and m.shape[0] != n):
                    raise ManifestError(
                        f"{what} layer {i}: tensor shape {m.shape}, expected ({n or 'N'}, {self.width})"
                    )
            if not (mats[0].shape == mats[1].shape == mats[2].shape):
                raise ManifestError(f"{what} layer {i}: q/k/v shapes differ")
            out.append(mats)
        return out

    def _parse(self):
        d = self.data
        self.video_id = str(d.get("video_id", ""))
        self.temporal_patch = int(d.get("temporal_patch", DEFAULT_TEMPORAL_PATCH))
        if self.temporal_patch < 1:
            raise ManifestError("temporal_patch must be >= 1")
        model = d["model"]
        self.layers, self.heads, self.head_dim = int(model["layers"]), int(model["heads"]), int(model["head_dim"])
        if min(self.layers, self.heads, self.head_dim) < 1:
            raise ManifestError("model sizes must be >= 1")
        self.width = self.heads * self.head_dim
        self.toy = ToyModelConfig.from_dict(d["toy_model"]) if d.get("toy_model") else None
        if self.toy and (self.toy.layers, self.toy.heads, self.toy.head_dim) != (self.layers, self.heads, self.head_dim):
            raise ManifestError("toy_model sizes disagree with model")

        self.frames = d.get("frames", [])
        for t, fr in enumerate(self.frames):
            if int(fr["index"]) != t:
                raise ManifestError(f"frame {t} has index {fr['index']}; indices must be 0..T-1 in order")
            h, w = (int(v) for v in fr["grid"])
            if h < 1 or w < 1:
                raise ManifestError(f"frame {t}: invalid grid {fr['grid']}")
            if "qkv" in fr:
                self._qkv(fr["qkv"], h * w, f"frame {t}")
            elif "input" in fr:
                if self.toy is None:
                    raise ManifestError(f"frame {t} uses an input feature but no toy_model is declared")
                self._row(fr["input"], self.toy.input_dim, f"frame {t} input")
            else:
                raise ManifestError(f"frame {t} has neither qkv nor input")

        self.questions = d.get("questions", [])
        self.question_ids = [str(q["id"]) for q in self.questions]
        if len(set(self.question_ids)) != len(self.question_ids):
            raise ManifestError("duplicate question ids")
        T = len(self.frames)
        self.clues: dict[str, ClueAnnotation] = {}
        for q in self.questions:
            qid = str(q["id"])
            if "qkv" in q:
                self._qkv(q["qkv"], 0, f"question {qid}")
            elif "concept" in q:
                if self.toy is None:
                    raise ManifestError(f"question {qid} uses a concept vector but no toy_model is declared")
                self._row(q["concept"], self.toy.input_dim, f"question {qid} concept")
            if q.get("clue_frames"):
                clue = ClueAnnotation.from_raw_frames(qid, q["clue_frames"], self.temporal_patch)
                if clue.frames[-1] >= T:
                    raise ManifestError(f"question {qid}: clue frame {clue.frames[-1]} beyond {T} frames")
                self.clues[qid] = clue

        self.external = None
        ext = d.get("external")
        if ext:
            frames = self._tensor(ext["frame_embeddings"])
            qs = self._tensor(ext["question_embeddings"])
            if frames.ndim != 2 or frames.shape[0] != T:
                raise ManifestError(f"frame embeddings shape {frames.shape} does not cover {T} frames")
            if qs.ndim != 2 or qs.shape != (len(self.questions), frames.shape[1]):
                raise ManifestError(
                    f"question embeddings shape {qs.shape}, expected ({len(self.questions)}, {frames.shape[1]})"
                )
            self.external = ExternalEmbeddings(frames, dict(zip(self.question_ids, qs)))

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    def frame_inputs(self) -> Iterator[FrameInput]:
        for t, fr in enumerate(self.frames):
            grid = (int(fr["grid"][0]), int(fr["grid"][1]))
            if "qkv" in fr:
                qkv = self._qkv(fr["qkv"], grid[0] * grid[1], f"frame {t}")
            else:
                x = self._row(fr["input"], self.toy.input_dim, f"frame {t} input")
                qkv = [project_frame(x, i, self.toy, grid) for i in range(self.layers)]
            yield FrameInput(t, grid, qkv)

    def question_features(self, question_id: str) -> QuestionFeatures:
        try:
            q = self.questions[self.question_ids.index(question_id)]
        except ValueError:
            raise ManifestError(f"unknown question id {question_id!r}") from None
        if "qkv" in q:
            return QuestionFeatures(question_id, self._qkv(q["qkv"], 0, f"question {question_id}"))
        if "concept" in q:
            c = self._row(q["concept"], self.toy.input_dim, f"question {question_id} concept")
            return QuestionFeatures(question_id, [project_question(c, i, self.toy) for i in range(self.layers)])
        raise ManifestError(f"question {question_id!r} has no internal features")


def write_benchmark(bench: SyntheticBenchmark, out_dir, video_id: str = "toy",
                    temporal_patch: int = DEFAULT_TEMPORAL_PATCH) -> Path:
    """Serialize a synthetic benchmark as manifest.json plus tensor files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = bench.config
    write_tensor(out_dir / "frames.mstn", bench.frames.reshape(bench.frame_count, cfg.input_dim))
    write_tensor(out_dir / "concepts.mstn", bench.concepts.reshape(len(bench.question_ids), cfg.input_dim))
    emb = bench.external_embeddings()
    write_tensor(out_dir / "ext_frames.mstn", emb.frames)
    q_emb = np.stack([emb.questions[q] for q in bench.question_ids]) if bench.question_ids else \
        np.zeros((0, cfg.ext_dim), dtype=np.float32)
    write_tensor(out_dir / "ext_questions.mstn", q_emb)
    manifest = {
        "version": MANIFEST_VERSION,
        "video_id": video_id,
        "temporal_patch": temporal_patch,
        "model": {"layers": cfg.layers, "heads": cfg.heads, "head_dim": cfg.head_dim},
        "toy_model": cfg.to_dict(),
        "frames": [
            {"index": t, "grid": list(cfg.grid_for(t)), "input": {"path": "frames.mstn", "row": t}}
            for t in range(bench.frame_count)
        ],
        "questions": [
            {
                "id": qid,
                "concept": {"path": "concepts.mstn", "row": j},
                # every clue feature covers temporal_patch raw frames
                "clue_frames": [f * temporal_patch + p for f in clue.frames for p in range(temporal_patch)],
            }
            for j, (qid, clue) in enumerate(zip(bench.question_ids, bench.clues))
        ],
        "external": {"frame_embeddings": "ext_frames.mstn", "question_embeddings": "ext_questions.mstn"},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
