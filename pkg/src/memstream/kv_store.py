"""Tiered per-layer key/value cache.

Each layer owns an independent partition holding

* a hot sliding window of recent frames, bounded by a budget on full
  (uncompressed) token counts and optionally by a frame count,
* an offloaded tier kept in RAM, spilling to disk past a byte threshold,
* a representative-vector index: one mean-pooled key vector per offloaded
  frame, computed when the frame leaves the window.

Partitions share no mutable state, so different layers may be written from
different threads. Reads and writes of the same layer must not overlap.
"""

from __future__ import annotations

import json
import logging
import shutil
import struct
import tempfile
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import (
    CacheStateError,
    CorruptFileError,
    FrameOrderError,
    ShapeError,
    UnknownFrameError,
)
from .numerics import mean_pool_rows
from .tensorio import read_tensor, write_tensor

logger = logging.getLogger(__name__)

DEFAULT_WINDOW_TOKENS = 17_000
CACHE_MAGIC = b"MSKV"
CACHE_VERSION = 1
_U64_MAX = 2**64 - 1
_F32 = np.dtype("<f4")


@dataclass(frozen=True, eq=False)
class FrameKV:
    """Keys and values of one frame feature at one layer.

    ``keys`` and ``values`` are (N, H*D) float32 with heads flattened into the
    column axis; ``grid`` is the (h, w) spatial token layout with h*w = N.
    """

    frame_index: int
    layer: int
    keys: np.ndarray
    values: np.ndarray
    grid: tuple[int, int]
    head_count: int
    head_dim: int

    def __post_init__(self):
        keys = np.ascontiguousarray(self.keys, dtype=_F32)
        values = np.ascontiguousarray(self.values, dtype=_F32)
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "values", values)
        grid = (int(self.grid[0]), int(self.grid[1]))
        object.__setattr__(self, "grid", grid)
        if keys.ndim != 2 or keys.shape != values.shape:
            raise ShapeError(f"keys {keys.shape} and values {values.shape} must share a 2-D shape")
        if grid[0] < 1 or grid[1] < 1 or grid[0] * grid[1] != keys.shape[0]:
            raise ShapeError(f"grid {grid} does not match {keys.shape[0]} tokens")
        if self.head_count * self.head_dim != keys.shape[1]:
            raise ShapeError(
                f"H*D = {self.head_count}*{self.head_dim} does not match width {keys.shape[1]}"
            )
        if not (np.all(np.isfinite(keys)) and np.all(np.isfinite(values))):
            raise ValueError("non-finite key/value entries")

    @property
    def tokens(self) -> int:
        return self.keys.shape[0]

    @property
    def nbytes(self) -> int:
        return self.keys.nbytes + self.values.nbytes

    def same_payload(self, other: "FrameKV") -> bool:
        return (
            self.frame_index == other.frame_index
            and self.grid == other.grid
            and self.keys.tobytes() == other.keys.tobytes()
            and self.values.tobytes() == other.values.tobytes()
        )


@dataclass
class EvictionReport:
    layer: int
    evicted: list[int] = field(default_factory=list)
    spilled: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.evicted)


@dataclass
class _Offloaded:
    frame_index: int
    grid: tuple[int, int]
    nbytes: int
    kv: Optional[FrameKV] = None
    key_path: Optional[Path] = None
    value_path: Optional[Path] = None


class _LayerPartition:
    def __init__(self, layer: int):
        self.layer = layer
        self.hot: deque[FrameKV] = deque()
        self.hot_tokens = 0
        self.offloaded: dict[int, _Offloaded] = {}
        self.ram_queue: deque[int] = deque()
        self.ram_bytes = 0
        self.disk_bytes = 0
        self.reps: dict[int, np.ndarray] = {}
        self.last_index: Optional[int] = None


class TieredCacheStore:
    """Per-layer KV cache with a hot window, offload tier and rep-vector index.

    Args:
        layer_count: number of layers L.
        head_count: heads H per layer.
        head_dim: per-head dimension D.
        window_tokens: budget on the hot window's full token count; None
            disables the token bound.
        window_frames: optional bound on the number of hot frames (the
            formal window size).
        spill_dir: directory for offloaded frames spilled to disk.
        spill_threshold_bytes: per-layer RAM budget for offloaded frames;
            older offloaded frames beyond it go to ``spill_dir``. Defaults
            to 0 (spill everything) when a directory is given.
    """

    def __init__(
        self,
        layer_count: int,
        head_count: int,
        head_dim: int,
        window_tokens: Optional[int] = DEFAULT_WINDOW_TOKENS,
        window_frames: Optional[int] = None,
        spill_dir=None,
        spill_threshold_bytes: Optional[int] = None,
    ):
        if min(layer_count, head_count, head_dim) < 1:
            raise ValueError("layer_count, head_count and head_dim must be >= 1")
        if window_tokens is not None and window_tokens < 1:
            raise ValueError("window_tokens must be >= 1")
        if window_frames is not None and window_frames < 1:
            raise ValueError("window_frames must be >= 1")
        self.layer_count = layer_count
        self.head_count = head_count
        self.head_dim = head_dim
        self.window_tokens = window_tokens
        self.window_frames = window_frames
        self._spill_root = Path(spill_dir) if spill_dir is not None else None
        self._spill_dir: Optional[Path] = None
        if self._spill_root is not None and spill_threshold_bytes is None:
            spill_threshold_bytes = 0
        if spill_threshold_bytes is not None and spill_threshold_bytes < 0:
            raise ValueError("spill_threshold_bytes must be >= 0")
        self.spill_threshold_bytes = spill_threshold_bytes if self._spill_root else None
        if self._spill_root is not None:
            self._spill_root.mkdir(parents=True, exist_ok=True)
            self._spill_dir = Path(tempfile.mkdtemp(prefix="kv-", dir=self._spill_root))
        self._layers = [_LayerPartition(i) for i in range(layer_count)]

    # -- context management -------------------------------------------------

    def close(self) -> None:
        """Remove this store's spill files. Spilled frames become unreadable."""
        if self._spill_dir is not None and self._spill_dir.exists():
            shutil.rmtree(self._spill_dir, ignore_errors=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- inspection -----------------------------------------------------------

    @property
    def width(self) -> int:
        return self.head_count * self.head_dim

    def _part(self, layer: int) -> _LayerPartition:
        if not 0 <= layer < self.layer_count:
            raise IndexError(f"layer {layer} out of range [0, {self.layer_count})")
        return self._layers[layer]

    def hot_frames(self, layer: int) -> list[FrameKV]:
        return list(self._part(layer).hot)

    def hot_indices(self, layer: int) -> list[int]:
        return [f.frame_index for f in self._part(layer).hot]

    def hot_tokens(self, layer: int) -> int:
        return self._part(layer).hot_tokens

    def offloaded_indices(self, layer: int) -> list[int]:
        return sorted(self._part(layer).offloaded)

    def frame_indices(self, layer: int) -> list[int]:
        return sorted(self.offloaded_indices(layer) + self.hot_indices(layer))

    def is_flushed(self) -> bool:
        return all(not p.hot for p in self._layers)

    def rep_vector(self, layer: int, frame_index: int) -> np.ndarray:
        try:
            return self._part(layer).reps[frame_index]
        except KeyError:
            raise UnknownFrameError(f"no representative vector for frame {frame_index} at layer {layer}")

    def rep_matrix(self, layer: int) -> tuple[list[int], np.ndarray]:
        """Frame indices (ascending) and their stacked representative vectors."""
        reps = self._part(layer).reps
        idx = sorted(reps)
        if not idx:
            return [], np.zeros((0, self.width), dtype=_F32)
        return idx, np.stack([reps[i] for i in idx])

    def memory_report(self) -> dict:
        """Byte accounting per tier, summed over layers."""
        hot = sum(f.nbytes for p in self._layers for f in p.hot)
        ram = sum(p.ram_bytes for p in self._layers)
        disk = sum(p.disk_bytes for p in self._layers)
        reps = sum(v.nbytes for p in self._layers for v in p.reps.values())
        return {
            "hot_bytes": hot,
            "offloaded_ram_bytes": ram,
            "spilled_bytes": disk,
            "rep_bytes": reps,
            "total_kv_bytes": hot + ram + disk,
        }

    # -- mutation -------------------------------------------------------------

    def append_frame(self, layer: int, frame: FrameKV) -> EvictionReport:
        """Append a frame to the hot window and evict the oldest frames (FIFO)
        until the window fits its budget again."""
        part = self._part(layer)
        if frame.layer != layer:
            raise ShapeError(f"frame is tagged layer {frame.layer}, appended to layer {layer}")
        if frame.head_count != self.head_count or frame.head_dim != self.head_dim:
            raise ShapeError(
                f"frame has H={frame.head_count}, D={frame.head_dim}; store expects "
                f"H={self.head_count}, D={self.head_dim}"
            )
        if part.last_index is not None and frame.frame_index <= part.last_index:
            raise FrameOrderError(
                f"frame {frame.frame_index} appended after {part.last_index} at layer {layer}"
            )
        if frame.frame_index < 0:
            raise FrameOrderError("frame indices must be non-negative")
        part.hot.append(frame)
        part.hot_tokens += frame.tokens
        part.last_index = frame.frame_index
        report = EvictionReport(layer)
        while part.hot and self._over_budget(part):
            self._offload(part, part.hot.popleft(), report)
        return report

    def _over_budget(self, part: _LayerPartition) -> bool:
        if self.window_tokens is not None and part.hot_tokens > self.window_tokens:
            return True
        return self.window_frames is not None and len(part.hot) > self.window_frames

    def _offload(self, part: _LayerPartition, frame: FrameKV, report: EvictionReport):
        part.hot_tokens -= frame.tokens
        part.reps[frame.frame_index] = mean_pool_rows(frame.keys).astype(_F32)
        part.offloaded[frame.frame_index] = _Offloaded(
            frame.frame_index, frame.grid, frame.nbytes, kv=frame
        )
        part.ram_queue.append(frame.frame_index)
        part.ram_bytes += frame.nbytes
        report.evicted.append(frame.frame_index)
        if self.spill_threshold_bytes is not None:
            while part.ram_queue and part.ram_bytes > self.spill_threshold_bytes:
                idx = part.ram_queue.popleft()
                self._spill(part, part.offloaded[idx])
                report.spilled.append(idx)

    def _spill(self, part: _LayerPartition, rec: _Offloaded):
        base = self._spill_dir / f"layer{part.layer:03d}"
        rec.key_path = base / f"frame{rec.frame_index:08d}.k.mstn"
        rec.value_path = base / f"frame{rec.frame_index:08d}.v.mstn"
        write_tensor(rec.key_path, rec.kv.keys)
        write_tensor(rec.value_path, rec.kv.values)
        rec.kv = None
        part.ram_bytes -= rec.nbytes
        part.disk_bytes += rec.nbytes

    def flush(self) -> list[EvictionReport]:
        """Offload every hot frame so the whole stream is indexed."""
        reports = []
        for part in self._layers:
            report = EvictionReport(part.layer)
            while part.hot:
                self._offload(part, part.hot.popleft(), report)
            reports.append(report)
        return reports

    def fetch_frames(self, layer: int, indices: Iterable[int]) -> list[FrameKV]:
        """Return the stored frames for ``indices`` in ascending frame order."""
        part = self._part(layer)
        hot = {f.frame_index: f for f in part.hot}
        out = []
        for idx in sorted(set(int(i) for i in indices)):
            if idx in hot:
                out.append(hot[idx])
                continue
            rec = part.offloaded.get(idx)
            if rec is None:
                raise UnknownFrameError(f"frame {idx} not stored at layer {layer}")
            out.append(self._materialize(layer, rec))
        return out

    def _materialize(self, layer: int, rec: _Offloaded) -> FrameKV:
        if rec.kv is not None:
            return rec.kv
        return FrameKV(
            rec.frame_index,
            layer,
            read_tensor(rec.key_path),
            read_tensor(rec.value_path),
            rec.grid,
            self.head_count,
            self.head_dim,
        )


def kv_cache_bytes(L: int, T: int, M: int, H: int, D: int, bytes_per_elem: int = 2) -> int:
    """Size of a full KV cache: 2 (keys and values) * L * T * M * H * D * bytes.

    Raises OverflowError if the count does not fit an unsigned 64-bit integer.
    """
    args = {"L": L, "T": T, "M": M, "H": H, "D": D, "bytes_per_elem": bytes_per_elem}
    for name, value in args.items():
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
            raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
        if value < 1:
            raise ValueError(f"{name} must be >= 1, got {value}")
    total = 2
    for value in args.values():
        total *= int(value)
    if total > _U64_MAX:
        raise OverflowError(f"KV cache size {total} exceeds 64-bit range")
    return total


# -- persistence ----------------------------------------------------------------

_PREFIX = struct.Struct("<4sIQ")


def save_cache(store: TieredCacheStore, path) -> None:
    """Serialize a flushed store.

    Layout: ``b"MSKV" | u32 version | u64 manifest length | manifest JSON |
    payload``. Every tensor is raw little-endian float32 at the manifest's
    offsets (relative to the start of the payload).
    """
    if not store.is_flushed():
        raise CacheStateError("save_cache requires a flushed store")
    chunks: list[bytes] = []
    entries = []
    frames: dict[int, list[int]] = {}
    offset = 0

    def put(arr: np.ndarray) -> list[int]:
        nonlocal offset
        data = np.ascontiguousarray(arr, dtype=_F32).tobytes()
        chunks.append(data)
        span = [offset, len(data)]
        offset += len(data)
        return span

    for layer in range(store.layer_count):
        for frame in store.fetch_frames(layer, store.offloaded_indices(layer)):
            frames.setdefault(frame.frame_index, list(frame.grid))
            entries.append(
                {
                    "layer": layer,
                    "frame": frame.frame_index,
                    "grid": list(frame.grid),
                    "keys": put(frame.keys),
                    "values": put(frame.values),
                    "rep": put(store.rep_vector(layer, frame.frame_index)),
                }
            )
    manifest = {
        "version": CACHE_VERSION,
        "layers": store.layer_count,
        "heads": store.head_count,
        "head_dim": store.head_dim,
        "window_tokens": store.window_tokens,
        "window_frames": store.window_frames,
        "frame_count": len(frames),
        "frames": [
            {"index": i, "grid": g, "tokens": g[0] * g[1]} for i, g in sorted(frames.items())
        ],
        "tensors": entries,
        "payload_bytes": offset,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(CACHE_MAGIC, CACHE_VERSION, len(blob)))
        fh.write(blob)
        for chunk in chunks:
            fh.write(chunk)
    tmp.replace(path)


def read_cache_manifest(path) -> dict:
    return _read_cache(Path(path).read_bytes())[0]


def _read_cache(buf: bytes) -> tuple[dict, memoryview]:
    if len(buf) < _PREFIX.size:
        raise CorruptFileError("cache file shorter than its header")
    magic, version, mlen = _PREFIX.unpack_from(buf, 0)
    if magic != CACHE_MAGIC:
        raise CorruptFileError(f"bad cache magic {magic!r}")
    if version != CACHE_VERSION:
        raise CorruptFileError(f"unsupported cache version {version}")
    start = _PREFIX.size + mlen
    if len(buf) < start:
        raise CorruptFileError("cache manifest truncated")
    try:
        manifest = json.loads(buf[_PREFIX.size:start])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"cache manifest is not valid JSON: {exc}") from None
    payload = memoryview(buf)[start:]
    if len(payload) != manifest.get("payload_bytes"):
        raise CorruptFileError(
            f"payload is {len(payload)} bytes, manifest declares {manifest.get('payload_bytes')}"
        )
    return manifest, payload


def load_cache(path, spill_dir=None, spill_threshold_bytes=None) -> TieredCacheStore:
    """Rebuild a flushed store from a file written by :func:`save_cache`."""
    manifest, payload = _read_cache(Path(path).read_bytes())
    try:
        L, H, D = manifest["layers"], manifest["heads"], manifest["head_dim"]
        entries = manifest["tensors"]
        store = TieredCacheStore(
            L,
            H,
            D,
            window_tokens=manifest["window_tokens"],
            window_frames=manifest["window_frames"],
            spill_dir=spill_dir,
            spill_threshold_bytes=spill_threshold_bytes,
        )
    except (KeyError, TypeError) as exc:
        raise CorruptFileError(f"cache manifest missing field: {exc}") from None

    spans = sorted(
        tuple(e[name]) for e in entries for name in ("keys", "values", "rep")
    )
    cursor = 0
    for off, size in spans:
        if off < cursor or off + size > len(payload):
            raise CorruptFileError("tensor spans overlap or exceed the payload")
        cursor = off + size

    def take(span, shape) -> np.ndarray:
        off, size = span
        arr = np.frombuffer(payload[off:off + size], dtype=_F32)
        if arr.size != int(np.prod(shape)):
            raise CorruptFileError(f"tensor span of {size} bytes does not fit shape {shape}")
        return arr.reshape(shape).copy()

    width = H * D
    for entry in sorted(entries, key=lambda e: (e["layer"], e["frame"])):
        layer, idx = entry["layer"], entry["frame"]
        grid = tuple(entry["grid"])
        n = grid[0] * grid[1]
        frame = FrameKV(
            idx, layer, take(entry["keys"], (n, width)), take(entry["values"], (n, width)),
            grid, H, D,
        )
        part = store._part(layer)
        if part.last_index is not None and idx <= part.last_index:
            raise CorruptFileError(f"frames out of order at layer {layer}")
        part.last_index = idx
        part.offloaded[idx] = _Offloaded(idx, frame.grid, frame.nbytes, kv=frame)
        part.ram_queue.append(idx)
        part.ram_bytes += frame.nbytes
        part.reps[idx] = take(entry["rep"], (width,))
        if store.spill_threshold_bytes is not None:
            while part.ram_queue and part.ram_bytes > store.spill_threshold_bytes:
                store._spill(part, part.offloaded[part.ram_queue.popleft()])
    return store
