"""Streaming key-value cache memory for long feature streams."""

from .analysis import (
    AnalysisReport,
    ClueAnnotation,
    entropy_histogram,
    layer_recall_distribution,
    recall_at_k,
    score_trace,
    self_similarity,
)
from .compression import CompressionStrategy
from .encoder import EncodeTrace, FrameInput, StreamEncoder, encode_stream, window_attention
from .kv_store import FrameKV, TieredCacheStore, kv_cache_bytes, load_cache, save_cache
from .retrieval import (
    ExternalEmbeddings,
    QuestionFeatures,
    Ranking,
    RetrievalResult,
    answer_attention,
    l2_concat_fuse,
    retrieve,
    rrf_fuse,
)
from .toy_model import ToyModelConfig, gen_benchmark

__version__ = "0.1.0"
