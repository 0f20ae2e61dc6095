"""Exception hierarchy shared across the engine."""


class MemStreamError(Exception):
    """Base class for every error raised by memstream."""


class ShapeError(MemStreamError, ValueError):
    """Array shapes or dimensions do not agree."""


class ZeroNormError(MemStreamError, ValueError):
    """A vector with zero norm was passed to a cosine computation."""


class DistributionError(MemStreamError, ValueError):
    """Input is not a probability distribution."""


class FrameOrderError(MemStreamError, ValueError):
    """Frames were appended out of stream order."""


class UnknownFrameError(MemStreamError, KeyError):
    """A requested frame is not present in the cache."""


class CacheStateError(MemStreamError, RuntimeError):
    """Operation requires a different cache state (e.g. flushed)."""


class CorruptFileError(MemStreamError, ValueError):
    """A serialized file failed magic, version or length checks."""


class ManifestError(MemStreamError, ValueError):
    """A stream manifest or run config failed validation."""
