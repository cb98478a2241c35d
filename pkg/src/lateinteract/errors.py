"""Exception types shared across the engine."""


class LateInteractError(Exception):
    """Base class for engine errors."""


class EmptyDocument(LateInteractError, ValueError):
    """A document has no embedding rows to score against."""


class DimensionMismatch(LateInteractError, ValueError):
    """Embedding widths disagree."""


class MalformedFile(LateInteractError, ValueError):
    """A file does not follow its declared on-disk layout."""


class InvalidEmbedding(LateInteractError, ValueError):
    """Non-finite values or a norm violation under the cosine metric."""


class ChecksumMismatch(LateInteractError):
    """Stored CRC32 does not match the file contents."""


class VersionMismatch(LateInteractError):
    """On-disk format version is not supported."""


class DuplicateOrdinal(LateInteractError, ValueError):
    """An embedding ordinal was added to the ANN index twice."""


class UntrainedIndex(LateInteractError, RuntimeError):
    """The ANN index was used before its quantizers were trained."""
