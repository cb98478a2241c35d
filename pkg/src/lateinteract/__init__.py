"""Late-interaction passage retrieval over bags of token embeddings."""

from .core import (DocRepresentation, PaddedDocBatch, QueryRepresentation, SimilarityMetric,
                   avgsim_score, batch_maxsim, maxsim_score, pair_similarity)
from .encoder import ColEncoder, EncoderConfig, ProjectionLayer, Vocabulary, tokenize
from .errors import (ChecksumMismatch, DimensionMismatch, DuplicateOrdinal, EmptyDocument,
                     InvalidEmbedding, LateInteractError, MalformedFile, VersionMismatch)

__version__ = "0.1.0"

__all__ = [
    "ChecksumMismatch", "ColEncoder", "DimensionMismatch", "DocRepresentation",
    "DuplicateOrdinal", "EmptyDocument", "EncoderConfig", "InvalidEmbedding",
    "LateInteractError", "MalformedFile", "PaddedDocBatch", "ProjectionLayer",
    "QueryRepresentation", "SimilarityMetric", "VersionMismatch", "Vocabulary",
    "avgsim_score", "batch_maxsim", "maxsim_score", "pair_similarity", "tokenize",
]
