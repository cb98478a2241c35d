"""Domain types and late-interaction scoring kernels.

All similarity values are accumulated in float64 regardless of the storage
dtype. The single-document and padded-batch paths share one kernel, so a
document scores bit-identically whether it is scored alone or inside a batch.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyDocument, InvalidEmbedding

NORM_TOLERANCE = 1e-5

# Upper bound on the float64 temporaries built by the broadcast kernel.
_MAX_KERNEL_ELEMENTS = 1 << 22


class SimilarityMetric(str, enum.Enum):
    COSINE = "cosine"
    NEG_SQUARED_L2 = "l2"

    @classmethod
    def parse(cls, value: "str | SimilarityMetric") -> "SimilarityMetric":
        if isinstance(value, cls):
            return value
        text = str(value).strip().lower()
        aliases = {"cosine": cls.COSINE, "cos": cls.COSINE, "ip": cls.COSINE,
                   "l2": cls.NEG_SQUARED_L2, "neg_squared_l2": cls.NEG_SQUARED_L2}
        try:
            return aliases[text]
        except KeyError:
            raise ValueError(f"unknown similarity metric {value!r}") from None


def check_unit_norm(rows: np.ndarray, what: str = "embedding", tol: float = NORM_TOLERANCE) -> None:
    norms = np.linalg.norm(np.asarray(rows, dtype=np.float64), axis=-1)
    bad = np.abs(norms - 1.0) > tol
    if np.any(bad):
        idx = int(np.argmax(bad))
        raise InvalidEmbedding(f"{what} row {idx} has L2 norm {norms.flat[idx]:.8f}; "
                               "cosine metric requires unit-norm rows")


def _as_matrix(values, what: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ValueError(f"{what} must be a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidEmbedding(f"{what} contains non-finite values")
    return arr


@dataclass(frozen=True)
class QueryRepresentation:
    """Fixed-size bag of query embeddings (one row per query position)."""

    embeddings: np.ndarray
    query_id: Hashable = None

    def __post_init__(self):
        arr = _as_matrix(self.embeddings, "query embeddings")
        if arr.shape[0] < 1:
            raise ValueError("query representation needs at least one row")
        object.__setattr__(self, "embeddings", arr)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def __len__(self) -> int:
        return self.embeddings.shape[0]


@dataclass(frozen=True)
class DocRepresentation:
    """Variable-length bag of document embeddings after filtering."""

    embeddings: np.ndarray
    doc_id: Hashable = None

    def __post_init__(self):
        arr = _as_matrix(self.embeddings, "document embeddings")
        object.__setattr__(self, "embeddings", arr)

    @property
    def length(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def __len__(self) -> int:
        return self.length


@dataclass
class PaddedDocBatch:
    """Documents stacked into one ``(batch, width, dim)`` tensor.

    Rows at positions ``>= lengths[i]`` are padding and never take part in a max.
    """

    embeddings: np.ndarray
    lengths: np.ndarray
    doc_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings)
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        if self.embeddings.ndim != 3:
            raise ValueError("padded batch must be 3-D (batch, width, dim)")
        if self.lengths.shape != (self.embeddings.shape[0],):
            raise ValueError("one length per document is required")
        if np.any(self.lengths > self.embeddings.shape[1]) or np.any(self.lengths < 0):
            raise ValueError("document length outside the padded width")
        if not self.doc_ids:
            self.doc_ids = list(range(len(self.lengths)))

    @classmethod
    def from_docs(cls, docs: Sequence[DocRepresentation], width: int | None = None,
                  dtype=None) -> "PaddedDocBatch":
        """Stack documents, padding each to ``width`` (default: the longest)."""
        if not docs:
            raise ValueError("cannot build an empty batch")
        dim = docs[0].dim
        lengths = np.array([d.length for d in docs], dtype=np.int64)
        width = int(lengths.max()) if width is None else int(width)
        if width < lengths.max():
            raise ValueError("padded width is smaller than the longest document")
        dtype = dtype or docs[0].embeddings.dtype
        out = np.zeros((len(docs), width, dim), dtype=dtype)
        for i, d in enumerate(docs):
            if d.dim != dim:
                raise DimensionMismatch(f"document {i} has dim {d.dim}, expected {dim}")
            out[i, : d.length] = d.embeddings
        return cls(out, lengths, [d.doc_id for d in docs])

    def __len__(self) -> int:
        return len(self.lengths)

    def mask(self) -> np.ndarray:
        return np.arange(self.embeddings.shape[1])[None, :] < self.lengths[:, None]


def _similarity_block(q: np.ndarray, docs: np.ndarray, metric: SimilarityMetric) -> np.ndarray:
    """Similarity tensor ``(n_docs, n_q, width)`` for ``q`` against stacked ``docs``.

    Products are formed in float64 and reduced along the contiguous last axis,
    which fixes the summation order per (query row, doc row) pair.
    """
    q64 = q.astype(np.float64, copy=False)
    d64 = docs.astype(np.float64, copy=False)
    if metric is SimilarityMetric.COSINE:
        prod = q64[None, :, None, :] * d64[:, None, :, :]
        return prod.sum(axis=-1)
    diff = q64[None, :, None, :] - d64[:, None, :, :]
    return -(diff * diff).sum(axis=-1)


def _chunked_similarity(q: np.ndarray, docs: np.ndarray, metric: SimilarityMetric):
    n, width, dim = docs.shape
    per_doc = max(1, q.shape[0] * max(width, 1) * dim)
    step = max(1, _MAX_KERNEL_ELEMENTS // per_doc)
    for start in range(0, n, step):
        yield start, _similarity_block(q, docs[start:start + step], metric)


def _check_dims(q: np.ndarray, d: np.ndarray) -> None:
    if q.shape[-1] != d.shape[-1]:
        raise DimensionMismatch(f"query dim {q.shape[-1]} != document dim {d.shape[-1]}")


def pair_similarity(a, b, metric: SimilarityMetric | str = SimilarityMetric.COSINE) -> float:
    """Similarity of two single embeddings: dot product or ``-||a-b||^2``."""
    metric = SimilarityMetric.parse(metric)
    a = np.asarray(a).reshape(1, -1)
    b = np.asarray(b).reshape(1, 1, -1)
    _check_dims(a, b)
    return float(_similarity_block(a, b, metric)[0, 0, 0])


def _rows(x) -> np.ndarray:
    return x.embeddings if hasattr(x, "embeddings") else np.asarray(x)


def similarity_matrix(q, d, metric: SimilarityMetric | str = SimilarityMetric.COSINE) -> np.ndarray:
    """Full ``(n_q, n_d)`` cross-match matrix in float64."""
    metric = SimilarityMetric.parse(metric)
    qe, de = _rows(q), _rows(d)
    _check_dims(qe, de)
    return _similarity_block(qe, de[None], metric)[0]


def maxsim_score(q, d, metric: SimilarityMetric | str = SimilarityMetric.COSINE) -> float:
    """Sum over query rows of the best-matching document row similarity."""
    metric = SimilarityMetric.parse(metric)
    qe, de = _rows(q), _rows(d)
    if de.shape[0] == 0:
        raise EmptyDocument(f"document {getattr(d, 'doc_id', None)!r} has no embeddings")
    _check_dims(qe, de)
    sims = _similarity_block(qe, de[None], metric)
    return float(sims.max(axis=2).sum(axis=1)[0])


def avgsim_score(q, d, metric: SimilarityMetric | str = SimilarityMetric.COSINE) -> float:
    """Like :func:`maxsim_score` with the max replaced by a mean over document rows."""
    metric = SimilarityMetric.parse(metric)
    qe, de = _rows(q), _rows(d)
    if de.shape[0] == 0:
        raise EmptyDocument(f"document {getattr(d, 'doc_id', None)!r} has no embeddings")
    _check_dims(qe, de)
    sims = _similarity_block(qe, de[None], metric)
    return float(sims.mean(axis=2).sum(axis=1)[0])


def batch_maxsim(q, docs: PaddedDocBatch,
                 metric: SimilarityMetric | str = SimilarityMetric.COSINE) -> np.ndarray:
    """Score every document of a padded batch; returns float64 scores in batch order.

    Padding rows are forced to ``-inf`` similarity so they can never win a max.
    """
    metric = SimilarityMetric.parse(metric)
    qe = _rows(q)
    if len(docs) == 0:
        return np.zeros(0, dtype=np.float64)
    if np.any(docs.lengths == 0):
        bad = int(np.argmin(docs.lengths))
        raise EmptyDocument(f"document {docs.doc_ids[bad]!r} in batch has length 0")
    _check_dims(qe, docs.embeddings)
    mask = docs.mask()
    scores = np.empty(len(docs), dtype=np.float64)
    for start, sims in _chunked_similarity(qe, docs.embeddings, metric):
        stop = start + sims.shape[0]
        sims[~mask[start:stop][:, None, :].repeat(sims.shape[1], axis=1)] = -np.inf
        scores[start:stop] = sims.max(axis=2).sum(axis=1)
    return scores
