"""Query and document encoders.

The deep language model is replaced by a deterministic toy embedder: every
token id gets a pseudo-random base vector derived from ``(seed, id)``, and each
position is then mixed with its neighbours using triangular weights so the
output depends on context. Everything after that mirrors the real pipeline:
marker tokens, query augmentation with ``[MASK]``, a bias-free linear
projection, L2 normalisation and punctuation filtering for documents.
"""

from __future__ import annotations

import hashlib
import logging
import re
import string
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .core import DocRepresentation, QueryRepresentation, SimilarityMetric

logger = logging.getLogger(__name__)

CLS, Q_MARKER, D_MARKER, MASK, UNK = "[CLS]", "[Q]", "[D]", "[MASK]", "[UNK]"
SPECIAL_TOKENS = (CLS, Q_MARKER, D_MARKER, MASK, UNK)
DEFAULT_PUNCTUATION = frozenset(string.punctuation)

# Guard for normalising (near-)zero rows; also used by the trainer's derivative.
NORM_EPS = 1e-12

_TOKEN_RE = re.compile(r"[^\W_]+|[^\w\s]|_")


def tokenize(text: str) -> list[str]:
    """Lowercase and split into word runs; every punctuation char is its own token."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class EncoderConfig:
    n_q: int = 32
    dim: int = 128
    base_dim: int = 256
    context_window: int = 2
    metric: SimilarityMetric = SimilarityMetric.COSINE
    punctuation: frozenset = DEFAULT_PUNCTUATION
    seed: int = 0
    max_doc_len: int = 180
    vocab_buckets: int = 1 << 20

    def __post_init__(self):
        object.__setattr__(self, "metric", SimilarityMetric.parse(self.metric))
        object.__setattr__(self, "punctuation", frozenset(self.punctuation))
        if self.n_q < 2:
            raise ValueError("n_q must leave room for [CLS] and [Q] (n_q >= 2)")
        if self.dim < 1 or self.base_dim < 1:
            raise ValueError("dimensions must be positive")
        if self.dim > self.base_dim:
            raise ValueError(f"dim ({self.dim}) must not exceed base_dim ({self.base_dim})")
        if self.context_window < 0:
            raise ValueError("context_window must be non-negative")
        if self.max_doc_len < 2:
            raise ValueError("max_doc_len must fit [CLS] and [D]")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def to_dict(self) -> dict:
        return {
            "n_q": self.n_q, "dim": self.dim, "base_dim": self.base_dim,
            "context_window": self.context_window, "metric": self.metric.value,
            "punctuation": "".join(sorted(self.punctuation)), "seed": self.seed,
            "max_doc_len": self.max_doc_len, "vocab_buckets": self.vocab_buckets,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EncoderConfig":
        data = dict(data)
        if "punctuation" in data and isinstance(data["punctuation"], str):
            data["punctuation"] = frozenset(data["punctuation"])
        return cls(**data)


class Vocabulary:
    """Token to id map with reserved ids 0..4 for the special tokens.

    With an explicit word list the vocabulary is closed and unknown words map
    to ``[UNK]``. Without one, ordinary tokens are hashed into
    ``buckets`` stable ids so arbitrary corpora need no vocabulary file.
    """

    def __init__(self, words: Iterable[str] | None = None, buckets: int = 1 << 20):
        self.specials = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
        self.words: dict[str, int] | None = None
        if words is not None:
            self.words = {}
            for w in words:
                if w not in self.words and w not in self.specials:
                    self.words[w] = len(self.specials) + len(self.words)
            self.size = len(self.specials) + len(self.words)
        else:
            if buckets < 1:
                raise ValueError("buckets must be positive")
            self.buckets = buckets
            self.size = len(self.specials) + buckets

    def __len__(self) -> int:
        return self.size

    def __getitem__(self, token: str) -> int:
        special = self.specials.get(token)
        if special is not None:
            return special
        if self.words is not None:
            return self.words.get(token, self.specials[UNK])
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return len(self.specials) + int.from_bytes(digest, "little") % self.buckets

    def ids(self, tokens: Sequence[str]) -> np.ndarray:
        return np.fromiter((self[t] for t in tokens), dtype=np.int64, count=len(tokens))


@dataclass
class ProjectionLayer:
    """Bias-free linear map from the base width to the embedding width."""

    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("projection weights must be a matrix")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("projection weights must be finite")

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape

    @classmethod
    def random(cls, base_dim: int, dim: int, seed: int = 0) -> "ProjectionLayer":
        rng = np.random.default_rng([seed, 0x9E0])
        return cls(rng.standard_normal((base_dim, dim)) / np.sqrt(base_dim))

    @classmethod
    def for_config(cls, cfg: EncoderConfig) -> "ProjectionLayer":
        return cls.random(cfg.base_dim, cfg.dim, cfg.seed)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.save(fh, self.weights, allow_pickle=False)

    @classmethod
    def load(cls, path) -> "ProjectionLayer":
        return cls(np.load(path, allow_pickle=False))

    def copy(self) -> "ProjectionLayer":
        return ProjectionLayer(self.weights.copy())


def augment_query(tokens: Sequence[str], cfg: EncoderConfig) -> list[str]:
    """``[CLS] [Q] t1..tl`` then ``[MASK]`` up to exactly ``n_q`` positions."""
    payload = list(tokens)[: cfg.n_q - 2]
    out = [CLS, Q_MARKER] + payload
    out.extend([MASK] * (cfg.n_q - len(out)))
    return out


def document_tokens(tokens: Sequence[str], cfg: EncoderConfig) -> list[str]:
    return ([CLS, D_MARKER] + list(tokens))[: cfg.max_doc_len]


def l2_normalize(x: np.ndarray) -> np.ndarray:
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True) + NORM_EPS)
    return x / norms


def triangular_weights(window: int) -> np.ndarray:
    offsets = np.arange(-window, window + 1)
    return (window + 1 - np.abs(offsets)).astype(np.float64)


class ToyEmbedder:
    """Deterministic contextual stand-in for the transformer.

    Instances keep a cache of base vectors and are safe to share read-only.
    """

    def __init__(self, cfg: EncoderConfig, vocab: Vocabulary | None = None):
        self.cfg = cfg
        self.vocab = vocab or Vocabulary(buckets=cfg.vocab_buckets)
        self._cache: dict[int, np.ndarray] = {}

    def base_vector(self, token_id: int) -> np.ndarray:
        vec = self._cache.get(token_id)
        if vec is None:
            rng = np.random.default_rng([self.cfg.seed, int(token_id)])
            vec = rng.standard_normal(self.cfg.base_dim)
            self._cache[token_id] = vec
        return vec

    def contextualize_batch(self, id_batch: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        """Embed a batch of id sequences padded to the batch's own max length.

        Returns ``(hidden, lengths)`` with ``hidden`` of shape
        ``(batch, width, base_dim)``; padding positions are zero and excluded
        from every neighbour sum.
        """
        lengths = np.array([len(ids) for ids in id_batch], dtype=np.int64)
        width = int(lengths.max()) if len(lengths) else 0
        base = np.zeros((len(id_batch), width, self.cfg.base_dim))
        for b, ids in enumerate(id_batch):
            for pos, tid in enumerate(ids):
                base[b, pos] = self.base_vector(int(tid))
        w = self.cfg.context_window
        mixed = np.zeros_like(base)
        for offset, weight in zip(range(-w, w + 1), triangular_weights(w)):
            lo, hi = max(0, -offset), min(width, width - offset)
            if lo >= hi:
                continue
            mixed[:, lo:hi] += weight * base[:, lo + offset:hi + offset]
        hidden = l2_normalize(mixed)
        pad = np.arange(width)[None, :] >= lengths[:, None]
        hidden[pad] = 0.0
        return hidden, lengths

    def embed(self, tokens: Sequence[str]) -> np.ndarray:
        hidden, _ = self.contextualize_batch([self.vocab.ids(tokens)])
        return hidden[0]


def toy_embed(tokens: Sequence[str], cfg: EncoderConfig) -> np.ndarray:
    """Contextual base embeddings, shape ``(len(tokens), base_dim)``."""
    return ToyEmbedder(cfg).embed(tokens)


class ColEncoder:
    """Query/document encoder bound to one config and projection.

    ``query_encodes`` counts calls to :meth:`encode_query`; serving code uses it
    to check that a query is encoded once however many documents it ranks.
    """

    def __init__(self, cfg: EncoderConfig | None = None, proj: ProjectionLayer | None = None,
                 vocab: Vocabulary | None = None):
        self.cfg = cfg or EncoderConfig()
        self.proj = proj if proj is not None else ProjectionLayer.for_config(self.cfg)
        if self.proj.shape != (self.cfg.base_dim, self.cfg.dim):
            raise ValueError(f"projection shape {self.proj.shape} does not match "
                             f"({self.cfg.base_dim}, {self.cfg.dim})")
        self.embedder = ToyEmbedder(self.cfg, vocab)
        self.query_encodes = 0

    def with_projection(self, proj: ProjectionLayer) -> "ColEncoder":
        return ColEncoder(self.cfg, proj, self.embedder.vocab)

    def query_tokens(self, text: str) -> list[str]:
        return augment_query(tokenize(text), self.cfg)

    def doc_tokens(self, text: str) -> list[str]:
        return document_tokens(tokenize(text), self.cfg)

    def _project(self, hidden: np.ndarray) -> np.ndarray:
        return l2_normalize(hidden @ self.proj.weights).astype(np.float32)

    def encode_query(self, text: str, query_id=None) -> QueryRepresentation:
        self.query_encodes += 1
        tokens = self.query_tokens(text)
        hidden = self.embedder.embed(tokens)
        return QueryRepresentation(self._project(hidden), query_id)

    def keep_mask(self, tokens: Sequence[str]) -> np.ndarray:
        punct = self.cfg.punctuation
        return np.array([t in SPECIAL_TOKENS or t not in punct for t in tokens], dtype=bool)

    def encode_docs(self, texts: Sequence[str], doc_ids: Sequence | None = None) -> list[DocRepresentation]:
        """Encode a batch of documents in one padded pass.

        Padding only affects the shared tensor; each document's rows are
        identical to encoding it alone.
        """
        if doc_ids is None:
            doc_ids = [None] * len(texts)
        token_lists = [self.doc_tokens(t) for t in texts]
        if not token_lists:
            return []
        hidden, lengths = self.embedder.contextualize_batch(
            [self.embedder.vocab.ids(toks) for toks in token_lists])
        out = []
        for b, toks in enumerate(token_lists):
            rows = self._project(hidden[b, : lengths[b]])
            out.append(DocRepresentation(rows[self.keep_mask(toks)], doc_ids[b]))
        return out

    def encode_doc(self, text: str, doc_id=None) -> DocRepresentation:
        return self.encode_docs([text], [doc_id])[0]


def encode_query(text: str, cfg: EncoderConfig, proj: ProjectionLayer) -> QueryRepresentation:
    return ColEncoder(cfg, proj).encode_query(text)


def encode_doc(text: str, cfg: EncoderConfig, proj: ProjectionLayer) -> DocRepresentation:
    return ColEncoder(cfg, proj).encode_doc(text)


def content_rows(doc: DocRepresentation) -> int:
    """Rows left after removing the two always-present marker rows."""
    return doc.length - 2
