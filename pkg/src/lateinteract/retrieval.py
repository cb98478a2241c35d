"""Query serving: exhaustive re-ranking and two-stage end-to-end retrieval.

Stage 1 issues one nearest-neighbour search per query embedding and maps the
hits back to their documents; stage 2 re-scores that candidate set with exact
MaxSim over the stored (full-precision) embeddings. Approximate stage-1
distances never influence the final order.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .ann import IvfPqIndex, flat_top_ordinals
from .core import PaddedDocBatch, QueryRepresentation, batch_maxsim, maxsim_score
from .encoder import ColEncoder
from .indexer import EmbeddingIndex

logger = logging.getLogger(__name__)

GATHER_BATCH = 256


class Mode(str, enum.Enum):
    RERANK = "rerank"
    END_TO_END = "e2e"
    END_TO_END_EXACT = "e2e-exact"


@dataclass(frozen=True)
class RetrievalParams:
    k: int = 1000
    k_prime: int | None = None
    probes: int | None = None
    mode: Mode = Mode.END_TO_END

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.k_prime is not None and self.k_prime < 1:
            raise ValueError("k_prime must be >= 1")

    @property
    def depth(self) -> int:
        return self.k if self.k_prime is None else self.k_prime


@dataclass
class RankedList:
    """Documents in descending score order; ties resolved by ascending ordinal."""

    doc_ids: list[str] = field(default_factory=list)
    ordinals: list[int] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.doc_ids)

    def __iter__(self):
        return iter(zip(self.doc_ids, self.scores))

    @classmethod
    def from_scores(cls, index: EmbeddingIndex, ordinals: np.ndarray, scores: np.ndarray,
                    k: int) -> "RankedList":
        ordinals = np.asarray(ordinals, dtype=np.int64)
        scores = np.asarray(scores, dtype=np.float64)
        order = np.lexsort((ordinals, -scores))[:k]
        ords = ordinals[order].tolist()
        return cls([index.docids[o] for o in ords], ords, scores[order].tolist())


def rerank(q: QueryRepresentation, candidates: Iterable, index: EmbeddingIndex, k: int,
           batch_size: int = GATHER_BATCH) -> RankedList:
    """Score candidate documents exhaustively and keep the top ``k``.

    ``candidates`` may be doc ids (str) or ordinals (int). Unknown ids are
    skipped with a warning; repeated candidates are scored once.
    """
    ords = []
    seen = set()
    missing = 0
    for cand in candidates:
        o = cand if isinstance(cand, (int, np.integer)) else index.ordinal(cand)
        if o is None or not 0 <= o < index.doc_count:
            missing += 1
            continue
        if o not in seen:
            seen.add(int(o))
            ords.append(int(o))
    if missing:
        logger.warning("skipped %d candidate(s) not present in the index", missing)
    if not ords:
        return RankedList()
    ords_arr = np.asarray(ords, dtype=np.int64)
    scores = np.empty(len(ords_arr), dtype=np.float64)
    for start in range(0, len(ords_arr), batch_size):
        chunk = ords_arr[start:start + batch_size]
        scores[start:start + len(chunk)] = batch_maxsim(q, gather(index, chunk), index.metric)
    return RankedList.from_scores(index, ords_arr, scores, k)


def gather(index: EmbeddingIndex, ordinals: Sequence[int]) -> PaddedDocBatch:
    """Stack stored document matrices, padded to the longest one in the group."""
    lengths = index.doclens[np.asarray(ordinals, dtype=np.int64)]
    width = int(lengths.max())
    out = np.zeros((len(ordinals), width, index.dim), dtype=np.float32)
    for i, o in enumerate(ordinals):
        out[i, : lengths[i]] = index.doc_matrix(int(o))
    return PaddedDocBatch(out, lengths, [index.docids[int(o)] for o in ordinals])


def stage1_candidates(q: QueryRepresentation, ann: IvfPqIndex, emb2doc: np.ndarray,
                      k_prime: int, probes: int | None = None) -> np.ndarray:
    """Union of the documents owning each query row's ``k_prime`` nearest embeddings."""
    docs = set()
    for row in q.embeddings:
        for ordinal, _ in ann.search(row, k_prime, probes):
            docs.add(int(emb2doc[ordinal]))
    return np.array(sorted(docs), dtype=np.int64)


def exact_stage1_candidates(q: QueryRepresentation, index: EmbeddingIndex,
                            k_prime: int) -> np.ndarray:
    hits = [index.emb2doc[flat_top_ordinals(index.embeddings, row, k_prime)]
            for row in q.embeddings]
    return np.unique(np.concatenate(hits)).astype(np.int64)


def retrieve(q: QueryRepresentation, params: RetrievalParams, index: EmbeddingIndex,
             ann: IvfPqIndex | None = None, candidates: Iterable | None = None) -> RankedList:
    if params.mode is Mode.RERANK:
        if candidates is None:
            raise ValueError("rerank mode needs an externally supplied candidate list")
        return rerank(q, candidates, index, params.k)
    if params.mode is Mode.END_TO_END:
        if ann is None:
            raise ValueError("end-to-end mode needs an IVF-PQ index")
        cand = stage1_candidates(q, ann, index.emb2doc, params.depth, params.probes)
    else:
        cand = exact_stage1_candidates(q, index, params.depth)
    return rerank(q, cand.tolist(), index, params.k)


def brute_force_ranking(q: QueryRepresentation, index: EmbeddingIndex, k: int) -> RankedList:
    """Reference ranking: every document scored on its own with :func:`maxsim_score`."""
    scores = np.array([maxsim_score(q, index.doc_matrix(i), index.metric)
                       for i in range(index.doc_count)])
    return RankedList.from_scores(index, np.arange(index.doc_count), scores, k)


class Searcher:
    """Text-in, ranking-out front end over an index (and optional ANN index)."""

    def __init__(self, index: EmbeddingIndex, encoder: ColEncoder | None = None,
                 ann: IvfPqIndex | None = None):
        self.index = index
        self.encoder = encoder or index.encoder()
        if self.encoder is None:
            raise ValueError("index was built from precomputed embeddings; pass an encoder")
        if self.encoder.cfg.dim != index.dim:
            raise ValueError("encoder and index dimensions differ")
        self.ann = ann

    def rerank(self, query: str, candidates: Iterable, k: int = 1000) -> RankedList:
        return rerank(self.encoder.encode_query(query), candidates, self.index, k)

    def search(self, query: str, params: RetrievalParams, candidates: Iterable | None = None) -> RankedList:
        return retrieve(self.encoder.encode_query(query), params, self.index, self.ann, candidates)


def write_run(path, runs: dict, tag: str = "lateinteract") -> None:
    """Write ``qid Q0 docid rank score tag`` lines, ranks starting at 1."""
    with open(path, "w", encoding="utf-8") as fh:
        for qid, ranked in runs.items():
            for rank, (doc_id, score) in enumerate(ranked, 1):
                fh.write(f"{qid} Q0 {doc_id} {rank} {score:.6f} {tag}\n")
