"""IVF-PQ approximate nearest-neighbour search over document embeddings.

A k-means coarse quantizer routes every embedding to one of ``P`` cells; the
embedding itself is stored as ``s`` one-byte product-quantization codes. PQ
codebooks are trained on raw vectors (not on residuals from the cell
centroid). Distances are always squared L2; for unit-norm embeddings this
orders neighbours exactly like cosine similarity.
"""

from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (ChecksumMismatch, DimensionMismatch, DuplicateOrdinal, MalformedFile,
                     UntrainedIndex, VersionMismatch)

logger = logging.getLogger(__name__)

KSUB = 256
_BLOCK = 1 << 22


@dataclass(frozen=True)
class AnnConfig:
    partitions: int = 2000
    probes: int = 10
    subvectors: int = 16
    kmeans_iters: int = 20
    train_sample: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.partitions < 1 or self.subvectors < 1 or self.kmeans_iters < 0:
            raise ValueError("partitions and subvectors must be positive")
        if not 1 <= self.probes <= self.partitions:
            raise ValueError(f"probes must lie in [1, {self.partitions}]")

    @property
    def sample_size(self) -> int:
        return self.train_sample if self.train_sample is not None else KSUB * self.partitions


# -- k-means ------------------------------------------------------------------

@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    sse_history: list[float] = field(default_factory=list)

    @property
    def sse(self) -> float:
        return self.sse_history[-1]


def _nearest(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the nearest centroid for every row (first index on ties)."""
    c_sq = (centroids * centroids).sum(axis=1)
    step = max(1, _BLOCK // max(1, len(centroids)))
    out = np.empty(len(x), dtype=np.int64)
    for start in range(0, len(x), step):
        block = x[start:start + step]
        d = c_sq[None, :] - 2.0 * block @ centroids.T
        out[start:start + step] = d.argmin(axis=1)
    return out


def _sse(x: np.ndarray, centroids: np.ndarray, assign: np.ndarray) -> float:
    diff = x - centroids[assign]
    return float((diff * diff).sum())


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            # fewer distinct points than clusters: duplicate an unused point
            free = np.setdiff1d(np.arange(n), chosen, assume_unique=False)
            idx = int(rng.choice(free)) if len(free) else int(rng.integers(n))
        chosen.append(idx)
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return x[chosen].copy()


def _reseed_empty(x, centroids, assign, counts):
    """Move each empty centroid onto the farthest point of the largest cluster."""
    taken: set[int] = set()
    for c in np.flatnonzero(counts == 0):
        big = int(np.argmax(counts))
        members = np.flatnonzero(assign == big)
        dist = ((x[members] - centroids[big]) ** 2).sum(axis=1)
        for j in np.argsort(-dist, kind="stable"):
            if int(members[j]) not in taken:
                taken.add(int(members[j]))
                centroids[c] = x[members[j]]
                break
        counts[c] = -1  # not eligible as "largest" again in this pass


def kmeans(vectors, k: int, iters: int = 20, seed=0) -> KMeansResult:
    """Lloyd's algorithm from a k-means++ start.

    ``sse_history[t]`` is the within-cluster sum of squares after the t-th
    assignment step; it never increases.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("kmeans expects a 2-D sample matrix")
    if len(x) < k:
        raise ValueError(f"need at least {k} training vectors, got {len(x)}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(x, k, rng)
    assign = _nearest(x, centroids)
    history = [_sse(x, centroids, assign)]
    for _ in range(iters):
        counts = np.bincount(assign, minlength=k)
        sums = np.stack([np.bincount(assign, weights=x[:, j], minlength=k)
                         for j in range(x.shape[1])], axis=1)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        if not np.all(nonempty):
            _reseed_empty(x, centroids, assign, counts.copy())
        new_assign = _nearest(x, centroids)
        history.append(_sse(x, centroids, new_assign))
        if np.array_equal(new_assign, assign) and np.all(nonempty):
            break
        assign = new_assign
    return KMeansResult(centroids, assign, history)


# -- product quantization -------------------------------------------------------

def train_pq(vectors, s: int, seed=0, iters: int = 20) -> np.ndarray:
    """Per-subspace 256-word codebooks, shape ``(s, 256, dim // s)``."""
    x = np.asarray(vectors, dtype=np.float64)
    dim = x.shape[1]
    if s < 1 or dim % s:
        raise ValueError(f"subvector count {s} does not divide dimension {dim}")
    if len(x) < KSUB:
        raise ValueError(f"PQ training needs at least {KSUB} vectors, got {len(x)}")
    dsub = dim // s
    books = np.empty((s, KSUB, dsub), dtype=np.float32)
    for j in range(s):
        books[j] = kmeans(x[:, j * dsub:(j + 1) * dsub], KSUB, iters, seed=[seed, j]).centroids
    return books


def encode_pq(vectors, codebooks: np.ndarray) -> np.ndarray:
    """Nearest-codeword ids per subspace; ``uint8`` of shape ``(n, s)`` (or ``(s,)``)."""
    x = np.asarray(vectors, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    s, ksub, dsub = codebooks.shape
    if x.shape[1] != s * dsub:
        raise DimensionMismatch(f"vector dim {x.shape[1]} != codebook dim {s * dsub}")
    books = codebooks.astype(np.float64)
    codes = np.empty((len(x), s), dtype=np.uint8)
    step = max(1, _BLOCK // (ksub * dsub))
    for j in range(s):
        sub = x[:, j * dsub:(j + 1) * dsub]
        for start in range(0, len(x), step):
            diff = sub[start:start + step, None, :] - books[j][None, :, :]
            codes[start:start + step, j] = (diff * diff).sum(axis=2).argmin(axis=1)
    return codes[0] if single else codes


def reconstruct(codes, codebooks: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes)
    s = codebooks.shape[0]
    parts = [codebooks[j][codes[..., j]] for j in range(s)]
    return np.concatenate(parts, axis=-1)


def adc_table(query, codebooks: np.ndarray) -> np.ndarray:
    """``table[j, c] = ||query_j - codeword_{j,c}||^2`` for one query vector."""
    s, _, dsub = codebooks.shape
    q = np.asarray(query, dtype=np.float64).reshape(s, 1, dsub)
    diff = q - codebooks.astype(np.float64)
    return (diff * diff).sum(axis=2)


def _top_k(ordinals: np.ndarray, dists: np.ndarray, k: int) -> list[tuple[int, float]]:
    order = np.lexsort((ordinals, dists))[:k]
    return [(int(ordinals[i]), float(dists[i])) for i in order]


def flat_distances(vectors, query) -> np.ndarray:
    """Exact squared L2 distance from ``query`` to every row, in float64."""
    x = np.asarray(vectors)
    q = np.asarray(query, dtype=np.float64)
    dists = np.empty(len(x), dtype=np.float64)
    step = max(1, _BLOCK // max(1, x.shape[1]))
    for start in range(0, len(x), step):
        diff = x[start:start + step].astype(np.float64) - q
        dists[start:start + step] = (diff * diff).sum(axis=1)
    return dists


def flat_top_ordinals(vectors, query, k: int) -> np.ndarray:
    """Ordinals of the exact top-``k`` (same order and tie rule as the list form)."""
    if k <= 0:
        raise ValueError("k must be positive")
    dists = flat_distances(vectors, query)
    return np.lexsort((np.arange(len(dists)), dists))[:k]


def exact_flat_search(vectors, query, k: int) -> list[tuple[int, float]]:
    """Exhaustive squared-L2 search; ties go to the lower ordinal."""
    if k <= 0:
        raise ValueError("k must be positive")
    return _top_k(np.arange(len(vectors)), flat_distances(vectors, query), k)


# -- the index ------------------------------------------------------------------

_MAGIC = b"LSIVFPQ1"
_VERSION = 1
_HEADER = struct.Struct("<8sIIIIIBQ")


class IvfPqIndex:
    """Inverted lists of PQ codes keyed by coarse k-means cell."""

    def __init__(self, centroids: np.ndarray | None = None, codebooks: np.ndarray | None = None,
                 default_probes: int = 10):
        self.centroids = None if centroids is None else np.asarray(centroids, dtype=np.float32)
        self.codebooks = None if codebooks is None else np.asarray(codebooks, dtype=np.float32)
        self.default_probes = default_probes
        self._ords: list[list[np.ndarray]] = []
        self._codes: list[list[np.ndarray]] = []
        self._seen: set[int] = set()
        if self.trained:
            self._ords = [[] for _ in range(self.partitions)]
            self._codes = [[] for _ in range(self.partitions)]

    @property
    def trained(self) -> bool:
        return self.centroids is not None and self.codebooks is not None

    @property
    def partitions(self) -> int:
        return len(self.centroids)

    @property
    def subvectors(self) -> int:
        return self.codebooks.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    @property
    def ntotal(self) -> int:
        return len(self._seen)

    @classmethod
    def train(cls, vectors, cfg: AnnConfig) -> "IvfPqIndex":
        x = np.asarray(vectors, dtype=np.float32)
        if x.shape[1] % cfg.subvectors:
            raise ValueError(f"subvectors ({cfg.subvectors}) must divide dim ({x.shape[1]})")
        rng = np.random.default_rng([cfg.seed, 1])
        n = min(cfg.sample_size, len(x))
        sample = x[np.sort(rng.choice(len(x), size=n, replace=False))] if n < len(x) else x
        if len(sample) < cfg.partitions:
            raise ValueError(f"{len(sample)} training vectors for {cfg.partitions} partitions")
        logger.info("training coarse quantizer: %d cells on %d vectors", cfg.partitions, len(sample))
        coarse = kmeans(sample, cfg.partitions, cfg.kmeans_iters, seed=[cfg.seed, 2])
        logger.info("training PQ: %d subvectors", cfg.subvectors)
        books = train_pq(sample, cfg.subvectors, seed=cfg.seed, iters=cfg.kmeans_iters)
        return cls(coarse.centroids, books, cfg.probes)

    def assign(self, vectors) -> np.ndarray:
        return _nearest(np.atleast_2d(np.asarray(vectors, dtype=np.float64)),
                        self.centroids.astype(np.float64))

    def add(self, vectors, ordinals=None) -> None:
        if not self.trained:
            raise UntrainedIndex("train the index before adding vectors")
        x = np.atleast_2d(np.asarray(vectors, dtype=np.float32))
        if x.shape[1] != self.dim:
            raise DimensionMismatch(f"vector dim {x.shape[1]} != index dim {self.dim}")
        if ordinals is None:
            start = max(self._seen) + 1 if self._seen else 0
            ordinals = np.arange(start, start + len(x))
        ordinals = np.asarray(ordinals, dtype=np.int64)
        if len(ordinals) != len(x):
            raise ValueError("one ordinal per vector is required")
        uniq = np.unique(ordinals)
        if len(uniq) != len(ordinals) or self._seen.intersection(uniq.tolist()):
            raise DuplicateOrdinal("ordinal already present in the index")
        cells = self.assign(x)
        codes = encode_pq(x, self.codebooks)
        order = np.argsort(cells, kind="stable")
        bounds = np.searchsorted(cells[order], np.arange(self.partitions + 1))
        for c in range(self.partitions):
            sel = order[bounds[c]:bounds[c + 1]]
            if len(sel):
                self._ords[c].append(ordinals[sel])
                self._codes[c].append(codes[sel])
        self._seen.update(ordinals.tolist())

    def inverted_list(self, cell: int) -> tuple[np.ndarray, np.ndarray]:
        ords, codes = self._ords[cell], self._codes[cell]
        if not ords:
            return np.zeros(0, dtype=np.int64), np.zeros((0, self.subvectors), dtype=np.uint8)
        if len(ords) > 1:
            self._ords[cell] = [np.concatenate(ords)]
            self._codes[cell] = [np.concatenate(codes)]
        return self._ords[cell][0], self._codes[cell][0]

    def list_sizes(self) -> np.ndarray:
        return np.array([sum(len(o) for o in ords) for ords in self._ords], dtype=np.int64)

    def nearest_cells(self, query, probes: int) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64)
        diff = self.centroids.astype(np.float64) - q
        d = (diff * diff).sum(axis=1)
        return np.lexsort((np.arange(len(d)), d))[:probes]

    def search(self, query, k: int, probes: int | None = None) -> list[tuple[int, float]]:
        """Top-``k`` (ordinal, approximate squared distance), nearest first."""
        if k <= 0:
            raise ValueError("k must be positive")
        if not self.trained:
            raise UntrainedIndex("index is not trained")
        probes = self.default_probes if probes is None else probes
        if not 1 <= probes <= self.partitions:
            raise ValueError(f"probes must lie in [1, {self.partitions}]")
        if self.ntotal == 0:
            raise ValueError("index is empty")
        table = adc_table(query, self.codebooks)
        cols = np.arange(self.subvectors)
        ords, dists = [], []
        for cell in self.nearest_cells(query, probes):
            o, codes = self.inverted_list(int(cell))
            if len(o):
                ords.append(o)
                dists.append(table[cols[None, :], codes].sum(axis=1))
        if not ords:
            return []
        return _top_k(np.concatenate(ords), np.concatenate(dists), k)

    # -- persistence --

    def to_bytes(self) -> bytes:
        if not self.trained:
            raise UntrainedIndex("cannot serialise an untrained index")
        parts = [_HEADER.pack(_MAGIC, _VERSION, self.partitions, self.default_probes,
                              self.subvectors, self.dim, 0, self.ntotal),
                 self.centroids.astype("<f4").tobytes(),
                 self.codebooks.astype("<f4").tobytes()]
        for c in range(self.partitions):
            o, codes = self.inverted_list(c)
            parts.append(struct.pack("<I", len(o)))
            parts.append(o.astype("<u4").tobytes())
            parts.append(codes.astype(np.uint8).tobytes())
        body = b"".join(parts)
        return body + struct.pack("<I", zlib.crc32(body))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "IvfPqIndex":
        raw = Path(path).read_bytes()
        if len(raw) < _HEADER.size + 4:
            raise MalformedFile(f"{path}: too short for an IVF-PQ index")
        body, (stored,) = raw[:-4], struct.unpack("<I", raw[-4:])
        if zlib.crc32(body) != stored:
            raise ChecksumMismatch(f"{path}: CRC32 mismatch")
        magic, version, P, probes, s, dim, _metric, ntotal = _HEADER.unpack_from(body)
        if magic != _MAGIC:
            raise MalformedFile(f"{path}: bad magic {magic!r}")
        if version != _VERSION:
            raise VersionMismatch(f"{path}: unsupported version {version}")
        if s == 0 or dim % s:
            raise MalformedFile(f"{path}: subvectors {s} incompatible with dim {dim}")
        pos = _HEADER.size
        try:
            centroids = np.frombuffer(body, "<f4", P * dim, pos).reshape(P, dim)
            pos += P * dim * 4
            books = np.frombuffer(body, "<f4", s * KSUB * (dim // s), pos).reshape(s, KSUB, dim // s)
            pos += books.size * 4
            index = cls(centroids.copy(), books.copy(), probes)
            for c in range(P):
                (n,) = struct.unpack_from("<I", body, pos)
                pos += 4
                o = np.frombuffer(body, "<u4", n, pos).astype(np.int64)
                pos += 4 * n
                codes = np.frombuffer(body, np.uint8, n * s, pos).reshape(n, s).copy()
                pos += n * s
                if n:
                    index._ords[c].append(o)
                    index._codes[c].append(codes)
                    index._seen.update(o.tolist())
        except (ValueError, struct.error) as exc:
            raise MalformedFile(f"{path}: truncated IVF-PQ index ({exc})") from exc
        if pos != len(body) or index.ntotal != ntotal:
            raise MalformedFile(f"{path}: inconsistent IVF-PQ index body")
        return index
