"""Offline indexing of a corpus into an on-disk multi-vector store.

An index directory holds::

    manifest.json   human-readable metadata, per-file CRC32s, own CRC32
    doclens.bin     u32 LE rows per document            + u32 CRC32 trailer
    payload.bin     concatenated rows, <f4 or <f2       + u32 CRC32 trailer
    emb2doc.bin     u32 LE doc ordinal per embedding    + u32 CRC32 trailer
    docids.tsv      "ordinal<TAB>doc_id" lines          + "#crc32<TAB>hex" line
    projection.npy  encoder projection (text-built indexes only)

Documents are processed in groups; each group is sorted by token length and
cut into batches so that padding only reaches the longest document of its own
batch. Batches may be encoded by several worker processes, but rows are always
written in corpus order by a single writer, so the files do not depend on the
worker count.
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import islice
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import multiprocessing as mp
import numpy as np

from .core import DocRepresentation, SimilarityMetric
from .encoder import ColEncoder, EncoderConfig, ProjectionLayer, content_rows, tokenize
from .errors import ChecksumMismatch, DimensionMismatch, MalformedFile, VersionMismatch

logger = logging.getLogger(__name__)

FORMAT_NAME = "lateinteract-index"
FORMAT_VERSION = 1
MANIFEST = "manifest.json"
DOCLENS = "doclens.bin"
PAYLOAD = "payload.bin"
EMB2DOC = "emb2doc.bin"
DOCIDS = "docids.tsv"
PROJECTION = "projection.npy"

_STORAGE_DTYPES = {4: np.dtype("<f4"), 2: np.dtype("<f2")}


@dataclass(frozen=True)
class IndexerConfig:
    group_size: int = 100_000
    batch_size: int = 128
    bytes_per_dim: int = 4
    workers: int = 1

    def __post_init__(self):
        if self.batch_size < 1 or self.group_size < 1 or self.workers < 1:
            raise ValueError("group_size, batch_size and workers must be positive")
        if self.batch_size > self.group_size:
            raise ValueError("batch_size must not exceed group_size")
        if self.bytes_per_dim not in _STORAGE_DTYPES:
            raise ValueError("bytes_per_dim must be 2 or 4")


# -- batching -----------------------------------------------------------------

def bucket_batches(lengths: Sequence[int], batch_size: int) -> list[list[int]]:
    """Sort positions by length (stable) and cut into batches of ``batch_size``.

    >>> bucket_batches([5, 50, 7, 49], 2)
    [[0, 2], [3, 1]]
    """
    if len(lengths) == 0:
        raise ValueError("cannot bucket an empty group")
    order = sorted(range(len(lengths)), key=lambda i: lengths[i])
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def sequential_batches(n: int, batch_size: int) -> list[list[int]]:
    return [list(range(i, min(n, i + batch_size))) for i in range(0, n, batch_size)]


def padded_widths(batches: Sequence[Sequence[int]], lengths: Sequence[int]) -> list[int]:
    return [max(lengths[i] for i in batch) for batch in batches]


def padding_waste(batches: Sequence[Sequence[int]], lengths: Sequence[int]) -> int:
    """Padded cells minus real cells over all batches."""
    return sum(len(b) * w - sum(lengths[i] for i in b)
               for b, w in zip(batches, padded_widths(batches, lengths)))


# -- checksummed file helpers -------------------------------------------------

def _crc_trailer(crc: int) -> bytes:
    return struct.pack("<I", crc & 0xFFFFFFFF)


def _write_array(path: Path, arr: np.ndarray) -> int:
    data = arr.tobytes()
    crc = zlib.crc32(data)
    with open(path, "wb") as fh:
        fh.write(data)
        fh.write(_crc_trailer(crc))
    return crc


def _read_checked(path: Path) -> bytes:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise MalformedFile(f"{path}: cannot read ({exc})") from exc
    if len(raw) < 4:
        raise MalformedFile(f"{path}: too short for a CRC32 trailer ({len(raw)} bytes)")
    body, (stored,) = raw[:-4], struct.unpack("<I", raw[-4:])
    actual = zlib.crc32(body)
    if actual != stored:
        raise ChecksumMismatch(f"{path}: CRC32 {actual:08x} != stored {stored:08x}")
    return body


def _docids_text(docids: Sequence[str]) -> bytes:
    body = "".join(f"{i}\t{d}\n" for i, d in enumerate(docids)).encode("utf-8")
    return body + f"#crc32\t{zlib.crc32(body):08x}\n".encode("ascii")


def _read_docids(path: Path) -> list[str]:
    raw = path.read_bytes()
    cut = raw.rstrip(b"\n").rfind(b"\n") + 1
    body, trailer = raw[:cut], raw[cut:].decode("ascii", "replace").strip()
    if not trailer.startswith("#crc32\t"):
        raise MalformedFile(f"{path}: missing CRC32 trailer line")
    stored = int(trailer.split("\t", 1)[1], 16)
    if zlib.crc32(body) != stored:
        raise ChecksumMismatch(f"{path}: CRC32 mismatch")
    out = []
    for lineno, line in enumerate(body.decode("utf-8").splitlines()):
        ordinal, _, doc_id = line.partition("\t")
        if ordinal != str(lineno):
            raise MalformedFile(f"{path}:{lineno + 1}: expected ordinal {lineno}, got {ordinal!r}")
        out.append(doc_id)
    return out


def _manifest_crc(manifest: dict) -> int:
    body = {k: v for k, v in manifest.items() if k != "crc32"}
    return zlib.crc32(json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8"))


def _file_crc(path: Path) -> int:
    crc = 0
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            crc = zlib.crc32(chunk, crc)
    return crc


# -- writer -------------------------------------------------------------------

class _IndexWriter:
    """Single writer that appends document matrices in corpus order."""

    def __init__(self, out_dir, dim: int, bytes_per_dim: int):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.dim = dim
        self.dtype = _STORAGE_DTYPES[bytes_per_dim]
        self.bytes_per_dim = bytes_per_dim
        self.doclens: list[int] = []
        self.docids: list[str] = []
        self.skipped: list[str] = []
        self._seen: set[str] = set()
        self._crc = 0
        self._fh = open(self.dir / PAYLOAD, "wb")

    def add(self, doc_id: str, rows: np.ndarray) -> None:
        if doc_id in self._seen:
            raise ValueError(f"duplicate document id {doc_id!r}")
        if rows.shape[1] != self.dim:
            raise DimensionMismatch(f"document {doc_id!r} has dim {rows.shape[1]}, index dim {self.dim}")
        self._seen.add(doc_id)
        data = np.ascontiguousarray(rows).astype(self.dtype).tobytes()
        offset = self._fh.tell()
        try:
            self._fh.write(data)
        except OSError as exc:
            raise OSError(f"{self._fh.name}: write failed at offset {offset}: {exc}") from exc
        self._crc = zlib.crc32(data, self._crc)
        self.doclens.append(rows.shape[0])
        self.docids.append(doc_id)

    def skip(self, doc_id: str, reason: str) -> None:
        if doc_id in self._seen:
            raise ValueError(f"duplicate document id {doc_id!r}")
        self._seen.add(doc_id)
        logger.warning("skipping document %r: %s", doc_id, reason)
        self.skipped.append(doc_id)

    def close(self, metric: SimilarityMetric, extra: dict | None = None) -> dict:
        self._fh.write(_crc_trailer(self._crc))
        self._fh.close()
        doclens = np.asarray(self.doclens, dtype="<u4")
        emb2doc = np.repeat(np.arange(len(doclens), dtype="<u4"), doclens.astype(np.int64))
        _write_array(self.dir / DOCLENS, doclens)
        _write_array(self.dir / EMB2DOC, emb2doc.astype("<u4"))
        (self.dir / DOCIDS).write_bytes(_docids_text(self.docids))
        manifest = {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "dim": self.dim,
            "metric": metric.value,
            "bytes_per_dim": self.bytes_per_dim,
            "doc_count": len(self.docids),
            "embedding_count": int(doclens.sum()),
            "skipped": list(self.skipped),
        }
        manifest.update(extra or {})
        files = [DOCLENS, PAYLOAD, EMB2DOC, DOCIDS]
        if (self.dir / PROJECTION).exists():
            files.append(PROJECTION)
        manifest["files"] = {name: {"bytes": (self.dir / name).stat().st_size,
                                    "crc32": f"{_file_crc(self.dir / name):08x}"} for name in files}
        manifest["crc32"] = f"{_manifest_crc(manifest):08x}"
        (self.dir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
        return manifest


# -- parallel encoding ----------------------------------------------------------

_WORKER_ENCODER: ColEncoder | None = None


def _init_worker(cfg: EncoderConfig, weights: np.ndarray) -> None:
    global _WORKER_ENCODER
    _WORKER_ENCODER = ColEncoder(cfg, ProjectionLayer(weights))


def _encode_batch(texts: list[str]) -> list[np.ndarray]:
    return [d.embeddings for d in _WORKER_ENCODER.encode_docs(texts)]


def _chunks(it: Iterable, size: int) -> Iterator[list]:
    it = iter(it)
    while chunk := list(islice(it, size)):
        yield chunk


def build_index(corpus: Iterable[tuple[str, str]], encoder: ColEncoder, out_path,
                idx_cfg: IndexerConfig | None = None) -> "EmbeddingIndex":
    """Encode ``(doc_id, text)`` pairs and persist them under ``out_path``.

    Documents whose every content token is punctuation (or that are empty)
    keep only their marker rows; they are listed in the manifest's ``skipped``
    field instead of being indexed.
    """
    idx_cfg = idx_cfg or IndexerConfig()
    out = Path(out_path)
    writer = _IndexWriter(out, encoder.cfg.dim, idx_cfg.bytes_per_dim)
    encoder.proj.save(out / PROJECTION)
    executor = None
    if idx_cfg.workers > 1:
        executor = ProcessPoolExecutor(
            max_workers=idx_cfg.workers, mp_context=mp.get_context("fork"),
            initializer=_init_worker, initargs=(encoder.cfg, encoder.proj.weights))
    total = 0
    try:
        for group in _chunks(corpus, idx_cfg.group_size):
            lengths = [min(len(tokenize(text)) + 2, encoder.cfg.max_doc_len) for _, text in group]
            batches = bucket_batches(lengths, idx_cfg.batch_size)
            texts = [[group[i][1] for i in batch] for batch in batches]
            if executor is None:
                encoded = [[d.embeddings for d in encoder.encode_docs(t)] for t in texts]
            else:
                encoded = list(executor.map(_encode_batch, texts))
            rows: list[np.ndarray | None] = [None] * len(group)
            for batch, mats in zip(batches, encoded):
                for i, mat in zip(batch, mats):
                    rows[i] = mat
            for (doc_id, _), mat in zip(group, rows):
                if content_rows(DocRepresentation(mat)) <= 0:
                    writer.skip(doc_id, "no content tokens survive punctuation filtering")
                else:
                    writer.add(doc_id, mat)
            total += len(group)
            logger.info("indexed %d documents (%d padded cells wasted in last group)",
                        total, padding_waste(batches, lengths))
    finally:
        if executor is not None:
            executor.shutdown()
    if total == 0:
        raise ValueError("corpus is empty")
    writer.close(encoder.cfg.metric, {"encoder": encoder.cfg.to_dict()})
    return open_index(out)


def build_index_from_reps(reps: Iterable[DocRepresentation], out_path, dim: int,
                          metric: SimilarityMetric | str = SimilarityMetric.COSINE,
                          bytes_per_dim: int = 4) -> "EmbeddingIndex":
    """Index externally computed document embeddings (no encoder attached)."""
    writer = _IndexWriter(out_path, dim, bytes_per_dim)
    (Path(out_path) / PROJECTION).unlink(missing_ok=True)
    for rep in reps:
        if rep.length == 0:
            writer.skip(str(rep.doc_id), "no embedding rows")
        else:
            writer.add(str(rep.doc_id), rep.embeddings)
    writer.close(SimilarityMetric.parse(metric))
    return open_index(out_path)


def read_corpus(path) -> Iterator[tuple[str, str]]:
    """Yield ``(doc_id, text)`` from a ``doc_id \\t text`` TSV file."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            doc_id, sep, text = line.partition("\t")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected 'doc_id<TAB>text'")
            yield doc_id, text


# -- reader -------------------------------------------------------------------

@dataclass
class Footprint:
    payload_bytes: int
    metadata_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.payload_bytes + self.metadata_bytes


def payload_size(embedding_count: int, dim: int, bytes_per_dim: int) -> int:
    return int(embedding_count) * int(dim) * int(bytes_per_dim)


@dataclass
class EmbeddingIndex:
    """In-memory read view of an index directory (f16 payloads widened to f32)."""

    path: Path
    manifest: dict
    doclens: np.ndarray
    embeddings: np.ndarray
    emb2doc: np.ndarray
    docids: list[str]
    offsets: np.ndarray = field(init=False)
    _ordinals: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.offsets = np.zeros(len(self.doclens) + 1, dtype=np.int64)
        np.cumsum(self.doclens, out=self.offsets[1:])
        self._ordinals = {d: i for i, d in enumerate(self.docids)}

    @property
    def dim(self) -> int:
        return int(self.manifest["dim"])

    @property
    def metric(self) -> SimilarityMetric:
        return SimilarityMetric.parse(self.manifest["metric"])

    @property
    def bytes_per_dim(self) -> int:
        return int(self.manifest["bytes_per_dim"])

    @property
    def doc_count(self) -> int:
        return len(self.docids)

    @property
    def embedding_count(self) -> int:
        return int(self.offsets[-1])

    def __len__(self) -> int:
        return self.doc_count

    def ordinal(self, doc_id: str) -> int | None:
        return self._ordinals.get(doc_id)

    def doc_matrix(self, ordinal: int) -> np.ndarray:
        return self.embeddings[self.offsets[ordinal]:self.offsets[ordinal + 1]]

    def doc(self, ordinal: int) -> DocRepresentation:
        return DocRepresentation(self.doc_matrix(ordinal), self.docids[ordinal])

    def encoder(self) -> ColEncoder | None:
        """Rebuild the encoder the index was built with, if it was text-built."""
        cfg = self.manifest.get("encoder")
        if cfg is None:
            return None
        return ColEncoder(EncoderConfig.from_dict(cfg), ProjectionLayer.load(self.path / PROJECTION))

    def files(self) -> list[Path]:
        return [self.path / MANIFEST] + [self.path / name for name in self.manifest["files"]]


def open_index(path) -> EmbeddingIndex:
    """Load and verify an index directory."""
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise MalformedFile(f"{path}: no {MANIFEST}") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ChecksumMismatch(f"{path / MANIFEST}: unreadable manifest ({exc})") from exc
    stored = manifest.get("crc32")
    if stored is None or int(stored, 16) != _manifest_crc(manifest):
        raise ChecksumMismatch(f"{path / MANIFEST}: manifest CRC32 mismatch")
    if manifest.get("format") != FORMAT_NAME or manifest.get("version") != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: unsupported format {manifest.get('format')!r} "
                              f"version {manifest.get('version')!r}")
    for name, info in manifest["files"].items():
        if f"{_file_crc(path / name):08x}" != info["crc32"]:
            raise ChecksumMismatch(f"{path / name}: CRC32 differs from manifest")

    dim, bpd = int(manifest["dim"]), int(manifest["bytes_per_dim"])
    doclens = np.frombuffer(_read_checked(path / DOCLENS), dtype="<u4")
    emb2doc = np.frombuffer(_read_checked(path / EMB2DOC), dtype="<u4")
    payload = _read_checked(path / PAYLOAD)
    docids = _read_docids(path / DOCIDS)
    total = int(doclens.astype(np.int64).sum())
    if total != manifest["embedding_count"] or len(emb2doc) != total:
        raise MalformedFile(f"{path}: doclens/emb2doc disagree with embedding_count")
    if len(payload) != payload_size(total, dim, bpd):
        raise MalformedFile(f"{path / PAYLOAD}: {len(payload)} bytes, expected "
                            f"{payload_size(total, dim, bpd)}")
    if len(docids) != len(doclens) or len(docids) != manifest["doc_count"]:
        raise MalformedFile(f"{path}: doc count mismatch between docids and doclens")
    emb = np.frombuffer(payload, dtype=_STORAGE_DTYPES[bpd]).reshape(total, dim)
    emb = emb.astype(np.float32)
    return EmbeddingIndex(path, manifest, doclens.astype(np.int64), emb,
                          emb2doc.astype(np.int64), docids)


def footprint(index: EmbeddingIndex) -> Footprint:
    """Bytes on disk: embedding payload plus everything else (metadata)."""
    total = sum(f.stat().st_size for f in index.files())
    payload = payload_size(index.embedding_count, index.dim, index.bytes_per_dim)
    return Footprint(payload, total - payload)
