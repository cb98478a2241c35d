"""Reader/writer for the little-endian embedding-exchange format.

Layout::

    magic  "LSEMB1"
    u32    dim
    u8     dtype (0 = float32, 1 = float16)
    u64    record count
    records:
        u64 id byte length, UTF-8 id
        u32 row count
        rows * dim values of dtype

This is how embeddings produced by an external encoder enter the engine.
"""

from __future__ import annotations

import struct
from typing import Iterable, Iterator

import numpy as np

from .core import DocRepresentation, QueryRepresentation, SimilarityMetric, check_unit_norm
from .errors import DimensionMismatch, InvalidEmbedding, MalformedFile

MAGIC = b"LSEMB1"
_HEADER = struct.Struct("<6sIBQ")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f2")}
_DTYPE_CODES = {"f32": 0, "float32": 0, "f16": 1, "float16": 1}


def write_exchange(path, reps: Iterable, dtype: str = "f32", dim: int | None = None) -> int:
    """Write representations; returns the number of records written."""
    code = _DTYPE_CODES[dtype]
    np_dtype = _DTYPES[code]
    reps = list(reps)
    if dim is None:
        if not reps:
            raise ValueError("dim is required when writing zero records")
        dim = reps[0].embeddings.shape[1]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, dim, code, len(reps)))
        for rep in reps:
            ident = rep.doc_id if isinstance(rep, DocRepresentation) else rep.query_id
            raw_id = str(ident if ident is not None else "").encode("utf-8")
            rows = np.asarray(rep.embeddings)
            if rows.shape[1] != dim:
                raise DimensionMismatch(f"record {ident!r} has dim {rows.shape[1]}, file dim {dim}")
            fh.write(struct.pack("<Q", len(raw_id)))
            fh.write(raw_id)
            fh.write(struct.pack("<I", rows.shape[0]))
            fh.write(rows.astype(np_dtype).tobytes())
    return len(reps)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise MalformedFile(f"{fh.name}: truncated while reading {what} at offset "
                            f"{fh.tell() - len(data)} (wanted {n} bytes, got {len(data)})")
    return data


def load_precomputed(path, kind: str = "doc", expected_dim: int | None = None,
                     metric: SimilarityMetric | str = SimilarityMetric.COSINE) -> Iterator:
    """Stream :class:`DocRepresentation` (or query) records in file order.

    Raises:
        MalformedFile: bad magic, unknown dtype or truncated data.
        DimensionMismatch: the file's width differs from ``expected_dim``.
        InvalidEmbedding: non-finite values, or non-unit rows under cosine.
    """
    if kind not in ("doc", "query"):
        raise ValueError("kind must be 'doc' or 'query'")
    metric = SimilarityMetric.parse(metric)
    with open(path, "rb") as fh:
        magic, dim, code, count = _HEADER.unpack(_read_exact(fh, _HEADER.size, "header"))
        if magic != MAGIC:
            raise MalformedFile(f"{path}: bad magic {magic!r}")
        if code not in _DTYPES:
            raise MalformedFile(f"{path}: unknown dtype code {code}")
        if dim == 0:
            raise MalformedFile(f"{path}: zero embedding dimension")
        if expected_dim is not None and dim != expected_dim:
            raise DimensionMismatch(f"{path}: file dim {dim}, engine configured for {expected_dim}")
        dtype = _DTYPES[code]
        for i in range(count):
            (id_len,) = struct.unpack("<Q", _read_exact(fh, 8, f"record {i} id length"))
            try:
                ident = _read_exact(fh, id_len, f"record {i} id").decode("utf-8")
            except UnicodeDecodeError as exc:
                raise MalformedFile(f"{path}: record {i} id is not UTF-8") from exc
            (rows,) = struct.unpack("<I", _read_exact(fh, 4, f"record {i} row count"))
            raw = _read_exact(fh, rows * dim * dtype.itemsize, f"record {i} rows")
            mat = np.frombuffer(raw, dtype=dtype).reshape(rows, dim).astype(np.float32)
            if not np.all(np.isfinite(mat)):
                raise InvalidEmbedding(f"{path}: record {i} ({ident!r}) has non-finite values")
            if metric is SimilarityMetric.COSINE and rows:
                # half precision alone perturbs a unit norm by up to ~2^-11
                tol = 1e-3 if code == 1 else 1e-5
                check_unit_norm(mat, f"{path}: record {i} ({ident!r})", tol)
            if kind == "doc":
                yield DocRepresentation(mat, ident)
            else:
                yield QueryRepresentation(mat, ident)
        if fh.read(1):
            raise MalformedFile(f"{path}: trailing bytes after {count} records")
