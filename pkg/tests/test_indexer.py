import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lateinteract.core import DocRepresentation
from lateinteract.encoder import ColEncoder, EncoderConfig
from lateinteract.errors import ChecksumMismatch, MalformedFile, VersionMismatch
from lateinteract.indexer import (
    IndexerConfig,
    _manifest_crc,
    bucket_batches,
    build_index,
    build_index_from_reps,
    footprint,
    open_index,
    padded_widths,
    padding_waste,
    payload_size,
    read_corpus,
    sequential_batches,
)
from lateinteract.synth import generate

CFG = EncoderConfig(n_q=8, dim=16, base_dim=32)
GIB = 2**30


@pytest.fixture(scope="module")
def corpus():
    return generate(150, 5, seed=11).corpus


@pytest.fixture(scope="module")
def enc():
    return ColEncoder(CFG)


def index_bytes(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


class TestBatching:
    def test_sorted_buckets(self):
        lengths = [5, 50, 7, 49]
        batches = bucket_batches(lengths, 2)
        assert [[lengths[i] for i in b] for b in batches] == [[5, 7], [49, 50]]
        assert padded_widths(batches, lengths) == [7, 50]

    def test_uniform_lengths_waste_nothing(self):
        lengths = [12] * 10
        assert padding_waste(bucket_batches(lengths, 3), lengths) == 0

    def test_bucketing_beats_arrival_order(self):
        lengths = np.random.default_rng(5).integers(1, 181, size=1000).tolist()
        bucketed = padding_waste(bucket_batches(lengths, 32), lengths)
        unsorted = padding_waste(sequential_batches(len(lengths), 32), lengths)
        assert bucketed <= unsorted

    @settings(max_examples=50, deadline=None)
    @given(lengths=st.lists(st.integers(1, 200), min_size=1, max_size=300), b=st.integers(1, 64))
    def test_bucketing_is_a_partition(self, lengths, b):
        batches = bucket_batches(lengths, b)
        assert sorted(i for batch in batches for i in batch) == list(range(len(lengths)))
        assert all(len(batch) <= b for batch in batches)
        assert padding_waste(batches, lengths) <= padding_waste(sequential_batches(len(lengths), b), lengths)


class TestBuild:
    def test_invariants(self, corpus, enc, tmp_path):
        index = build_index(corpus, enc, tmp_path, IndexerConfig(batch_size=16))
        assert index.doclens.sum() == index.embedding_count == len(index.emb2doc)
        assert np.all(np.diff(index.emb2doc) >= 0)
        assert set(index.emb2doc.tolist()) == set(range(index.doc_count))
        size = (tmp_path / "payload.bin").stat().st_size - 4
        assert size == payload_size(index.embedding_count, 16, 4)

    def test_f32_round_trip_is_exact(self, corpus, enc, tmp_path):
        index = build_index(corpus, enc, tmp_path, IndexerConfig(batch_size=16))
        for i, (doc_id, text) in enumerate(corpus):
            assert index.docids[i] == doc_id
            assert index.doc_matrix(i).tobytes() == enc.encode_doc(text).embeddings.tobytes()

    def test_f16_error_bound(self, corpus, enc, tmp_path):
        index = build_index(corpus, enc, tmp_path, IndexerConfig(bytes_per_dim=2))
        worst = max(np.abs(index.doc_matrix(i) - enc.encode_doc(t).embeddings).max()
                    for i, (_, t) in enumerate(corpus))
        assert worst <= 2**-10

    def test_rebuild_is_byte_identical(self, corpus, enc, tmp_path):
        build_index(corpus, enc, tmp_path / "a")
        build_index(corpus, enc, tmp_path / "b")
        assert index_bytes(tmp_path / "a") == index_bytes(tmp_path / "b")

    def test_worker_count_does_not_change_bytes(self, corpus, enc, tmp_path):
        build_index(corpus, enc, tmp_path / "w1", IndexerConfig(batch_size=8, group_size=40, workers=1))
        build_index(corpus, enc, tmp_path / "w8", IndexerConfig(batch_size=8, group_size=40, workers=8))
        assert index_bytes(tmp_path / "w1") == index_bytes(tmp_path / "w8")

    def test_punctuation_doc_skipped(self, enc, tmp_path, caplog):
        docs = [("a", "first document"), ("b", "?! , ."), ("c", "third one")]
        index = build_index(docs, enc, tmp_path)
        assert index.doc_count == 2
        assert index.manifest["skipped"] == ["b"]
        assert index.ordinal("c") == 1 and index.ordinal("b") is None
        assert "skipping" in caplog.text

    def test_duplicate_id_rejected(self, enc, tmp_path):
        with pytest.raises(ValueError):
            build_index([("a", "x y"), ("a", "z w")], enc, tmp_path)

    def test_empty_corpus_rejected(self, enc, tmp_path):
        with pytest.raises(ValueError):
            build_index([], enc, tmp_path)

    def test_encoder_restored(self, corpus, enc, tmp_path):
        index = build_index(corpus[:5], enc, tmp_path)
        restored = index.encoder()
        assert restored.cfg == CFG
        np.testing.assert_array_equal(restored.proj.weights, enc.proj.weights)

    def test_read_corpus(self, tmp_path):
        path = tmp_path / "c.tsv"
        path.write_text("d1\thello world\n\nd2\tsecond\n")
        assert list(read_corpus(path)) == [("d1", "hello world"), ("d2", "second")]
        path.write_text("no tab here\n")
        with pytest.raises(ValueError):
            list(read_corpus(path))


class TestIntegrity:
    @pytest.fixture
    def built(self, corpus, enc, tmp_path):
        build_index(corpus[:20], enc, tmp_path)
        return tmp_path

    def test_corrupted_manifest(self, built):
        path = built / "manifest.json"
        data = json.loads(path.read_text())
        data["doc_count"] += 1
        path.write_text(json.dumps(data))
        with pytest.raises(ChecksumMismatch):
            open_index(built)

    def test_garbled_manifest(self, built):
        (built / "manifest.json").write_text("{not json")
        with pytest.raises(ChecksumMismatch):
            open_index(built)

    def test_version_mismatch(self, built):
        path = built / "manifest.json"
        data = json.loads(path.read_text())
        data["version"] = 99
        data["crc32"] = f"{_manifest_crc(data):08x}"
        path.write_text(json.dumps(data))
        with pytest.raises(VersionMismatch):
            open_index(built)

    @pytest.mark.parametrize("name", ["payload.bin", "doclens.bin", "emb2doc.bin", "docids.tsv"])
    def test_flipped_byte(self, built, name):
        path = built / name
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(ChecksumMismatch):
            open_index(built)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(MalformedFile):
            open_index(tmp_path)


class TestFootprint:
    def test_exact_on_disk(self, corpus, enc, tmp_path):
        index = build_index(corpus, enc, tmp_path)
        fp = footprint(index)
        assert fp.total_bytes == sum(p.stat().st_size for p in tmp_path.iterdir())
        assert fp.payload_bytes == index.embedding_count * 16 * 4

    def test_halving_precision_halves_payload(self, corpus, enc, tmp_path):
        full = footprint(build_index(corpus, enc, tmp_path / "f32"))
        half = footprint(build_index(corpus, enc, tmp_path / "f16", IndexerConfig(bytes_per_dim=2)))
        assert 2 * half.payload_bytes == full.payload_bytes

    def test_empty_index_is_metadata_only(self, tmp_path):
        index = build_index_from_reps([], tmp_path, dim=8)
        fp = footprint(index)
        assert index.doc_count == 0
        assert fp.payload_bytes == 0 and fp.metadata_bytes == fp.total_bytes > 0

    def test_from_reps(self, tmp_path, rng):
        reps = [DocRepresentation(rng.standard_normal((n, 8)).astype(np.float32), f"d{n}") for n in (4, 2, 7)]
        index = build_index_from_reps(reps, tmp_path, dim=8)
        assert footprint(index).payload_bytes == 416
        assert index.encoder() is None

    @pytest.mark.parametrize("dim,expected", [(128, 143), (24, 27)])
    def test_large_collection_arithmetic(self, dim, expected):
        gib = payload_size(8_800_000 * 68, dim, 2) / GIB
        assert abs(gib - expected) / expected <= 0.02

    def test_six_hundred_million_embeddings(self):
        assert payload_size(600_000_000, 128, 2) / GIB == pytest.approx(143, rel=0.01)
