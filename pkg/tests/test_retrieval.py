import numpy as np
import pytest

from lateinteract.ann import AnnConfig, IvfPqIndex
from lateinteract.core import DocRepresentation, QueryRepresentation, maxsim_score
from lateinteract.encoder import ColEncoder, EncoderConfig
from lateinteract.indexer import build_index, build_index_from_reps
from lateinteract.metrics import mrr_at_10
from lateinteract.retrieval import (
    Mode,
    RankedList,
    RetrievalParams,
    Searcher,
    brute_force_ranking,
    exact_stage1_candidates,
    rerank,
    retrieve,
    stage1_candidates,
    write_run,
)


@pytest.fixture(scope="module")
def setup(small_index):
    index, data = small_index
    enc = index.encoder()
    ann = IvfPqIndex.train(index.embeddings, AnnConfig(partitions=16, probes=4, subvectors=8, seed=0))
    ann.add(index.embeddings)
    queries = [enc.encode_query(text, qid) for qid, text in data.queries]
    return index, ann, queries


class TestRerank:
    def test_single_candidate(self, setup):
        index, _, queries = setup
        q = queries[0]
        ranked = rerank(q, [index.docids[5]], index, k=1)
        assert list(ranked) == [(index.docids[5], maxsim_score(q, index.doc_matrix(5)))]

    def test_matches_per_document_oracle(self, setup, rng):
        index, _, queries = setup
        cands = rng.choice(index.doc_count, size=100, replace=False)
        for q in queries[:5]:
            scored = [(maxsim_score(q, index.doc_matrix(int(o))), int(o)) for o in cands]
            oracle = sorted(scored, key=lambda t: (-t[0], t[1]))
            ranked = rerank(q, [index.docids[int(o)] for o in cands], index, k=100)
            assert ranked.ordinals == [o for _, o in oracle]
            assert ranked.scores == [s for s, _ in oracle]

    def test_small_gather_batches_agree(self, setup):
        index, _, queries = setup
        cands = list(range(0, index.doc_count, 3))
        a = rerank(queries[1], cands, index, k=50)
        b = rerank(queries[1], cands, index, k=50, batch_size=7)
        assert a == b

    def test_unknown_and_repeated_candidates(self, setup, caplog):
        index, _, queries = setup
        ranked = rerank(queries[0], ["nope", index.docids[1], index.docids[1], 2], index, k=10)
        assert sorted(ranked.ordinals) == [1, 2]
        assert "not present" in caplog.text

    def test_no_candidates(self, setup):
        index, _, queries = setup
        assert len(rerank(queries[0], [], index, k=10)) == 0

    def test_k_larger_than_collection(self, setup):
        index, _, queries = setup
        ranked = rerank(queries[0], range(index.doc_count), index, k=10 * index.doc_count)
        assert len(ranked) == index.doc_count

    def test_query_encoded_once(self, setup):
        index, _, _ = setup
        searcher = Searcher(index, ColEncoder(index.encoder().cfg, index.encoder().proj))
        searcher.rerank("apple pie recipe", index.docids, k=10)
        assert searcher.encoder.query_encodes == 1

    def test_subset_is_filtered_full_ranking(self, setup, rng):
        # re-ranking a subset keeps the relative order of the full exact ranking
        index, _, queries = setup
        for q in queries[:4]:
            full = brute_force_ranking(q, index, index.doc_count)
            subset = set(rng.choice(index.doc_count, size=60, replace=False).tolist())
            ranked = rerank(q, sorted(subset), index, k=60)
            assert ranked.ordinals == [o for o in full.ordinals if o in subset]


    def test_subset_rerank_can_outscore_full_ranking(self, tmp_path):
        # dropping a stronger non-relevant competitor lifts the relevant doc
        reps = [DocRepresentation(np.array([[1.0, 0.0]], dtype=np.float32), "strong"),
                DocRepresentation(np.array([[0.6, 0.8]], dtype=np.float32), "relevant")]
        index = build_index_from_reps(reps, tmp_path, dim=2)
        q = QueryRepresentation(np.array([[1.0, 0.0]]))
        qrels = {"q": {"relevant"}}
        full = retrieve(q, RetrievalParams(k=10, mode=Mode.END_TO_END_EXACT), index)
        subset = rerank(q, ["relevant"], index, k=10)
        assert mrr_at_10({"q": full.doc_ids}, qrels) == 0.5
        assert mrr_at_10({"q": subset.doc_ids}, qrels) == 1.0


class TestStageOne:
    def test_candidate_bound(self, setup):
        index, ann, queries = setup
        for q in queries:
            for k_prime in (1, 5, 20):
                cands = stage1_candidates(q, ann, index.emb2doc, k_prime)
                assert len(cands) <= len(q) * k_prime
                assert len(exact_stage1_candidates(q, index, k_prime)) <= len(q) * k_prime

    def test_exact_totality(self, setup):
        index, _, queries = setup
        cands = exact_stage1_candidates(queries[0], index, index.embedding_count)
        assert cands.tolist() == list(range(index.doc_count))

    def test_single_document_collection(self, tmp_path):
        cfg = EncoderConfig(n_q=8, dim=16, base_dim=32)
        enc = ColEncoder(cfg)
        index = build_index([("only", "one lonely document here")], enc, tmp_path)
        q = enc.encode_query("lonely")
        assert exact_stage1_candidates(q, index, 3).tolist() == [0]
        ranked = retrieve(q, RetrievalParams(k=5, mode=Mode.END_TO_END_EXACT), index)
        assert ranked.doc_ids == ["only"]


class TestRetrieve:
    def test_exact_mode_equals_brute_force(self, setup):
        index, _, queries = setup
        params = RetrievalParams(k=50, k_prime=index.embedding_count, mode=Mode.END_TO_END_EXACT)
        for q in queries:
            assert retrieve(q, params, index) == brute_force_ranking(q, index, 50)

    def test_end_to_end_is_rerank_of_candidates(self, setup):
        index, ann, queries = setup
        params = RetrievalParams(k=20, k_prime=10, probes=2, mode=Mode.END_TO_END)
        for q in queries:
            cands = stage1_candidates(q, ann, index.emb2doc, 10, 2)
            ranked = retrieve(q, params, index, ann)
            assert set(ranked.ordinals) <= set(cands.tolist())
            assert ranked == rerank(q, cands.tolist(), index, 20)

    def test_modes_need_their_inputs(self, setup):
        index, _, queries = setup
        with pytest.raises(ValueError):
            retrieve(queries[0], RetrievalParams(mode="e2e"), index)
        with pytest.raises(ValueError):
            retrieve(queries[0], RetrievalParams(mode="rerank"), index)

    def test_params(self):
        assert RetrievalParams(k=7).depth == 7
        assert RetrievalParams(k=7, k_prime=3).depth == 3
        with pytest.raises(ValueError):
            RetrievalParams(k=0)
        with pytest.raises(ValueError):
            RetrievalParams(mode="sideways")

    def test_searcher_checks_dimensions(self, setup):
        index, _, _ = setup
        with pytest.raises(ValueError):
            Searcher(index, ColEncoder(EncoderConfig(n_q=8, dim=8, base_dim=16)))


class TestTies:
    def test_equal_scores_ordered_by_ordinal(self, tmp_path):
        row = np.array([[1.0, 0.0]], dtype=np.float32)
        reps = [DocRepresentation(row, f"d{i}") for i in range(4)]
        index = build_index_from_reps(reps, tmp_path, dim=2)
        ranked = rerank(np.array([[1.0, 0.0]]), [3, 1, 2, 0], index, k=4)
        assert ranked.doc_ids == ["d0", "d1", "d2", "d3"]


class TestWriteRun:
    def test_format(self, tmp_path):
        path = tmp_path / "run.txt"
        write_run(path, {"q1": RankedList(["a", "b"], [0, 1], [2.5, 1.0])}, tag="t")
        assert path.read_text() == "q1 Q0 a 1 2.500000 t\nq1 Q0 b 2 1.000000 t\n"
