import json
import os
from pathlib import Path

import numpy as np
import pytest

from lateinteract.cli import build_parser, main
from lateinteract.encoder import ColEncoder, EncoderConfig
from lateinteract.exchange import write_exchange

GOLDEN = Path(__file__).parent / "golden" / "pipeline_eval.json"
REGEN = os.environ.get("LATEINTERACT_REGEN_GOLDEN") == "1"
SMALL = ["--set", "encoder.n_q=8", "--set", "encoder.dim=32", "--set", "encoder.base_dim=64"]
SUBCOMMANDS = ["synth", "index", "ann-build", "train", "search", "rerank", "eval", "footprint"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--out", root / "data", "--docs", 300, "--queries", 10, "--seed", 2) == 0
    assert run("index", "--corpus", root / "data" / "corpus.tsv", "--index", root / "idx", *SMALL) == 0
    return root


class TestUsage:
    @pytest.mark.parametrize("command", SUBCOMMANDS)
    def test_help(self, command, capsys):
        assert main([command, "--help"]) == 0
        assert "usage" in capsys.readouterr().out

    def test_unknown_command(self):
        assert main(["frobnicate"]) == 1

    def test_no_command(self):
        assert main([]) == 1

    def test_missing_required(self):
        assert main(["eval", "--run", "x"]) == 1

    def test_bad_override(self, workspace):
        assert run("footprint", "--index", workspace / "idx", "--set", "nodot") == 1

    def test_every_subcommand_registered(self):
        text = build_parser().format_help()
        assert all(c in text for c in SUBCOMMANDS)


class TestDataErrors:
    def test_disjoint_eval(self, tmp_path):
        (tmp_path / "run").write_text("q1 Q0 a 1 1.0 t\n")
        (tmp_path / "qrels").write_text("q2 0 a 1\n")
        assert run("eval", "--run", tmp_path / "run", "--qrels", tmp_path / "qrels") == 2

    def test_missing_index(self, tmp_path):
        assert run("footprint", "--index", tmp_path / "nothing") == 2

    def test_corpus_and_precomputed_exclusive(self, workspace):
        assert run("index", "--index", workspace / "other") == 1


class TestCommands:
    def test_footprint(self, workspace, capsys):
        assert run("footprint", "--index", workspace / "idx") == 0
        data = json.loads(capsys.readouterr().out)
        on_disk = sum(p.stat().st_size for p in (workspace / "idx").iterdir())
        assert data["total_bytes"] == on_disk

    def test_rerank_and_eval(self, workspace, capsys):
        data = workspace / "data"
        assert run("rerank", "--index", workspace / "idx", "--queries", data / "queries.tsv",
                   "--candidates", data / "candidates.tsv", "--out", workspace / "rr.txt", "--k", 50) == 0
        lines = (workspace / "rr.txt").read_text().splitlines()
        assert lines and all(len(line.split()) == 6 for line in lines)
        assert run("eval", "--run", workspace / "rr.txt", "--qrels", data / "qrels.txt") == 0
        assert "MRR@10" in capsys.readouterr().out

    def test_ann_search(self, workspace):
        idx = workspace / "idx"
        assert run("ann-build", "--index", idx, "--set", "ann.partitions=16", "--set", "ann.subvectors=8",
                   "--set", "ann.probes=4") == 0
        assert (idx / "ivfpq.bin").exists()
        assert run("search", "--index", idx, "--queries", workspace / "data" / "queries.tsv",
                   "--out", workspace / "e2e.txt", "--mode", "e2e", "--k", 20, "--k-prime", 10) == 0
        assert (workspace / "e2e.txt").read_text().count("\n") <= 10 * 20

    def test_train(self, workspace, capsys):
        out = workspace / "proj.npy"
        log = workspace / "loss.tsv"
        assert run("train", "--triples", workspace / "data" / "triples.tsv", "--out", out, "--log", log,
                   *SMALL, "--set", "train.iterations=3", "--set", "train.batch_size=4") == 0
        assert np.load(out).shape == (64, 32)
        assert len(log.read_text().splitlines()) == 3

    def test_index_from_precomputed(self, workspace, tmp_path):
        enc = ColEncoder(EncoderConfig(n_q=8, dim=32, base_dim=64))
        write_exchange(tmp_path / "d.emb", [enc.encode_doc("some text", "d1"), enc.encode_doc("more", "d2")])
        assert run("index", "--precomputed", tmp_path / "d.emb", "--index", tmp_path / "idx", *SMALL) == 0
        # wrong configured dimension is a data error
        assert run("index", "--precomputed", tmp_path / "d.emb", "--index", tmp_path / "bad") == 2

    def test_config_file(self, workspace, tmp_path):
        ini = tmp_path / "cfg.ini"
        ini.write_text("[retrieval]\nk = 3\nmode = rerank\n")
        data = workspace / "data"
        assert run("search", "--config", ini, "--index", workspace / "idx", "--queries", data / "queries.tsv",
                   "--candidates", data / "candidates.tsv", "--out", tmp_path / "run.txt") == 0
        counts = {}
        for line in (tmp_path / "run.txt").read_text().splitlines():
            counts[line.split()[0]] = counts.get(line.split()[0], 0) + 1
        assert max(counts.values()) == 3


class TestGoldenPipeline:
    def test_exact_pipeline_report(self, tmp_path):
        data, idx = tmp_path / "data", tmp_path / "idx"
        assert run("synth", "--out", data, "--docs", 2000, "--seed", 7) == 0
        assert run("index", "--corpus", data / "corpus.tsv", "--index", idx, *SMALL) == 0
        assert run("search", "--index", idx, "--queries", data / "queries.tsv", "--out", tmp_path / "run.txt",
                   "--mode", "e2e-exact", "--k", 100) == 0
        assert run("eval", "--run", tmp_path / "run.txt", "--qrels", data / "qrels.txt",
                   "--recall", 10, 50, 100, "--json", tmp_path / "report.json") == 0
        report = json.loads((tmp_path / "report.json").read_text())
        if REGEN or not GOLDEN.exists():
            GOLDEN.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        golden = json.loads(GOLDEN.read_text())
        assert report["query_count"] == golden["query_count"] == 50
        assert report["per_query"].keys() == golden["per_query"].keys()
        for qid, values in golden["per_query"].items():
            for metric, value in values.items():
                assert report["per_query"][qid][metric] == pytest.approx(value, abs=1e-9)
