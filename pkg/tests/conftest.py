import numpy as np
import pytest

from lateinteract.ann import AnnConfig, IvfPqIndex
from lateinteract.encoder import ColEncoder, EncoderConfig
from lateinteract.indexer import IndexerConfig, build_index
from lateinteract.synth import generate

# Small but realistic setting shared by the retrieval and acceptance tests.
SMALL_ENCODER = EncoderConfig(n_q=8, dim=32, base_dim=64)
CORPUS_SEED = 7


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synthetic():
    return generate(2000, 50, seed=CORPUS_SEED)


@pytest.fixture(scope="session")
def encoder():
    return ColEncoder(SMALL_ENCODER)


@pytest.fixture(scope="session")
def corpus_index(synthetic, encoder, tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus_index")
    return build_index(synthetic.corpus, encoder, out, IndexerConfig(batch_size=64))


@pytest.fixture(scope="session")
def corpus_ann(corpus_index):
    cfg = AnnConfig(partitions=64, probes=8, subvectors=8, seed=CORPUS_SEED)
    ann = IvfPqIndex.train(corpus_index.embeddings, cfg)
    ann.add(corpus_index.embeddings)
    return ann


@pytest.fixture(scope="session")
def small_index(tmp_path_factory):
    """300-document index for quick retrieval checks."""
    data = generate(300, 10, seed=3)
    out = tmp_path_factory.mktemp("small_index")
    return build_index(data.corpus, ColEncoder(SMALL_ENCODER), out), data


# -- acceptance summary ---------------------------------------------------------

_ACCEPTANCE = []


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        _ACCEPTANCE.append((report.nodeid.split("::")[-1], report.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, detail in _ACCEPTANCE:
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{verdict}  {name}  {detail}".rstrip())
