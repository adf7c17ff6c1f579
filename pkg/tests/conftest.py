import numpy as np
import pytest

from zdc.corpus import gen_corpus
from zdc.model import gen_model
from zdc.offline import build_rotations, fold_parameters


@pytest.fixture(scope="session")
def small_model():
    return gen_model(seed=0, n_layers=2, n_heads=2, head_dim=8, vocab=32)


@pytest.fixture(scope="session")
def small_corpus():
    return gen_corpus(seed=0, vocab=32, n_topics=2, seqs_per_topic=4, seq_len=12)


@pytest.fixture(scope="session")
def small_folded(small_model, small_corpus):
    return fold_parameters(small_model, build_rotations(small_model, small_corpus, prune=0.0, kmeans_k=None))


@pytest.fixture(scope="session")
def wide_model():
    """Four heads of width 16 with decaying spectra: every grid p gives a distinct width."""
    return gen_model(seed=1, n_layers=3, n_heads=4, head_dim=16, vocab=64, spectral_decay=0.75)


@pytest.fixture(scope="session")
def wide_corpus():
    return gen_corpus(seed=1, vocab=64, n_topics=3, seqs_per_topic=6, seq_len=20)


@pytest.fixture(scope="session")
def wide_folded(wide_model, wide_corpus):
    return fold_parameters(wide_model, build_rotations(wide_model, wide_corpus))


def rel_err(a, b):
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))) / max(np.max(np.abs(b)), 1e-300))


# criterion number -> (title, passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {n:2d} {title}: {detail}")
