import numpy as np
import pytest

from synemb import bpe as bpe_mod
from synemb import model as M
from synemb.corpus import LanguageRegistry
from synemb.synthgen import builtin_grammar, generate_pairs

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture(scope="session")
def grammar():
    return builtin_grammar("toy")


@pytest.fixture(scope="session")
def small_corpus(grammar):
    registry = LanguageRegistry(["en", "es", "de"])
    pairs = generate_pairs(grammar, "en", "de", 300, 1, registry) + generate_pairs(grammar, "es", "de", 300, 2, registry)
    return registry, pairs


@pytest.fixture(scope="session")
def small_bpe(small_corpus):
    _, pairs = small_corpus
    return bpe_mod.learn_bpe([p.src_text for p in pairs], 120)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**kw):
    base = dict(
        bpe_vocab_size=30, bpe_emb_dim=3, upos_emb_dim=3, lang_emb_dim=2,
        enc_fwd_hidden=4, enc_bwd_hidden=4, dec_hidden=5, num_langs=2, dropout=0.0,
    )
    base.update(kw)
    return M.ModelConfig(**base)


def randomize(params, seed=0, scale=0.5):
    r = np.random.default_rng(seed)
    for p in params.values():
        p.value[...] = r.normal(0.0, scale, p.shape)
    return params
