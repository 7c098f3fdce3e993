"""Shared fixtures: a tiny indexed corpus used by CLI and service tests."""

import pytest

from clonesearch.embedding import EmbedderConfig
from clonesearch.pipeline import IndexConfig, index_corpus

FUNC_F = "int f(void)\n{\n    return 42;\n}\n"
FUNC_F_WS = "int f(void) {\n        return 42;\n}\n"  # whitespace-only variant
FUNC_G = "int g(int x)\n{\n    return x + 1;\n}\n"
FUNC_H = "long h(long y)\n{\n    return y * 2;\n}\n"
FUNC_K = "double k(double z)\n{\n    return z / 2.0;\n}\n"


@pytest.fixture
def tiny_corpus(tmp_path):
    corpus = tmp_path / "corpus"
    corpus.mkdir()
    (corpus / "a.c").write_text(FUNC_F + "\n" + FUNC_G)
    (corpus / "b.c").write_text(FUNC_F_WS + "\n" + FUNC_H)
    (corpus / "c.c").write_text(FUNC_K)
    return corpus


@pytest.fixture
def tiny_index(tmp_path, tiny_corpus):
    index_dir = tmp_path / "index"
    cfg = IndexConfig(embedder=EmbedderConfig(dim=64), nlist=4, seed=1)
    index_corpus(tiny_corpus, index_dir, cfg)
    return index_dir
