import numpy as np
import pytest

from leafkd.corpus import CorpusConfig, generate
from leafkd.errors import ConfigError


def test_shape_and_qrels():
    ds, train = generate(CorpusConfig(count=100, clusters=5, seed=1))
    assert len(ds.docs) == 100 and len(ds.queries) == 20 and len(train) == 512
    assert set(ds.qrels) == set(ds.query_ids)
    assert all(rel and set(rel.values()) == {1} for rel in ds.qrels.values())


def test_every_cluster_has_a_doc_and_query():
    ds, _ = generate(CorpusConfig(count=30, clusters=10, queries=10, seed=2))
    judged = set()
    for rel in ds.qrels.values():
        judged |= set(rel)
    # ten queries, one per cluster, so every doc is relevant to some query
    assert judged == set(ds.doc_ids)


def test_same_seed_same_corpus(tmp_path):
    a = generate(CorpusConfig(count=50, clusters=5, seed=3))
    b = generate(CorpusConfig(count=50, clusters=5, seed=3))
    assert a[1] == b[1]
    a[0].save(tmp_path / "a")
    b[0].save(tmp_path / "b")
    for name in ("docs.jsonl", "queries.jsonl", "qrels.tsv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    c = generate(CorpusConfig(count=50, clusters=5, seed=4))
    assert c[0].doc_texts != a[0].doc_texts


def test_queries_are_shorter_than_docs_by_default():
    ds, _ = generate(CorpusConfig(count=200, clusters=10, seed=5))
    q = np.mean([len(t.split()) for t in ds.query_texts])
    d = np.mean([len(t.split()) for t in ds.doc_texts])
    assert 3 <= q <= 6 and 16 <= d <= 32 and d > 3 * q


def test_length_ratio_is_configurable():
    ds, _ = generate(CorpusConfig(count=60, clusters=3, doc_len=(4, 4), query_len=(8, 8), seed=6))
    assert {len(t.split()) for t in ds.doc_texts} == {4}
    assert {len(t.split()) for t in ds.query_texts} == {8}


def test_train_query_fraction():
    _, only_queries = generate(CorpusConfig(count=20, clusters=2, train_count=50, train_query_fraction=1.0))
    assert max(len(t.split()) for t in only_queries) <= 6


def test_config_errors():
    with pytest.raises(ConfigError):
        CorpusConfig(count=3, clusters=5)
    with pytest.raises(ConfigError):
        CorpusConfig(doc_len=(5, 2))
