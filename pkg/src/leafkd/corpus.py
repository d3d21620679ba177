"""Seeded synthetic corpora with cluster-membership relevance.

Each cluster owns a set of topic words; documents and queries of a cluster
mix its topic words with a shared background vocabulary. A query is
relevant (grade 1) to every document of its own cluster. Queries are short
and documents long by default, mirroring real retrieval collections.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

_CONS = "bcdfghjklmnprstvz"
_VOWELS = "aeiou"


@dataclass(frozen=True)
class CorpusConfig:
    count: int = 200
    clusters: int = 20
    queries: int = 0  # 0: one query per 5 docs, at least one per cluster
    train_count: int = 512
    train_query_fraction: float = 0.5
    topic_words: int = 16
    background_words: int = 60
    doc_len: tuple = (16, 32)
    query_len: tuple = (3, 6)
    topic_prob_doc: float = 0.6
    topic_prob_query: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.count < 1 or self.clusters < 1:
            raise ConfigError("count and clusters must be positive")
        if self.clusters > self.count:
            raise ConfigError(f"clusters ({self.clusters}) must not exceed count ({self.count})")
        for lo, hi in (self.doc_len, self.query_len):
            if not 1 <= lo <= hi:
                raise ConfigError("length ranges must satisfy 1 <= lo <= hi")


def _make_words(rng: np.random.Generator, n: int) -> list[str]:
    words, seen = [], set()
    while len(words) < n:
        syl = int(rng.integers(2, 4))
        w = "".join(_CONS[rng.integers(len(_CONS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(syl))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


class _Generator:
    def __init__(self, cfg: CorpusConfig):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        words = _make_words(self.rng, cfg.background_words + cfg.clusters * cfg.topic_words)
        self.background = words[: cfg.background_words]
        t = cfg.topic_words
        self.topics = [words[cfg.background_words + c * t : cfg.background_words + (c + 1) * t] for c in range(cfg.clusters)]

    def text(self, cluster: int, length: tuple, topic_prob: float) -> str:
        rng = self.rng
        n = int(rng.integers(length[0], length[1] + 1))
        out = []
        for _ in range(n):
            pool = self.topics[cluster] if rng.random() < topic_prob else self.background
            out.append(pool[rng.integers(len(pool))])
        return " ".join(out)


def generate(cfg: CorpusConfig):
    """Build ``(JudgedDataset, train_texts)`` from a corpus config."""
    from .evalhub import JudgedDataset

    g = _Generator(cfg)
    rng = g.rng
    doc_cluster = np.concatenate([np.arange(cfg.clusters), rng.integers(0, cfg.clusters, cfg.count - cfg.clusters)])
    docs = [(f"d{i:05d}", g.text(int(c), cfg.doc_len, cfg.topic_prob_doc)) for i, c in enumerate(doc_cluster)]

    n_q = cfg.queries or max(cfg.clusters, cfg.count // 5)
    q_cluster = np.concatenate([np.arange(min(n_q, cfg.clusters)), rng.integers(0, cfg.clusters, max(0, n_q - cfg.clusters))])
    queries = [(f"q{i:04d}", g.text(int(c), cfg.query_len, cfg.topic_prob_query)) for i, c in enumerate(q_cluster)]

    qrels: dict[str, dict[str, int]] = {}
    for (qid, _), qc in zip(queries, q_cluster):
        qrels[qid] = {did: 1 for (did, _), dc in zip(docs, doc_cluster) if dc == qc}

    train = []
    for _ in range(cfg.train_count):
        c = int(rng.integers(cfg.clusters))
        if rng.random() < cfg.train_query_fraction:
            train.append(g.text(c, cfg.query_len, cfg.topic_prob_query))
        else:
            train.append(g.text(c, cfg.doc_len, cfg.topic_prob_doc))
    return JudgedDataset(docs, queries, qrels), train
