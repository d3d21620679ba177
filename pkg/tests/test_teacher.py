import struct

import numpy as np
import pytest

from conftest import TINY_CORPUS, tiny_config
from leafkd.encoder import init_encoder
from leafkd.errors import CacheFormatError, ConfigError, DataError, LookupMissError
from leafkd.teacher import EmbeddingCache, build_cache, cache_lookup, synthetic_teacher
from leafkd.trainer import TrainConfig, train


@pytest.fixture
def teacher(tiny_vocab):
    return synthetic_teacher(tiny_config(vocab_size=len(tiny_vocab), hidden=16, out=8, seed=3), tiny_vocab)


TEXTS = [f"{a} {b}" for a in ("the cat", "a dog", "pets") for b in ("sat", "on the mat", "chased a log")] + ["cat"]


def test_teacher_is_frozen_and_deterministic(teacher):
    a = teacher.embed(["the cat"])
    b = teacher.embed(["the cat"])
    assert np.array_equal(a, b)
    np.testing.assert_allclose(np.linalg.norm(teacher.embed(TINY_CORPUS).astype(np.float64), axis=1), 1.0, atol=1e-6)


def test_teacher_seeds_give_different_maps(tiny_vocab):
    cfg = tiny_config(vocab_size=len(tiny_vocab), hidden=16, out=8)
    a = synthetic_teacher(cfg, tiny_vocab, seed=1).embed(TEXTS[:10])
    b = synthetic_teacher(cfg, tiny_vocab, seed=2).embed(TEXTS[:10])
    cos = (a.astype(np.float64) * b).sum(axis=1)
    assert np.all(cos < 1 - 1e-3)


def test_synthetic_teacher_requires_normalized_output(tiny_vocab):
    with pytest.raises(ConfigError):
        synthetic_teacher(tiny_config(vocab_size=len(tiny_vocab), normalize_output=False), tiny_vocab)


def test_partition_counts(teacher):
    cache = build_cache(teacher, TEXTS, val_holdout=2)
    assert len(cache.rows("train")) == 8 and len(cache.rows("val")) == 2
    assert sum(1 for _ in cache.iter_split("train")) == len(TEXTS) - 2


def test_holdout_must_be_smaller_than_count(teacher):
    with pytest.raises(ConfigError):
        build_cache(teacher, TEXTS, val_holdout=len(TEXTS))
    with pytest.raises(DataError):
        build_cache(teacher, [], val_holdout=0)


def test_holdout_is_seeded(teacher):
    a = build_cache(teacher, TEXTS, val_holdout=3, seed=4)
    b = build_cache(teacher, TEXTS, val_holdout=3, seed=4)
    assert [r.split for r in a.records] == [r.split for r in b.records]


def test_instruction_prefix_contract(teacher):
    cache = build_cache(teacher, TEXTS, instruction="the ", val_holdout=1)
    for i, text in enumerate(TEXTS):
        assert np.array_equal(cache.vectors[i], teacher.embed(["the " + text])[0])
    assert cache.instruction == "the "


def test_lookup_returns_stored_rows(teacher):
    cache = build_cache(teacher, TEXTS, val_holdout=1, ids=[f"x{i}" for i in range(len(TEXTS))])
    assert np.array_equal(cache_lookup(cache, ["x3", "x0"]), cache.vectors[[3, 0]])
    with pytest.raises(LookupMissError):
        cache_lookup(cache, ["nope"])
    with pytest.raises(KeyError):
        cache.lookup(["nope"])


def test_cache_files_round_trip_byte_exact(teacher, tmp_path):
    cache = build_cache(teacher, TEXTS, instruction="q: ", val_holdout=2)
    cache.save(tmp_path / "a")
    loaded = EmbeddingCache.load(tmp_path / "a")
    loaded.save(tmp_path / "b")
    for ext in (".jsonl", ".bin"):
        assert (tmp_path / f"a{ext}").read_bytes() == (tmp_path / f"b{ext}").read_bytes()
    assert np.array_equal(loaded.vectors, cache.vectors)
    assert loaded.records == cache.records and loaded.instruction == "q: "


def test_vector_file_header_layout(teacher):
    cache = build_cache(teacher, TEXTS, val_holdout=1)
    buf = cache.vector_bytes()
    magic, version, dim, normalized, count = struct.unpack_from("<4sIIBQ", buf, 0)
    assert (magic, version, dim, normalized, count) == (b"LEAF", 1, 8, 1, len(TEXTS))
    (ilen,) = struct.unpack_from("<I", buf, 21)
    body = np.frombuffer(buf, dtype="<f4", offset=25 + ilen).reshape(count, dim)
    assert np.array_equal(body, cache.vectors)


def test_corrupt_cache_is_rejected(teacher, tmp_path):
    cache = build_cache(teacher, TEXTS, val_holdout=1)
    cache.save(tmp_path / "c")
    bin_path = tmp_path / "c.bin"
    bin_path.write_bytes(b"XXXX" + bin_path.read_bytes()[4:])
    with pytest.raises(CacheFormatError):
        EmbeddingCache.load(tmp_path / "c")
    with pytest.raises(CacheFormatError):
        EmbeddingCache.load(tmp_path / "missing")


def test_prior_cache_reuses_vectors(teacher):
    prior = build_cache(teacher, TEXTS[:5], val_holdout=1)
    calls = teacher.texts_embedded
    cache = build_cache(teacher, TEXTS, val_holdout=1, prior=prior)
    assert teacher.texts_embedded - calls == len(TEXTS) - 5
    assert np.array_equal(cache.vectors[:5], prior.vectors)


def test_prior_dim_mismatch_is_a_format_error(teacher, tiny_vocab):
    other = synthetic_teacher(tiny_config(vocab_size=len(tiny_vocab), hidden=16, out=4), tiny_vocab)
    prior = build_cache(other, TEXTS[:3], val_holdout=1)
    with pytest.raises(CacheFormatError):
        build_cache(teacher, TEXTS, val_holdout=1, prior=prior)


def test_training_never_calls_the_teacher(teacher, tiny_vocab):
    cache = build_cache(teacher, TEXTS, val_holdout=2)
    before = teacher.embed_calls
    student = init_encoder(tiny_config(vocab_size=len(tiny_vocab), out=8))
    cfg = TrainConfig(batch_size=4, cycles=1, epochs_per_cycle=2, loss={"kind": "leaf+minilm"})
    train(student, cache, cfg, tiny_vocab, teacher=teacher)
    assert teacher.embed_calls == before
