import itertools
import math

import numpy as np
import pytest

from conftest import tiny_config
from leafkd.encoder import TextEncoder, init_encoder
from leafkd.errors import DataError, DimensionError
from leafkd.evalhub import (
    BENCH_COLUMNS,
    JudgedDataset,
    bench_csv,
    bench_table,
    calibrate,
    dequantize,
    evaluate,
    index_vectors,
    mrl_truncate,
    ndcg_at_10,
    quantize,
    score,
    search,
    sweep,
    sweep_csv,
    throughput_bench,
)


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(np.float32)


def oracle_ndcg(ranked, rel, k=10):
    """Independent nDCG: ideal DCG found by trying every ordering of the judged docs."""
    def dcg(ids):
        return sum((2 ** rel.get(d, 0) - 1) / math.log2(i + 2) for i, d in enumerate(ids[:k]))

    judged = [d for d, g in rel.items() if g > 0]
    ideal = max(dcg(list(p)) for p in itertools.permutations(judged))
    return dcg(ranked) / ideal


# ---------------------------------------------------------------------------
# metric


def test_ndcg_perfect_and_rank_two():
    assert ndcg_at_10({"q": [("a", 1.0)]}, {"q": {"a": 1}})[1] == 1.0
    run = {"q": [("b", 0.9), ("a", 0.5), ("c", 0.1)]}
    assert abs(ndcg_at_10(run, {"q": {"a": 1}})[1] - 1 / math.log2(3)) <= 1e-9


def test_ndcg_matches_exhaustive_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n_docs, n_q = int(rng.integers(1, 9)), int(rng.integers(1, 4))
        docs = [f"d{i}" for i in range(n_docs)]
        qrels, run, expect = {}, {}, {}
        for q in range(n_q):
            qid = f"q{q}"
            grades = rng.integers(0, 4, n_docs)
            qrels[qid] = {d: int(g) for d, g in zip(docs, grades)}
            ranked = list(rng.permutation(docs))
            run[qid] = [(d, float(-i)) for i, d in enumerate(ranked)]
            if grades.max() > 0:
                expect[qid] = oracle_ndcg(ranked, qrels[qid])
        per, mean = ndcg_at_10(run, qrels)
        assert per.keys() == expect.keys()
        for qid, v in expect.items():
            assert abs(per[qid] - v) <= 1e-9
        if expect:
            assert abs(mean - np.mean(list(expect.values()))) <= 1e-9


def test_ndcg_skips_unjudged_queries_and_bounds():
    per, mean = ndcg_at_10({"a": [("x", 1)], "b": [("x", 1)]}, {"a": {"x": 0}, "b": {"x": 2, "y": 1}})
    assert list(per) == ["b"] and 0 < mean < 1


# ---------------------------------------------------------------------------
# truncation and quantization


def test_mrl_identity_and_unit_one_dim(rng):
    v = unit_rows(rng, 6, 8)
    assert np.array_equal(mrl_truncate(v, 8), v)
    one = mrl_truncate(v, 1)
    np.testing.assert_allclose(np.abs(one), 1.0, atol=1e-7)
    with pytest.raises(DimensionError):
        mrl_truncate(v, 9)
    raw = mrl_truncate(v, 3, renormalize=False)
    assert np.array_equal(raw, v[:, :3])


def test_mrl_full_dim_ranking_identity(rng):
    docs, q = unit_rows(rng, 30, 16), unit_rows(rng, 5, 16)
    ids = [f"d{i:02d}" for i in range(30)]
    full = search(index_vectors(ids, docs), q)
    same = search(index_vectors(ids, docs, dim=16), q)
    assert full == same
    oracle = {str(i): [ids[j] for j in np.argsort(-(q[i] @ docs.T), kind="stable")[:10]] for i in range(5)}
    assert {k: [d for d, _ in v] for k, v in full.items()} == oracle


def test_int8_round_trip_bound(rng):
    x = rng.normal(size=(1000, 24)) * rng.uniform(0.1, 3, 24)
    sch = calibrate("int8", x)
    np.testing.assert_allclose(sch.scales, np.abs(x).max(axis=0) / 127)
    err = np.abs(dequantize(quantize(x, sch), sch, 24) - x)
    assert np.all(err <= sch.scales / 2 + 1e-12)


def test_int8_dead_dimension_flagged():
    x = np.array([[1.0, 0.0], [-0.5, 0.0]])
    sch = calibrate("int8", x)
    assert sch.dead_dims == (1,) and sch.scales[1] == 1.0


def test_int8_scores_match_dequantized_dot(rng):
    d = unit_rows(rng, 20, 12)
    q = unit_rows(rng, 3, 12)
    sch = calibrate("int8", d)
    ref = dequantize(quantize(q, sch), sch, 12) @ dequantize(quantize(d, sch), sch, 12).T
    np.testing.assert_allclose(score(quantize(q, sch), quantize(d, sch), sch, 12), ref, rtol=1e-12)


def test_binary_sign_symmetry_and_self_score(rng):
    v = rng.normal(size=(4, 13))
    sch = calibrate("binary", v)
    b, nb = quantize(v, sch), quantize(-v, sch)
    bits = np.unpackbits(b, axis=1, count=13)
    assert np.all(bits ^ np.unpackbits(nb, axis=1, count=13))
    assert np.all(np.diag(score(b, b, sch, 13)) == 13)
    ham = (bits[:, None, :] != bits[None, :, :]).sum(-1)
    np.testing.assert_array_equal(score(b, b, sch, 13), 13 - 2 * ham)


# ---------------------------------------------------------------------------
# search


def test_self_retrieval_and_clamping(rng):
    docs = unit_rows(rng, 5, 8)
    ids = list("abcde")
    run = search(index_vectors(ids, docs), docs[[2]], k=50)
    assert len(run["0"]) == 5
    assert run["0"][0][0] == "c" and abs(run["0"][0][1] - 1) <= 1e-6


def test_ties_go_to_smaller_id_and_permutation_invariance():
    docs = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0]], np.float32)
    ids = ["d3", "d1", "d0", "d2"]
    run = search(index_vectors(ids, docs), np.array([[1.0, 0.0]], np.float32))
    assert [d for d, _ in run["0"]] == ["d1", "d2", "d3", "d0"]
    perm = [2, 0, 3, 1]
    again = search(index_vectors([ids[i] for i in perm], docs[perm]), np.array([[1.0, 0.0]], np.float32))
    assert again == run


def test_search_dim_mismatch(rng):
    index = index_vectors(["a", "b"], unit_rows(rng, 2, 8), dim=4)
    with pytest.raises(DimensionError):
        search(index, unit_rows(rng, 1, 4))


# ---------------------------------------------------------------------------
# datasets, sweeps and bench


def toy_dataset():
    docs = [("d0", "the cat sat"), ("d1", "a dog ran"), ("d2", "the mat"), ("d3", "cat on a mat")]
    queries = [("q0", "cat"), ("q1", "dog")]
    return JudgedDataset(docs, queries, {"q0": {"d0": 1, "d3": 2}, "q1": {"d1": 1}})


def test_dataset_round_trip(tmp_path):
    ds = toy_dataset()
    ds.save(tmp_path / "a")
    back = JudgedDataset.load(tmp_path / "a")
    assert back.docs == ds.docs and back.queries == ds.queries and back.qrels == ds.qrels
    back.save(tmp_path / "b")
    for name in ("docs.jsonl", "queries.jsonl", "qrels.tsv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_dataset_validation():
    with pytest.raises(DataError):
        JudgedDataset([("d0", "x")], [("q0", "y")], {"q0": {"d9": 1}})
    with pytest.raises(DataError):
        JudgedDataset([("d0", "x"), ("d0", "z")], [], {})


@pytest.fixture
def encoder(tiny_vocab):
    return TextEncoder(init_encoder(tiny_config(vocab_size=len(tiny_vocab), hidden=8, out=8)), tiny_vocab)


def test_sweep_shape_and_no_op_cell(encoder, tiny_vocab):
    teacher = TextEncoder(init_encoder(tiny_config(vocab_size=len(tiny_vocab), hidden=8, out=8, seed=9)), tiny_vocab)
    ds = toy_dataset()
    rows = sweep(ds, encoder, teacher, [8, 4, 2])
    assert len(rows) == 2 * 3 * 3
    plain = evaluate(ds, encoder)
    cell = next(r for r in rows if (r.mode, r.dim, r.scheme) == ("standard", 8, "float32"))
    assert cell.ndcg10 == plain
    assert sweep_csv(rows).splitlines()[0] == "mode,dim,scheme,ndcg10"
    assert len(sweep_csv(rows).splitlines()) == 19


def test_sweep_degenerate_asymmetry(encoder):
    rows = sweep(toy_dataset(), encoder, encoder, [8, 4], modes=["standard", "asym"])
    std = {(r.dim, r.scheme): r.ndcg10 for r in rows if r.mode == "standard"}
    asym = {(r.dim, r.scheme): r.ndcg10 for r in rows if r.mode == "asym"}
    assert all(abs(std[k] - asym[k]) <= 1e-9 for k in std)


def test_bench_table_shape(encoder):
    texts = ["the cat sat", "a dog"]
    fast = throughput_bench(encoder, texts, batch_sizes=(1, 2), repeats=7)
    assert all(len(t) == 7 for t in fast.times.values())
    assert fast.max_batch in (1, 2, "-")
    slow = throughput_bench(encoder, texts, batch_sizes=(1, 2), repeats=7)
    slow.times = {b: [1.0] * 7 for b in (1, 2)}
    rows = bench_table({"teacher": {"docs": fast, "queries": fast}, "student": {"docs": slow, "queries": slow}})
    assert [r["model"] for r in rows] == ["teacher", "student"]
    assert rows[0]["docs_speedup"] == "1.0x" and rows[1]["queries_max_n"] == "-"
    assert " ± " in rows[0]["docs_per_s"]
    assert bench_csv(rows).splitlines()[0] == ",".join(BENCH_COLUMNS)
