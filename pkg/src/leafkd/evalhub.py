"""Retrieval evaluation: exact search, nDCG@10, MRL truncation, quantization.

Two encoder assignments are supported. In ``standard`` mode the student
embeds both queries and documents. In ``asym`` mode documents are embedded
by the teacher and queries by the student, which only works because the
student lives in the teacher's vector space.
"""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
import timeit
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, DataError, DimensionError
from .numerics import F32, NORM_FLOOR

MODES = ("standard", "asym")
SCHEMES = ("float32", "int8", "binary")
BENCH_BATCH_SIZES = (1, 2, 4, 8, 16, 24)
LATENCY_BUDGET_S = 0.100


# ---------------------------------------------------------------------------
# datasets


class JudgedDataset:
    """Documents, queries and graded relevance judgments (evaluation only)."""

    def __init__(self, docs, queries, qrels: dict):
        self.docs = [(str(i), t) for i, t in docs]
        self.queries = [(str(i), t) for i, t in queries]
        self.qrels = {str(q): {str(d): int(g) for d, g in rel.items()} for q, rel in qrels.items()}
        doc_ids = {d for d, _ in self.docs}
        query_ids = {q for q, _ in self.queries}
        if len(doc_ids) != len(self.docs) or len(query_ids) != len(self.queries):
            raise DataError("duplicate document or query ids")
        for q, rel in self.qrels.items():
            if q not in query_ids:
                raise DataError(f"qrels reference unknown query {q!r}")
            for d, g in rel.items():
                if d not in doc_ids:
                    raise DataError(f"qrels reference unknown document {d!r}")
                if g < 0:
                    raise DataError("relevance grades must be >= 0")

    @property
    def doc_ids(self) -> list[str]:
        return [d for d, _ in self.docs]

    @property
    def doc_texts(self) -> list[str]:
        return [t for _, t in self.docs]

    @property
    def query_ids(self) -> list[str]:
        return [q for q, _ in self.queries]

    @property
    def query_texts(self) -> list[str]:
        return [t for _, t in self.queries]

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        _write_jsonl(d / "docs.jsonl", self.docs)
        _write_jsonl(d / "queries.jsonl", self.queries)
        lines = [f"{q}\t{doc}\t{g}" for q, rel in self.qrels.items() for doc, g in rel.items()]
        (d / "qrels.tsv").write_text("".join(line + "\n" for line in lines), encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "JudgedDataset":
        d = Path(directory)
        try:
            docs = _read_jsonl(d / "docs.jsonl")
            queries = _read_jsonl(d / "queries.jsonl")
            qrels: dict[str, dict[str, int]] = {}
            for n, line in enumerate((d / "qrels.tsv").read_text(encoding="utf-8").splitlines()):
                if not line.strip():
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise DataError(f"qrels line {n + 1}: expected 3 tab-separated fields")
                qrels.setdefault(parts[0], {})[parts[1]] = int(parts[2])
        except FileNotFoundError as exc:
            raise DataError(f"missing dataset file: {exc.filename}") from exc
        return cls(docs, queries, qrels)


def _write_jsonl(path: Path, items) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, t in items:
            fh.write(json.dumps({"id": i, "text": t}, ensure_ascii=False) + "\n")


def _read_jsonl(path: Path) -> list[tuple[str, str]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append((str(rec["id"]), rec["text"]))
            except (ValueError, KeyError) as exc:
                raise DataError(f"{path.name} line {n + 1}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# truncation and quantization


def mrl_truncate(vectors: np.ndarray, k: int, renormalize: bool = True) -> np.ndarray:
    """Keep the first ``k`` components, optionally rescaling rows to unit norm.

    Rows whose norm is already within 1e-6 of one are left untouched.
    """
    d = vectors.shape[1]
    if not 1 <= k <= d:
        raise DimensionError(f"truncation dim {k} outside [1, {d}]")
    out = np.array(vectors[:, :k], dtype=F32, order="C")
    if renormalize:
        x = out.astype(np.float64)
        n = np.sqrt((x * x).sum(axis=1))
        fix = np.abs(n - 1.0) > 1e-6
        out[fix] = (x[fix] / np.maximum(n[fix], NORM_FLOOR)[:, None]).astype(F32)
    return out


@dataclass(frozen=True)
class QuantScheme:
    kind: str = "float32"
    scales: Optional[np.ndarray] = None
    dead_dims: tuple = ()

    def __post_init__(self):
        if self.kind not in SCHEMES:
            raise ConfigError(f"unknown quantization scheme {self.kind!r}")
        if self.kind == "int8" and (self.scales is None or np.any(self.scales <= 0)):
            raise ConfigError("int8 scheme needs positive per-dimension scales")


def calibrate(kind: str, doc_vectors: np.ndarray) -> QuantScheme:
    """Scheme for ``kind``; int8 scales are ``max_i |x_ij| / 127`` over the docs.

    A dimension that is zero on every doc gets scale 1 and is listed in
    ``dead_dims``.
    """
    if kind != "int8":
        return QuantScheme(kind)
    amax = np.abs(doc_vectors.astype(np.float64)).max(axis=0)
    dead = tuple(int(j) for j in np.flatnonzero(amax == 0))
    scales = np.where(amax > 0, amax / 127.0, 1.0)
    return QuantScheme("int8", scales, dead)


def quantize(vectors: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    """Encode rows under ``scheme``: float32 copy, int8 codes, or packed sign bits."""
    if scheme.kind == "float32":
        return np.ascontiguousarray(vectors, dtype=F32)
    if scheme.kind == "int8":
        q = np.rint(vectors.astype(np.float64) / scheme.scales)
        return np.ascontiguousarray(np.clip(q, -127, 127).astype(np.int8))
    return np.ascontiguousarray(np.packbits(vectors >= 0, axis=1))


def dequantize(payload: np.ndarray, scheme: QuantScheme, dim: int) -> np.ndarray:
    if scheme.kind == "float32":
        return payload.astype(np.float64)
    if scheme.kind == "int8":
        return payload.astype(np.float64) * scheme.scales
    bits = np.unpackbits(payload, axis=1, count=dim)
    return np.where(bits == 1, 1.0, -1.0)


def score(query_payload: np.ndarray, doc_payload: np.ndarray, scheme: QuantScheme, dim: int) -> np.ndarray:
    """Dot-product scores (queries x docs) in the quantized domain, float64."""
    if scheme.kind == "float32":
        return query_payload.astype(np.float64) @ doc_payload.astype(np.float64).T
    if scheme.kind == "int8":
        s2 = np.ascontiguousarray(scheme.scales * scheme.scales, dtype=np.float64)
        return kernels.int8_scores(query_payload, doc_payload, s2)
    return kernels.binary_scores(query_payload, doc_payload, dim).astype(np.float64)


# ---------------------------------------------------------------------------
# index and search


@dataclass
class Index:
    doc_ids: list
    payload: np.ndarray
    scheme: QuantScheme
    dim: int
    source_dim: int
    renormalize: bool = True
    float_queries: bool = False
    _id_rank: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        order = np.argsort(np.array(self.doc_ids, dtype=object), kind="stable")
        rank = np.empty(len(self.doc_ids), dtype=np.int64)
        rank[order] = np.arange(len(self.doc_ids))
        self._id_rank = rank

    def __len__(self) -> int:
        return len(self.doc_ids)

    def prepare_queries(self, vectors: np.ndarray) -> np.ndarray:
        if vectors.ndim != 2 or vectors.shape[1] != self.source_dim:
            raise DimensionError(f"query dim {vectors.shape[-1]} != index source dim {self.source_dim}")
        v = mrl_truncate(vectors, self.dim, self.renormalize)
        return v if self.float_queries else quantize(v, self.scheme)

    def scores(self, query_vectors: np.ndarray) -> np.ndarray:
        q = self.prepare_queries(query_vectors)
        if self.float_queries and self.scheme.kind != "float32":
            return q.astype(np.float64) @ dequantize(self.payload, self.scheme, self.dim).T
        return score(q, self.payload, self.scheme, self.dim)


def index_vectors(
    doc_ids: Sequence[str],
    vectors: np.ndarray,
    dim: Optional[int] = None,
    scheme: str = "float32",
    renormalize: bool = True,
    float_queries: bool = False,
) -> Index:
    """Truncate, calibrate and quantize precomputed document vectors."""
    d = vectors.shape[1]
    k = d if dim is None else int(dim)
    if not 1 <= k <= d:
        raise DimensionError(f"truncation dim {k} outside [1, {d}]")
    v = mrl_truncate(vectors, k, renormalize)
    sch = calibrate(scheme, v)
    return Index(list(doc_ids), quantize(v, sch), sch, k, d, renormalize, float_queries)


def build_index(docs, encoder, dim: Optional[int] = None, scheme: str = "float32", **kw) -> Index:
    """Embed ``(id, text)`` docs with ``encoder`` and index them."""
    ids = [i for i, _ in docs]
    vectors = encoder.embed([t for _, t in docs])
    return index_vectors(ids, vectors, dim, scheme, **kw)


RetrievalRun = dict  # query id -> list of (doc id, score), best first


def search(index: Index, query_vectors: np.ndarray, k: int = 10, query_ids: Optional[Sequence[str]] = None) -> RetrievalRun:
    """Exact top-``k`` by score; ties go to the smaller doc id."""
    if query_ids is None:
        query_ids = [str(i) for i in range(len(query_vectors))]
    s = index.scores(query_vectors)
    k = min(k, len(index))
    run = {}
    for qi, qid in enumerate(query_ids):
        order = np.lexsort((index._id_rank, -s[qi]))[:k]
        run[qid] = [(index.doc_ids[j], float(s[qi, j])) for j in order]
    return run


# ---------------------------------------------------------------------------
# metric


def ndcg_at_10(run: RetrievalRun, qrels: dict, k: int = 10) -> tuple[dict, float]:
    """Per-query and mean nDCG@k with gain ``2^rel - 1`` and ``1/log2(rank+1)`` discount.

    The ideal ordering uses every judged document of the query. Queries
    without any positive judgment are left out of the mean; judged queries
    missing from the run score 0.
    """
    per = {}
    for qid, rel in qrels.items():
        grades = sorted((g for g in rel.values() if g > 0), reverse=True)
        if not grades:
            continue
        idcg = sum((2.0**g - 1.0) / math.log2(r + 2) for r, g in enumerate(grades[:k]))
        dcg = 0.0
        for r, (did, _) in enumerate(run.get(qid, [])[:k]):
            g = rel.get(did, 0)
            if g > 0:
                dcg += (2.0**g - 1.0) / math.log2(r + 2)
        per[qid] = dcg / idcg
    mean = float(np.mean(list(per.values()))) if per else 0.0
    return per, mean


# ---------------------------------------------------------------------------
# evaluation pipelines


@dataclass(frozen=True)
class SweepRow:
    mode: str
    dim: int
    scheme: str
    ndcg10: float


def evaluate_vectors(dataset: JudgedDataset, query_vecs, doc_vecs, dim=None, scheme="float32", **kw) -> float:
    index = index_vectors(dataset.doc_ids, doc_vecs, dim, scheme, **kw)
    run = search(index, query_vecs, 10, dataset.query_ids)
    return ndcg_at_10(run, dataset.qrels)[1]


def evaluate(dataset: JudgedDataset, query_encoder, doc_encoder=None, dim=None, scheme="float32", **kw) -> float:
    """Mean nDCG@10 with queries and docs embedded by the given encoders."""
    doc_encoder = doc_encoder or query_encoder
    return evaluate_vectors(
        dataset, query_encoder.embed(dataset.query_texts), doc_encoder.embed(dataset.doc_texts), dim, scheme, **kw
    )


def sweep(
    dataset: JudgedDataset,
    student,
    teacher,
    dims: Sequence[int],
    schemes: Sequence[str] = SCHEMES,
    modes: Sequence[str] = MODES,
    renormalize: bool = True,
    float_queries: bool = False,
) -> list[SweepRow]:
    """nDCG@10 for every (mode, dim, scheme) cell."""
    for m in modes:
        if m not in MODES:
            raise ConfigError(f"unknown mode {m!r}")
    q_student = student.embed(dataset.query_texts)
    d_student = student.embed(dataset.doc_texts) if "standard" in modes else None
    d_teacher = teacher.embed(dataset.doc_texts) if "asym" in modes else None
    if d_teacher is not None and d_teacher.shape[1] != q_student.shape[1]:
        raise DimensionError("student and teacher embeddings differ in width")
    rows = []
    for mode in modes:
        docs = d_student if mode == "standard" else d_teacher
        for dim in dims:
            for sch in schemes:
                val = evaluate_vectors(
                    dataset, q_student, docs, dim, sch, renormalize=renormalize, float_queries=float_queries
                )
                rows.append(SweepRow(mode, int(dim), sch, val))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "dim", "scheme", "ndcg10"])
    for r in rows:
        w.writerow([r.mode, r.dim, r.scheme, repr(r.ndcg10)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# robustness points


def collect_robustness_points(checkpoints, dataset: JudgedDataset, teacher, vocab, mode: str = "asym", epochs_per_cycle: Optional[int] = None):
    """One (mean val error, nDCG@10) point per training checkpoint.

    In ``asym`` mode documents are embedded once by the teacher.
    """
    from .encoder import TextEncoder
    from .trainer import RobustnessPoint

    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    docs_t = teacher.embed(dataset.doc_texts) if mode == "asym" else None
    points = []
    for ck in checkpoints:
        enc = TextEncoder(ck.state, vocab)
        q = enc.embed(dataset.query_texts)
        d = docs_t if mode == "asym" else enc.embed(dataset.doc_texts)
        epc = epochs_per_cycle or ck.config.epochs_per_cycle
        points.append(RobustnessPoint(ck.val_loss, evaluate_vectors(dataset, q, d), ck.epoch % epc == 0, ck.epoch))
    return points


# ---------------------------------------------------------------------------
# throughput


@dataclass
class BenchResult:
    batch_sizes: list
    times: dict  # batch size -> list of seconds per repeat
    repeats: int

    @property
    def throughput_samples(self) -> list[float]:
        return [b / t for b in self.batch_sizes for t in self.times[b]]

    @property
    def throughput(self) -> tuple[float, float]:
        s = self.throughput_samples
        return statistics.fmean(s), (statistics.stdev(s) if len(s) > 1 else 0.0)

    @property
    def min_latency(self) -> tuple[float, float]:
        """Mean and sd of the batch-of-one wall time, seconds."""
        t = self.times[min(self.batch_sizes)]
        return statistics.fmean(t), (statistics.stdev(t) if len(t) > 1 else 0.0)

    @property
    def max_batch(self):
        """Largest batch size whose mean time is within the latency budget, else ``"-"``."""
        fit = [b for b in self.batch_sizes if statistics.fmean(self.times[b]) <= LATENCY_BUDGET_S]
        return max(fit) if fit else "-"


def throughput_bench(encoder, texts: Sequence[str], batch_sizes=BENCH_BATCH_SIZES, repeats: int = 7, seed: int = 0) -> BenchResult:
    """Wall time of ``repeats`` single inferences per batch size (timing not asserted)."""
    if not texts:
        raise DataError("throughput_bench needs texts")
    rng = np.random.default_rng(seed)
    times = {}
    for b in batch_sizes:
        idx = rng.choice(len(texts), size=b, replace=len(texts) < b)
        batch = [texts[i] for i in idx]
        times[b] = timeit.Timer(lambda: encoder.embed(batch)).repeat(repeat=repeats, number=1)
    return BenchResult(list(batch_sizes), times, repeats)


BENCH_COLUMNS = [
    "model",
    "docs_per_s",
    "docs_speedup",
    "docs_min_latency_ms",
    "docs_max_n",
    "queries_per_s",
    "queries_speedup",
    "queries_min_latency_ms",
    "queries_max_n",
]


def bench_table(results: dict, baseline: Optional[str] = None) -> list[dict]:
    """Table rows from ``{model: {"docs": BenchResult, "queries": BenchResult}}``.

    Speedups are relative to ``baseline`` (default: the first model).
    """
    baseline = baseline or next(iter(results))
    rows = []
    for model, sides in results.items():
        row = {"model": model}
        for side in ("docs", "queries"):
            r = sides[side]
            mean, sd = r.throughput
            lat, lat_sd = r.min_latency
            base = results[baseline][side].throughput[0]
            row[f"{side}_per_s"] = f"{mean:.1f} ± {sd:.1f}"
            row[f"{side}_speedup"] = f"{mean / base:.1f}x"
            row[f"{side}_min_latency_ms"] = f"{lat * 1e3:.2f} ± {lat_sd * 1e3:.2f}"
            row[f"{side}_max_n"] = str(r.max_batch)
        rows.append(row)
    return rows


def bench_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=BENCH_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()
