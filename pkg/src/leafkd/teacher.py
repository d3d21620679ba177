"""Teacher oracles and the precomputed teacher-embedding cache.

A cache is a pair of files sharing a stem:

``<stem>.jsonl``
    One JSON record per line: ``{"id", "text", "split"}``.
``<stem>.bin``
    ``b"LEAF"``, u32 version, u32 dim, u8 normalized, u64 count,
    u32 instruction length + UTF-8 instruction, then ``count * dim``
    little-endian float32 values, row-major, rows in manifest order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Protocol, Sequence

import numpy as np

from .encoder import EncoderConfig, EncoderState, TextEncoder, init_encoder
from .errors import CacheFormatError, ConfigError, DataError, LookupMissError
from .numerics import F32
from .tokenizer import Vocab

CACHE_MAGIC = b"LEAF"
CACHE_VERSION = 1
_HEAD = struct.Struct("<4sIIBQ")


class TeacherOracle(Protocol):
    output_dim: int
    normalized: bool

    def embed(self, texts: Sequence[str], instruction: Optional[str] = None) -> np.ndarray: ...


class EncoderTeacher:
    """A frozen encoder used as a teacher. Counts ``embed`` calls."""

    def __init__(self, state: EncoderState, vocab: Vocab, max_len: Optional[int] = None):
        self._encoder = TextEncoder(state, vocab, max_len=max_len)
        self.embed_calls = 0
        self.texts_embedded = 0

    @property
    def state(self) -> EncoderState:
        return self._encoder.state

    @property
    def vocab(self) -> Vocab:
        return self._encoder.vocab

    @property
    def encoder(self) -> TextEncoder:
        return self._encoder

    @property
    def output_dim(self) -> int:
        return self._encoder.output_dim

    @property
    def normalized(self) -> bool:
        return self._encoder.normalized

    def embed(self, texts: Sequence[str], instruction: Optional[str] = None) -> np.ndarray:
        self.embed_calls += 1
        self.texts_embedded += len(texts)
        return self._encoder.embed(texts, instruction or "")


def synthetic_teacher(config: EncoderConfig, vocab: Vocab, seed: Optional[int] = None) -> EncoderTeacher:
    """Randomly initialized, frozen encoder standing in for a large teacher."""
    if not config.normalize_output:
        raise ConfigError("synthetic teacher requires normalize_output=True")
    if seed is not None:
        config = EncoderConfig.from_dict({**config.to_dict(), "seed": seed})
    return EncoderTeacher(init_encoder(config), vocab)


@dataclass(frozen=True)
class CacheRecord:
    id: str
    text: str
    split: str


class EmbeddingCache:
    """Teacher vectors for a fixed set of texts, with a train/val split."""

    def __init__(self, records: Sequence[CacheRecord], vectors: np.ndarray, normalized: bool, instruction: str = ""):
        vectors = np.ascontiguousarray(vectors, dtype=F32)
        if vectors.ndim != 2 or vectors.shape[0] != len(records):
            raise CacheFormatError(f"{len(records)} records but vectors of shape {vectors.shape}")
        self.records = list(records)
        self.vectors = vectors
        self.normalized = bool(normalized)
        self.instruction = instruction or ""
        self._row = {r.id: i for i, r in enumerate(self.records)}
        if len(self._row) != len(self.records):
            raise CacheFormatError("duplicate ids in cache manifest")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def rows(self, split: str) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.records) if r.split == split], dtype=np.int64)

    def lookup(self, ids: Sequence[str]) -> np.ndarray:
        try:
            idx = [self._row[i] for i in ids]
        except KeyError as exc:
            raise LookupMissError(f"id {exc.args[0]!r} not in cache") from None
        return self.vectors[idx]

    def iter_split(self, split: str = "train") -> Iterator[tuple[CacheRecord, np.ndarray]]:
        for i, r in enumerate(self.records):
            if r.split == split:
                yield r, self.vectors[i]

    # persistence ---------------------------------------------------------------

    @staticmethod
    def paths(stem) -> tuple[Path, Path]:
        stem = Path(stem)
        return stem.with_suffix(".jsonl"), stem.with_suffix(".bin")

    def manifest_bytes(self) -> bytes:
        lines = [
            json.dumps({"id": r.id, "text": r.text, "split": r.split}, ensure_ascii=False, separators=(",", ":"))
            for r in self.records
        ]
        return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""

    def vector_bytes(self) -> bytes:
        instr = self.instruction.encode("utf-8")
        head = _HEAD.pack(CACHE_MAGIC, CACHE_VERSION, self.dim, int(self.normalized), len(self))
        return head + struct.pack("<I", len(instr)) + instr + self.vectors.astype("<f4").tobytes()

    def save(self, stem) -> None:
        man, vec = self.paths(stem)
        man.parent.mkdir(parents=True, exist_ok=True)
        man.write_bytes(self.manifest_bytes())
        vec.write_bytes(self.vector_bytes())

    @classmethod
    def load(cls, stem) -> "EmbeddingCache":
        man, vec = cls.paths(stem)
        if not man.exists() or not vec.exists():
            raise CacheFormatError(f"cache files missing for stem {stem}")
        records = []
        for n, line in enumerate(man.read_bytes().decode("utf-8").splitlines()):
            try:
                d = json.loads(line)
                records.append(CacheRecord(str(d["id"]), d["text"], d["split"]))
            except (ValueError, KeyError) as exc:
                raise CacheFormatError(f"bad manifest line {n + 1}: {exc}") from exc
        buf = vec.read_bytes()
        if len(buf) < _HEAD.size + 4:
            raise CacheFormatError("vector file too short")
        magic, version, dim, normalized, count = _HEAD.unpack_from(buf, 0)
        if magic != CACHE_MAGIC:
            raise CacheFormatError("bad cache magic")
        if version != CACHE_VERSION:
            raise CacheFormatError(f"unsupported cache version {version}")
        (ilen,) = struct.unpack_from("<I", buf, _HEAD.size)
        pos = _HEAD.size + 4
        instruction = buf[pos : pos + ilen].decode("utf-8")
        pos += ilen
        if count != len(records):
            raise CacheFormatError(f"manifest has {len(records)} records, vector header says {count}")
        if len(buf) - pos != 4 * count * dim:
            raise CacheFormatError("vector payload size does not match header")
        vectors = np.frombuffer(buf, dtype="<f4", offset=pos).reshape(count, dim).astype(F32)
        return cls(records, vectors, bool(normalized), instruction)


def build_cache(
    teacher: TeacherOracle,
    texts: Sequence[str],
    instruction: Optional[str] = None,
    val_holdout: int = 128 * 32,
    seed: int = 0,
    ids: Optional[Sequence[str]] = None,
    prior: Optional[EmbeddingCache] = None,
    batch_size: int = 256,
) -> EmbeddingCache:
    """Embed ``texts`` with the teacher and mark ``val_holdout`` random items as val.

    The instruction prefix is prepended to every text before embedding. Items
    whose id already appears in ``prior`` (with the same text and instruction)
    reuse the stored vector instead of calling the teacher.
    """
    texts = list(texts)
    if not texts:
        raise DataError("build_cache needs at least one text")
    if not 0 <= val_holdout < len(texts):
        raise ConfigError(f"val_holdout must be in [0, {len(texts)}), got {val_holdout}")
    ids = [f"t{i:06d}" for i in range(len(texts))] if ids is None else [str(i) for i in ids]
    if len(ids) != len(texts):
        raise DataError("ids and texts differ in length")
    instruction = instruction or ""
    if prior is not None and prior.dim != teacher.output_dim:
        raise CacheFormatError(f"teacher dim {teacher.output_dim} does not match prior cache dim {prior.dim}")

    vectors = np.empty((len(texts), teacher.output_dim), dtype=F32)
    todo = list(range(len(texts)))
    if prior is not None and prior.instruction == instruction:
        known = {r.id: (i, r.text) for i, r in enumerate(prior.records)}
        todo = []
        for i, (tid, text) in enumerate(zip(ids, texts)):
            hit = known.get(tid)
            if hit is not None and hit[1] == text:
                vectors[i] = prior.vectors[hit[0]]
            else:
                todo.append(i)
    for s in range(0, len(todo), batch_size):
        chunk = todo[s : s + batch_size]
        emb = np.asarray(teacher.embed([texts[i] for i in chunk], instruction), dtype=F32)
        if emb.shape != (len(chunk), teacher.output_dim):
            raise CacheFormatError(f"teacher returned shape {emb.shape}")
        vectors[chunk] = emb

    rng = np.random.default_rng(seed)
    val = set(rng.choice(len(texts), size=val_holdout, replace=False).tolist()) if val_holdout else set()
    records = [CacheRecord(tid, t, "val" if i in val else "train") for i, (tid, t) in enumerate(zip(ids, texts))]
    return EmbeddingCache(records, vectors, teacher.normalized, instruction)


def cache_lookup(cache: EmbeddingCache, ids: Sequence[str]) -> np.ndarray:
    """Stored teacher vectors for ``ids``, in the order given."""
    return cache.lookup(ids)
