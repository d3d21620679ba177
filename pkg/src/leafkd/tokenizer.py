"""Wordpiece tokenizer with greedy longest-match segmentation.

Texts are lowercased and split on whitespace; each word is segmented into
the longest vocabulary prefix, then ``##``-prefixed continuation pieces.
A character that matches no piece becomes a single ``[UNK]`` and
segmentation resumes after it, so one unknown character never erases the
rest of the word.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError

PAD, UNK, CLS, SEP = 0, 1, 2, 3
RESERVED = ("[PAD]", "[UNK]", "[CLS]", "[SEP]")
CONT = "##"
DEFAULT_MAX_LEN = 64


def normalize(text: str) -> list[str]:
    return text.lower().split()


class Vocab:
    """Immutable token <-> id map with the four reserved tokens at ids 0..3."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise DataError(f"vocab must start with {RESERVED}")
        index = {}
        for i, tok in enumerate(tokens):
            if tok in index:
                raise DataError(f"duplicate vocab token {tok!r}")
            index[tok] = i
        self._tokens = tuple(tokens)
        self._index = index
        self._max_piece = max(len(t[2:] if t.startswith(CONT) else t) for t in tokens)

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self._tokens == other._tokens

    def __hash__(self) -> int:
        return hash(self._tokens)

    @property
    def tokens(self) -> tuple[str, ...]:
        return self._tokens

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK)

    def token_of(self, i: int) -> str:
        return self._tokens[i]

    def save(self, path) -> None:
        Path(path).write_bytes(("\n".join(self._tokens) + "\n").encode("utf-8"))

    @classmethod
    def load(cls, path) -> "Vocab":
        text = Path(path).read_bytes().decode("utf-8")
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)

    # segmentation ---------------------------------------------------------

    def segment_word(self, word: str) -> list[int]:
        """Greedy longest-match pieces for one pre-split word."""
        ids = []
        start = 0
        n = len(word)
        while start < n:
            end = min(n, start + self._max_piece)
            found = None
            while end > start:
                piece = word[start:end]
                if start > 0:
                    piece = CONT + piece
                tid = self._index.get(piece)
                if tid is not None:
                    found = tid
                    break
                end -= 1
            if found is None:
                ids.append(UNK)
                start += 1
            else:
                ids.append(found)
                start = end
        return ids

    def tokenize(self, text: str) -> list[int]:
        out = []
        for word in normalize(text):
            out.extend(self.segment_word(word))
        return out

    def detokenize(self, ids: Iterable[int], unk: str = "[UNK]") -> str:
        words: list[str] = []
        for i in ids:
            if i in (PAD, CLS, SEP):
                continue
            tok = self._tokens[i]
            if i == UNK:
                words.append(unk)
                continue
            if tok.startswith(CONT) and words:
                words[-1] += tok[len(CONT):]
            else:
                words.append(tok)
        return " ".join(words)


def build_vocab(corpus: Iterable[str], target_size: int) -> Vocab:
    """Frequency-ranked whole words plus character fallbacks.

    At least half of the free slots go to whole words; single characters and
    their ``##`` continuation forms fill the remainder by frequency, so every
    corpus character is representable whenever the budget allows.
    """
    if target_size < 8:
        raise ConfigError(f"target_size must be >= 8, got {target_size}")
    word_counts: Counter = Counter()
    char_counts: Counter = Counter()
    for text in corpus:
        for word in normalize(text):
            word_counts[word] += 1
            char_counts[word[0]] += 1
            for ch in word[1:]:
                char_counts[CONT + ch] += 1

    def ranked(counter):
        return [t for t, _ in sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))]

    chars = ranked(char_counts)
    words = [w for w in ranked(word_counts) if len(w) > 1]
    slots = target_size - len(RESERVED)
    n_words = min(len(words), max(slots - len(chars), slots // 2))
    n_chars = min(len(chars), slots - n_words)
    # unused char budget flows back to words
    n_words = min(len(words), slots - n_chars)
    tokens = list(RESERVED) + words[:n_words] + chars[:n_chars]
    return Vocab(tokens)


@dataclass
class TokenBatch:
    """Padded id matrix and mask; ``pad_mask`` is True on real tokens."""

    ids: np.ndarray
    pad_mask: np.ndarray

    @property
    def T(self) -> int:
        return self.ids.shape[1]

    def __len__(self) -> int:
        return self.ids.shape[0]

    def lengths(self) -> np.ndarray:
        return self.pad_mask.sum(axis=1)


def frame(pieces: Sequence[int], max_len: int) -> list[int]:
    """Wrap pieces as ``[CLS] ... [SEP]``, cutting at ``max_len - 1`` first."""
    if max_len < 3:
        raise ConfigError(f"max_len must be >= 3, got {max_len}")
    seq = [CLS] + list(pieces)
    return seq[: max_len - 1] + [SEP]


def pad_sequences(seqs: Sequence[Sequence[int]]) -> TokenBatch:
    T = max(len(s) for s in seqs)
    ids = np.full((len(seqs), T), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=bool)
    for r, s in enumerate(seqs):
        ids[r, : len(s)] = s
        mask[r, : len(s)] = True
    return TokenBatch(ids, mask)


def encode_batch(texts: Sequence[str], vocab: Vocab, max_len: int = DEFAULT_MAX_LEN) -> TokenBatch:
    """Tokenize, frame and pad a batch of texts to the batch's longest row."""
    if max_len < 3:
        raise ConfigError(f"max_len must be >= 3, got {max_len}")
    if len(texts) == 0:
        raise DataError("encode_batch needs at least one text")
    return pad_sequences([frame(vocab.tokenize(t), max_len) for t in texts])
