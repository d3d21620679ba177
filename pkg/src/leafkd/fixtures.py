"""The pinned synthetic fixture shared by the acceptance suite and the CLI.

Seed 42, 512 synthetic training texts, a random 4-layer teacher of width 64
and a 2-layer student of width 32, distilled with the plain l2 loss at a
constant learning rate of 1e-3.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .corpus import CorpusConfig, generate
from .encoder import EncoderConfig, student_config, teacher_config
from .evalhub import JudgedDataset
from .teacher import EmbeddingCache, EncoderTeacher, build_cache, synthetic_teacher
from .tokenizer import Vocab, build_vocab
from .trainer import TrainConfig

SEED = 42
TRAIN_TEXTS = 512
VOCAB_SIZE = 256
VAL_HOLDOUT = 64
EPOCHS = 20
LR = 1e-3


@dataclass
class Fixture:
    dataset: JudgedDataset
    train_texts: list
    vocab: Vocab
    teacher: EncoderTeacher
    cache: EmbeddingCache
    student_config: EncoderConfig
    train_config: TrainConfig


def pinned_train_config(**overrides) -> TrainConfig:
    cfg = TrainConfig(lr_start=LR, lr_end=LR, cycles=1, epochs_per_cycle=EPOCHS, schedule="constant", seed=SEED)
    return replace(cfg, **overrides)


def pinned_fixture(seed: int = SEED) -> Fixture:
    """Build the fixture from scratch; every piece is a pure function of ``seed``."""
    dataset, train_texts = generate(CorpusConfig(train_count=TRAIN_TEXTS, seed=seed))
    vocab = build_vocab(train_texts + dataset.doc_texts + dataset.query_texts, VOCAB_SIZE)
    teacher = synthetic_teacher(teacher_config(len(vocab)), vocab)
    cache = build_cache(teacher, train_texts, val_holdout=VAL_HOLDOUT, seed=seed)
    return Fixture(
        dataset,
        train_texts,
        vocab,
        teacher,
        cache,
        student_config(len(vocab), seed=seed),
        pinned_train_config(seed=seed),
    )
