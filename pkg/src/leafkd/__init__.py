"""Distill a small text encoder onto a frozen teacher's embedding map.

The student is trained with a plain l2 loss against precomputed teacher
vectors, so it lives in the teacher's space and can serve queries against a
teacher-built index.
"""

from .corpus import CorpusConfig, generate
from .distill import LossKind, LossSpec, composite_loss, loss_distilbert, loss_l2, loss_minilm, loss_tinybert
from .encoder import (
    EncoderConfig,
    EncoderState,
    TextEncoder,
    encode,
    encode_backward,
    init_encoder,
    student_config,
    teacher_config,
)
from .errors import (
    CacheFormatError,
    CheckpointFormatError,
    CompatibilityError,
    ConfigError,
    DataError,
    DimensionError,
    DistributionError,
    EmptyPoolError,
    EvaluationError,
    FitError,
    LeafError,
    LookupMissError,
    MappingError,
    NumericError,
    VocabError,
)
from .evalhub import (
    JudgedDataset,
    QuantScheme,
    build_index,
    evaluate,
    ndcg_at_10,
    mrl_truncate,
    quantize,
    search,
    sweep,
    throughput_bench,
)
from .kernels import BACKEND
from .numerics import Parameter, gradient_check
from .teacher import EmbeddingCache, EncoderTeacher, build_cache, cache_lookup, synthetic_teacher
from .tokenizer import TokenBatch, Vocab, build_vocab, encode_batch
from .trainer import (
    Checkpoint,
    RobustnessPoint,
    TrainConfig,
    ablation_batch_size,
    ablation_lr,
    ablation_pooling,
    adamw_step,
    fit_robustness_margin,
    lr_at,
    train,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
