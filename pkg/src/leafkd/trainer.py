"""Training loop, optimizer, schedules, checkpoints and ablation drivers."""

from __future__ import annotations

import csv
import io
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .distill import LossKind, LossSpec, composite_loss, l2_errors, layer_map, make_projection
from .encoder import EncoderConfig, EncoderState, encode, encode_backward, init_encoder
from .errors import CheckpointFormatError, CompatibilityError, ConfigError, FitError, NumericError
from .numerics import F32, Parameter, zero_grads
from .teacher import EmbeddingCache, EncoderTeacher
from .tokenizer import Vocab, frame, pad_sequences

SCHEDULES = ("constant", "linear", "cosine")
CKPT_MAGIC = b"LEFT"
CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr_start: float = 1e-4
    lr_end: float = 1e-5
    cycles: int = 3
    epochs_per_cycle: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    schedule: str = "linear"
    loss: LossSpec = field(default_factory=LossSpec)
    seed: int = 0
    checkpoint_every: int = 1

    def __post_init__(self):
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossSpec(**self.loss))
        if not 0 < self.lr_end <= self.lr_start:
            raise ConfigError(f"need 0 < lr_end <= lr_start, got {self.lr_end}, {self.lr_start}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.cycles < 1 or self.epochs_per_cycle < 1:
            raise ConfigError("cycles and epochs_per_cycle must be >= 1")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")

    @property
    def total_epochs(self) -> int:
        return self.cycles * self.epochs_per_cycle

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = {"kind": self.loss.kind.value, "aux_weight": self.loss.aux_weight}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def lr_at(config: TrainConfig, global_epoch: int, step: int = 0, steps_per_epoch: int = 1) -> float:
    """Learning rate for an epoch (and, for cosine, a step within it).

    Linear decays from ``lr_start`` at the first epoch of a cycle to
    ``lr_end`` at its last epoch, then resets. Cosine anneals per step over
    each cycle. Constant stays at ``lr_start``.
    """
    if not 0 <= global_epoch < config.total_epochs:
        raise ConfigError(f"epoch {global_epoch} outside [0, {config.total_epochs})")
    e = global_epoch % config.epochs_per_cycle
    if config.schedule == "constant":
        return config.lr_start
    if config.schedule == "linear":
        if config.epochs_per_cycle == 1:
            return config.lr_start
        return config.lr_start + (config.lr_end - config.lr_start) * (e / (config.epochs_per_cycle - 1))
    span = config.epochs_per_cycle * steps_per_epoch - 1
    t = 0.0 if span <= 0 else (e * steps_per_epoch + step) / span
    return config.lr_end + 0.5 * (config.lr_start - config.lr_end) * (1.0 + math.cos(math.pi * t))


def adamw_step(
    params: Sequence[Parameter],
    lr: float,
    step: int,
    beta1: float = 0.9,
    beta2: float = 0.999,
    weight_decay: float = 0.01,
    eps: float = 1e-8,
) -> None:
    """One AdamW update in place; ``step`` is the 1-based update count."""
    if step < 1:
        raise ConfigError("AdamW step counter starts at 1")
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            bad = int((~np.isfinite(p.grad)).sum())
            raise NumericError(f"non-finite gradient in {p.name}: {bad} of {p.grad.size} entries")
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    for p in params:
        g = p.grad.astype(np.float64)
        m = beta1 * p.m.astype(np.float64) + (1.0 - beta1) * g
        v = beta2 * p.v.astype(np.float64) + (1.0 - beta2) * g * g
        w = p.value.astype(np.float64)
        w = w * (1.0 - lr * weight_decay)
        w = w - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.m[...] = m
        p.v[...] = v
        p.value[...] = w


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    epoch: int
    cycle: int
    step: int
    state: EncoderState
    rng_state: dict
    val_loss: float
    config: TrainConfig
    proj: Optional[Parameter] = None

    def to_bytes(self) -> bytes:
        rng = json.dumps(self.rng_state, sort_keys=True).encode("utf-8")
        cfg = json.dumps(self.config.to_dict(), sort_keys=True).encode("utf-8")
        parts = [
            CKPT_MAGIC,
            struct.pack("<IIIQd", CKPT_VERSION, self.epoch, self.cycle, self.step, self.val_loss),
            struct.pack("<I", len(cfg)),
            cfg,
            struct.pack("<I", len(rng)),
            rng,
            self.state.to_bytes(),
        ]
        for p in self.state.parameters():
            parts.append(p.m.astype("<f4").tobytes())
            parts.append(p.v.astype("<f4").tobytes())
        if self.proj is None:
            parts.append(struct.pack("<B", 0))
        else:
            rows, cols = self.proj.value.shape
            parts.append(struct.pack("<BII", 1, rows, cols))
            for arr in (self.proj.value, self.proj.m, self.proj.v):
                parts.append(arr.astype("<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:4] != CKPT_MAGIC:
            raise CheckpointFormatError("bad training checkpoint magic")
        head = struct.Struct("<IIIQd")
        version, epoch, cycle, step, val_loss = head.unpack_from(buf, 4)
        if version != CKPT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        pos = 4 + head.size
        (n,) = struct.unpack_from("<I", buf, pos)
        config = TrainConfig.from_dict(json.loads(buf[pos + 4 : pos + 4 + n]))
        pos += 4 + n
        (n,) = struct.unpack_from("<I", buf, pos)
        rng_state = json.loads(buf[pos + 4 : pos + 4 + n])
        pos += 4 + n
        state, pos = EncoderState.from_bytes(buf, pos)

        def take(shape):
            nonlocal pos
            size = int(np.prod(shape))
            if pos + 4 * size > len(buf):
                raise CheckpointFormatError("truncated training checkpoint")
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape).astype(F32)
            pos += 4 * size
            return arr

        for p in state.parameters():
            p.m[...] = take(p.shape)
            p.v[...] = take(p.shape)
        (has_proj,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        proj = None
        if has_proj:
            rows, cols = struct.unpack_from("<II", buf, pos)
            pos += 8
            proj = Parameter("w_map", take((rows, cols)))
            proj.m[...] = take((rows, cols))
            proj.v[...] = take((rows, cols))
        if pos != len(buf):
            raise CheckpointFormatError("trailing bytes after training checkpoint")
        return cls(epoch, cycle, step, state, rng_state, val_loss, config, proj)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def _snapshot(params: Sequence[Parameter]) -> list[Parameter]:
    out = []
    for p in params:
        q = Parameter(p.name, p.value.copy())
        q.m[...] = p.m
        q.v[...] = p.v
        out.append(q)
    return out


def _snapshot_state(state: EncoderState) -> EncoderState:
    return EncoderState(state.config, {p.name: p for p in _snapshot(state.parameters())})


# ---------------------------------------------------------------------------
# training


@dataclass
class HistoryRow:
    epoch: int
    step: int
    lr: float
    train_loss: float
    val_loss: Optional[float] = None


@dataclass
class TrainResult:
    state: EncoderState
    checkpoints: list
    history: list
    initial_val_loss: Optional[float]
    proj: Optional[Parameter] = None
    wall_time: float = 0.0
    train_time: float = 0.0

    @property
    def final_val_loss(self) -> float:
        return self.checkpoints[-1].val_loss if self.checkpoints else float("nan")


def history_csv(history: Sequence[HistoryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "step", "lr", "train_loss", "val_loss"])
    for r in history:
        w.writerow([r.epoch, r.step, repr(r.lr), repr(r.train_loss), "" if r.val_loss is None else repr(r.val_loss)])
    return buf.getvalue()


def tokenize_cache(cache: EmbeddingCache, vocab: Vocab, max_len: int) -> list[list[int]]:
    """Student token ids for every cache record, instruction prefix included."""
    return [frame(vocab.tokenize(cache.instruction + r.text), max_len) for r in cache.records]


def validation_error(
    state: EncoderState,
    seqs: Sequence[Sequence[int]],
    targets: np.ndarray,
    rows: np.ndarray,
    batch_size: int = 64,
) -> float:
    """Mean per-example l2 error over ``rows`` without updating anything."""
    if len(rows) == 0:
        return float("nan")
    errs = []
    for s in range(0, len(rows), batch_size):
        idx = rows[s : s + batch_size]
        y = encode(state, pad_sequences([seqs[i] for i in idx]))
        errs.append(l2_errors(y, targets[idx]))
    return float(np.concatenate(errs).mean())


def _check_compat(student: EncoderState, cache: EmbeddingCache, config: TrainConfig, teacher, vocab: Vocab, proj):
    scfg = student.config
    if cache.dim != scfg.output_dim:
        raise ConfigError(f"cache dim {cache.dim} != student output_dim {scfg.output_dim}")
    if len(vocab) != scfg.vocab_size:
        raise ConfigError(f"vocab size {len(vocab)} != student vocab_size {scfg.vocab_size}")
    if not config.loss.needs_traces:
        return
    if not isinstance(teacher, EncoderTeacher):
        raise CompatibilityError(
            f"{config.loss.kind.value} needs a trace-capable teacher; a cache alone supports leaf_l2 only"
        )
    tcfg = teacher.state.config
    if teacher.vocab != vocab:
        raise CompatibilityError("auxiliary losses require student and teacher to share a tokenizer")
    kind = config.loss.kind
    if kind in (LossKind.LEAF_PLUS_MINILM, LossKind.LEAF_PLUS_TINYBERT) and tcfg.num_heads != scfg.num_heads:
        raise CompatibilityError(f"attention head counts differ: teacher {tcfg.num_heads}, student {scfg.num_heads}")
    if kind is LossKind.LEAF_PLUS_TINYBERT:
        layer_map(tcfg.num_layers, scfg.num_layers)
    if proj is not None and proj.value.shape != (tcfg.hidden_dim, scfg.hidden_dim):
        raise ConfigError(f"projection shape {proj.value.shape} != {(tcfg.hidden_dim, scfg.hidden_dim)}")


def train(
    student: EncoderState,
    cache: EmbeddingCache,
    config: TrainConfig,
    vocab: Vocab,
    teacher: Optional[EncoderTeacher] = None,
    proj: Optional[Parameter] = None,
    resume: Optional[Checkpoint] = None,
    epochs: Optional[int] = None,
    train_rows: Optional[np.ndarray] = None,
    checkpoint_dir=None,
    on_epoch: Optional[Callable[[Checkpoint], None]] = None,
) -> TrainResult:
    """Distill ``student`` towards the cached teacher vectors.

    ``student`` is updated in place. ``epochs`` stops after that many global
    epochs (default: all cycles). ``resume`` restores weights, moments, step
    count and shuffle RNG from a checkpoint and continues at the next epoch.
    ``train_rows`` restricts training to a subset of the cache's train split.
    """
    if resume is not None:
        student = resume.state.copy() if student is None else student
        _restore(student, resume.state)
        if resume.proj is not None:
            proj = proj or Parameter("w_map", resume.proj.value)
            _restore_params([proj], [resume.proj])
    if config.loss.needs_projection and proj is None and teacher is not None:
        proj = make_projection(teacher.state.config.hidden_dim, student.config.hidden_dim, seed=config.seed)
    _check_compat(student, cache, config, teacher, vocab, proj)

    end = config.total_epochs if epochs is None else epochs
    if not 0 < end <= config.total_epochs:
        raise ConfigError(f"epochs must be in [1, {config.total_epochs}]")
    max_len = student.config.max_context
    seqs = tokenize_cache(cache, vocab, max_len)
    targets = cache.vectors
    rows = cache.rows("train") if train_rows is None else np.asarray(train_rows, dtype=np.int64)
    val_rows = cache.rows("val")
    if len(rows) == 0:
        raise ConfigError("no training rows")

    rng = np.random.default_rng(config.seed)
    start, step = 0, 0
    initial = None
    if resume is not None:
        rng.bit_generator.state = resume.rng_state
        start, step = resume.epoch + 1, resume.step
    else:
        initial = validation_error(student, seqs, targets, val_rows, config.batch_size)

    params = student.parameters() + ([proj] if proj is not None else [])
    aux = config.loss.needs_traces
    steps_per_epoch = math.ceil(len(rows) / config.batch_size)
    history: list[HistoryRow] = []
    checkpoints: list[Checkpoint] = []
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()

    train_time = 0.0
    for epoch in range(start, end):
        t_epoch = time.perf_counter()
        perm = rng.permutation(rows)
        for b in range(steps_per_epoch):
            idx = perm[b * config.batch_size : (b + 1) * config.batch_size]
            batch = pad_sequences([seqs[i] for i in idx])
            y, trace = encode(student, batch, want_trace=True)
            t_trace = encode(teacher.state, batch, want_trace=True)[1] if aux else None
            res = composite_loss(config.loss, y, targets[idx], trace, t_trace, proj)
            if not math.isfinite(res.loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")
            zero_grads(params)
            encode_backward(student, trace, res.d_output, res.trace_grads)
            if res.d_proj is not None:
                proj.grad += res.d_proj
            lr = lr_at(config, epoch, b, steps_per_epoch)
            step += 1
            adamw_step(params, lr, step, config.beta1, config.beta2, config.weight_decay, config.adam_eps)
            history.append(HistoryRow(epoch, step, lr, res.loss))
        train_time += time.perf_counter() - t_epoch

        val = validation_error(student, seqs, targets, val_rows, config.batch_size)
        history[-1].val_loss = val
        if (epoch + 1) % config.checkpoint_every == 0 or epoch + 1 == end:
            ck = Checkpoint(
                epoch,
                epoch // config.epochs_per_cycle,
                step,
                _snapshot_state(student),
                rng.bit_generator.state,
                val,
                config,
                _snapshot([proj])[0] if proj is not None else None,
            )
            checkpoints.append(ck)
            if checkpoint_dir is not None:
                ck.save(Path(checkpoint_dir) / f"epoch_{epoch:03d}.left")
            if on_epoch is not None:
                on_epoch(ck)

    return TrainResult(student, checkpoints, history, initial, proj, time.perf_counter() - t0, train_time)


def _restore_params(dst: Sequence[Parameter], src: Sequence[Parameter]) -> None:
    for d, s in zip(dst, src):
        d.value[...] = s.value
        d.m[...] = s.m
        d.v[...] = s.v


def _restore(dst: EncoderState, src: EncoderState) -> None:
    if dst.config != src.config:
        raise ConfigError("checkpoint encoder config does not match the student")
    _restore_params(dst.parameters(), src.parameters())


# ---------------------------------------------------------------------------
# robustness margin


@dataclass(frozen=True)
class RobustnessPoint:
    mean_val_error: float
    downstream_score: float
    cycle_first_epoch: bool = False
    epoch: int = -1


@dataclass(frozen=True)
class RobustnessFit:
    slope: float
    intercept: float
    margin: float
    n_points: int


def fit_robustness_margin(
    points: Sequence[RobustnessPoint], teacher_score: float, exclude_cycle_first: bool = True
) -> RobustnessFit:
    """Least-squares line ``score = slope * err + intercept`` and its teacher crossing.

    The margin is the error level where the line reaches ``teacher_score``.
    """
    pts = [p for p in points if not (exclude_cycle_first and p.cycle_first_epoch)]
    if len(pts) < 2:
        raise FitError(f"need at least 2 points after exclusion, got {len(pts)}")
    x = np.array([p.mean_val_error for p in pts], dtype=np.float64)
    y = np.array([p.downstream_score for p in pts], dtype=np.float64)
    xc = x - x.mean()
    sxx = float((xc * xc).sum())
    if sxx <= 1e-300 * max(1.0, float((x * x).sum())) or np.unique(x).size < 2:
        raise FitError("all points share one error value; the fit is vertical")
    slope = float((xc * (y - y.mean())).sum() / sxx)
    intercept = float(y.mean() - slope * x.mean())
    if slope == 0.0:
        raise FitError("scores are constant; the trend never crosses the teacher score")
    return RobustnessFit(slope, intercept, (teacher_score - intercept) / slope, len(pts))


# ---------------------------------------------------------------------------
# ablations


@dataclass(frozen=True)
class BatchSizeRow:
    batch_size: int
    wall_time_s: float
    final_val_loss: float
    batch_count: int


def _budget_rows(cache: EmbeddingCache, budget: int, seed: int) -> np.ndarray:
    rows = cache.rows("train")
    if budget > len(rows):
        raise ConfigError(f"data budget {budget} exceeds {len(rows)} training rows")
    return np.sort(np.random.default_rng(seed).choice(rows, size=budget, replace=False))


def ablation_batch_size(
    cache: EmbeddingCache,
    student_config: EncoderConfig,
    vocab: Vocab,
    sizes: Sequence[int],
    fixed_data_budget: int,
    base: Optional[TrainConfig] = None,
) -> list[BatchSizeRow]:
    """One epoch per batch size over the same ``fixed_data_budget`` items.

    Wall time covers training steps only; validation is excluded.
    """
    base = base or TrainConfig()
    for s in sizes:
        if fixed_data_budget % s:
            raise ConfigError(f"budget {fixed_data_budget} is not divisible by batch size {s}")
    rows = _budget_rows(cache, fixed_data_budget, base.seed)
    out = []
    for s in sizes:
        cfg = replace(base, batch_size=s, cycles=1, epochs_per_cycle=1)
        res = train(init_encoder(student_config), cache, cfg, vocab, epochs=1, train_rows=rows)
        out.append(BatchSizeRow(s, res.train_time, res.final_val_loss, fixed_data_budget // s))
    return out


def ablation_pooling(
    cache: EmbeddingCache,
    student_config: EncoderConfig,
    vocab: Vocab,
    base: Optional[TrainConfig] = None,
    epochs: int = 1,
) -> dict:
    """Two runs that differ only in pooling; returns both final val losses."""
    base = base or TrainConfig()
    out = {}
    for pooling in ("mean", "cls"):
        cfg = replace(student_config, pooling=pooling)
        res = train(init_encoder(cfg), cache, base, vocab, epochs=epochs)
        out[f"{pooling}_final_val"] = res.final_val_loss
    return out


@dataclass(frozen=True)
class ScheduleRow:
    schedule: str
    budget: int
    batches_per_epoch: int
    final_val_loss: float


def ablation_lr(
    cache: EmbeddingCache,
    student_config: EncoderConfig,
    vocab: Vocab,
    budgets: Sequence[int],
    schedules: Sequence[str] = SCHEDULES,
    base: Optional[TrainConfig] = None,
    epochs: int = 10,
) -> list[ScheduleRow]:
    """Final val loss after ``epochs`` epochs per (schedule, data budget)."""
    base = base or TrainConfig()
    out = []
    for budget in budgets:
        rows = _budget_rows(cache, budget, base.seed)
        for sched in schedules:
            cfg = replace(base, schedule=sched, cycles=1, epochs_per_cycle=epochs)
            res = train(init_encoder(student_config), cache, cfg, vocab, train_rows=rows)
            out.append(ScheduleRow(sched, budget, math.ceil(budget / cfg.batch_size), res.final_val_loss))
    return out
