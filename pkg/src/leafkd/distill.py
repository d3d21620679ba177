"""Distillation losses and their gradients.

The core loss is the batch mean of ``||y_i - yhat_i||_2`` between student
and (constant) teacher embeddings. Three auxiliary objectives read the
internal traces of both models and can be added on top:

* MiniLM: KL between last-layer value-relation matrices plus KL between
  last-layer attention distributions (teacher is ``p``, student is ``q``).
* TinyBERT: MSE between projected student hidden states and teacher hidden
  states at mapped layers, plus MSE between pre-softmax attention logits.
* DistilBERT: negative cosine between the last teacher hidden state and
  the projected last student hidden state.

All token averages skip PAD positions and every loss is averaged over the
batch. Auxiliary terms only touch the trace, never ``w_out``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nx
from .encoder import ForwardTrace, TraceGrads, key_bias
from .errors import CompatibilityError, ConfigError, DimensionError, MappingError
from .numerics import F32, L2_EPS, Parameter


class LossKind(str, enum.Enum):
    LEAF_L2 = "leaf_l2"
    LEAF_PLUS_MINILM = "leaf+minilm"
    LEAF_PLUS_TINYBERT = "leaf+tinybert"
    LEAF_PLUS_DISTILBERT = "leaf+distilbert"


@dataclass(frozen=True)
class LossSpec:
    kind: LossKind = LossKind.LEAF_L2
    aux_weight: float = 1.0

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", LossKind(self.kind))
        except ValueError:
            raise ConfigError(f"unknown loss kind {self.kind!r}") from None

    @property
    def needs_traces(self) -> bool:
        return self.kind is not LossKind.LEAF_L2

    @property
    def needs_projection(self) -> bool:
        return self.kind in (LossKind.LEAF_PLUS_TINYBERT, LossKind.LEAF_PLUS_DISTILBERT)


@dataclass
class LossResult:
    loss: float
    d_output: Optional[np.ndarray] = None
    trace_grads: TraceGrads = field(default_factory=TraceGrads)
    d_proj: Optional[np.ndarray] = None
    parts: dict = field(default_factory=dict)


def make_projection(teacher_hidden: int, student_hidden: int, seed: int = 0) -> Parameter:
    """Trainable (teacher_hidden x student_hidden) map, applied as ``W @ h``.

    Identity when the two widths agree, scaled uniform otherwise.
    """
    if teacher_hidden == student_hidden:
        val = np.eye(teacher_hidden)
    else:
        bound = 1.0 / math.sqrt(student_hidden)
        val = np.random.default_rng(seed).uniform(-bound, bound, size=(teacher_hidden, student_hidden))
    return Parameter("w_map", val)


# ---------------------------------------------------------------------------
# l2


def l2_errors(y: np.ndarray, y_hat: np.ndarray) -> np.ndarray:
    """Per-example Euclidean error ``||y_i - yhat_i||``, float64."""
    if y.shape != y_hat.shape:
        raise DimensionError(f"student {y.shape} vs teacher {y_hat.shape}")
    e = y.astype(np.float64) - y_hat.astype(np.float64)
    return np.sqrt((e * e).sum(axis=1))


def loss_l2(y: np.ndarray, y_hat: np.ndarray) -> LossResult:
    """Mean per-example l2 error and its gradient with respect to ``y``.

    The gradient at zero error is defined as zero.
    """
    if y.shape != y_hat.shape:
        raise DimensionError(f"student {y.shape} vs teacher {y_hat.shape}")
    e = y.astype(np.float64) - y_hat.astype(np.float64)
    sq = (e * e).sum(axis=1, keepdims=True)
    B = y.shape[0]
    loss = float(np.sqrt(sq).mean())
    grad = e / np.sqrt(sq + L2_EPS) / B
    return LossResult(loss, grad.astype(F32), parts={"l2": loss})


# ---------------------------------------------------------------------------
# helpers


def _check_pair(student: ForwardTrace, teacher: ForwardTrace, need_heads: bool) -> None:
    if student.batch.ids.shape != teacher.batch.ids.shape or not np.array_equal(student.mask, teacher.mask):
        raise DimensionError("student and teacher traces cover different token batches")
    if not student.layers or not teacher.layers:
        raise CompatibilityError("auxiliary losses need full forward traces")
    if need_heads:
        a_s = student.layers[0].q.shape[1]
        a_t = teacher.layers[0].q.shape[1]
        if a_s != a_t:
            raise CompatibilityError(f"attention head counts differ: teacher {a_t}, student {a_s}")


def _row_weights(mask: np.ndarray, denom_extra: float) -> np.ndarray:
    """Per-token weights ``1 / (n_b * extra * B)`` on real tokens, 0 on PAD."""
    B = mask.shape[0]
    n = mask.sum(axis=1, keepdims=True).astype(np.float64)
    return np.where(mask, 1.0 / (n * denom_extra * B), 0.0)


def _kl_term(p: np.ndarray, q: np.ndarray, weights: np.ndarray):
    """Weighted sum of row KLs ``KL(p_row || q_row)`` and its gradient on ``q``.

    ``p``/``q`` are (B, A, T, T); ``weights`` is (B, T) and applies per
    query row, broadcast over heads.
    """
    kl = nx.kl_div_rows(p, q)  # (B, A, T)
    w = weights[:, None, :]
    total = float((kl * w).sum())
    dq = nx.kl_div_rows_grad_q(p, q).astype(np.float64) * w[..., None]
    return total, dq.astype(F32)


def value_relation(v: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``softmax(V V^T / sqrt(C))`` per head with PAD columns masked."""
    C = v.shape[-1]
    s = nx.matmul(v, np.swapaxes(v, -1, -2)) * F32(1.0 / math.sqrt(C))
    return nx.softmax_rows(s + key_bias(mask))


def layer_map(teacher_layers: int, student_layers: int) -> list[int]:
    """Teacher layer for each student layer 0..L': ``g(l) = floor(L / L') * l``."""
    step = teacher_layers // student_layers
    if step * student_layers != teacher_layers:
        raise MappingError(
            f"floor({teacher_layers}/{student_layers}) * {student_layers} != {teacher_layers}: "
            "the last student layer would not map to the last teacher layer"
        )
    return [step * l for l in range(student_layers + 1)]


def _project(h: np.ndarray, proj: Parameter) -> np.ndarray:
    return nx.matmul(h, proj.value.T)


def _check_projection(student: ForwardTrace, teacher: ForwardTrace, proj: Parameter) -> None:
    want = (teacher.hidden[0].shape[-1], student.hidden[0].shape[-1])
    if proj.value.shape != want:
        raise DimensionError(f"projection shape {proj.value.shape}, expected {want}")


# ---------------------------------------------------------------------------
# auxiliary losses


def loss_minilm(student: ForwardTrace, teacher: ForwardTrace) -> LossResult:
    """Value-relation KL plus attention KL on the last layers."""
    _check_pair(student, teacher, need_heads=True)
    mask = student.mask
    ls = len(student.layers) - 1
    s_last, t_last = student.layers[-1], teacher.layers[-1]
    A = s_last.q.shape[1]
    w = _row_weights(mask, A)

    vr_t = value_relation(t_last.v, mask)
    vr_s = value_relation(s_last.v, mask)
    l_vr, d_vr = _kl_term(vr_t, vr_s, w)
    dS = nx.softmax_rows_backward(vr_s, d_vr).astype(np.float64)
    C = s_last.v.shape[-1]
    dv = np.matmul(dS + np.swapaxes(dS, -1, -2), s_last.v.astype(np.float64)) / math.sqrt(C)

    l_att, d_probs = _kl_term(t_last.probs, s_last.probs, w)

    tg = TraceGrads()
    tg.add("v", ls, dv.astype(F32))
    tg.add("probs", ls, d_probs)
    return LossResult(l_vr + l_att, trace_grads=tg, parts={"vr": l_vr, "att": l_att})


def loss_tinybert(student: ForwardTrace, teacher: ForwardTrace, proj: Parameter) -> LossResult:
    """Hidden-state MSE at mapped layers plus pre-softmax attention MSE."""
    _check_pair(student, teacher, need_heads=True)
    _check_projection(student, teacher, proj)
    mask = student.mask
    Ls, Lt = len(student.layers), len(teacher.layers)
    g = layer_map(Lt, Ls)
    W = proj.value.astype(np.float64)
    d_t = teacher.hidden[0].shape[-1]
    tg = TraceGrads()
    d_proj = np.zeros_like(W)

    w_tok = _row_weights(mask, Ls)  # (B, T)
    l_hid = 0.0
    for l in range(1, Ls + 1):
        hs = student.hidden[l].astype(np.float64)
        diff = teacher.hidden[g[l]].astype(np.float64) - hs @ W.T
        per_tok = (diff * diff).mean(axis=-1)
        l_hid += float((per_tok * w_tok).sum())
        d_diff = 2.0 * diff / d_t * w_tok[..., None]
        tg.add("hidden", l, (-(d_diff @ W)).astype(F32))
        d_proj -= d_diff.reshape(-1, d_t).T @ hs.reshape(-1, hs.shape[-1])

    A = student.layers[0].q.shape[1]
    B = mask.shape[0]
    pair = (mask[:, :, None] & mask[:, None, :]).astype(np.float64)  # (B, T, T)
    n = mask.sum(axis=1).astype(np.float64)
    w_pair = pair / (n * n * A * Ls * B)[:, None, None]
    l_att = 0.0
    for l in range(1, Ls + 1):
        s_log = student.layers[l - 1].logits.astype(np.float64)
        t_log = teacher.layers[g[l] - 1].logits.astype(np.float64)
        delta = t_log - s_log
        l_att += float((delta * delta * w_pair[:, None]).sum())
        tg.add("logits", l - 1, (-2.0 * delta * w_pair[:, None]).astype(F32))

    return LossResult(l_hid + l_att, trace_grads=tg, d_proj=d_proj.astype(F32), parts={"hidden": l_hid, "att": l_att})


def loss_distilbert(student: ForwardTrace, teacher: ForwardTrace, proj: Parameter) -> LossResult:
    """Negative cosine between last hidden states, averaged over real tokens."""
    _check_pair(student, teacher, need_heads=False)
    _check_projection(student, teacher, proj)
    mask = student.mask
    hs = student.hidden[-1]
    ht = teacher.hidden[-1]
    ph = _project(hs, proj)
    cos = nx.cosine_sim_rows(ht, ph)  # (B, T)
    w = _row_weights(mask, 1.0)
    loss = float(-(cos * w).sum())
    _, d_ph = nx.cosine_sim_rows_backward(-w, ht, ph)
    d_ph = d_ph.astype(np.float64)
    W = proj.value.astype(np.float64)
    tg = TraceGrads()
    tg.add("hidden", len(student.layers), (d_ph @ W).astype(F32))
    d_proj = d_ph.reshape(-1, d_ph.shape[-1]).T @ hs.astype(np.float64).reshape(-1, hs.shape[-1])
    return LossResult(loss, trace_grads=tg, d_proj=d_proj.astype(F32), parts={"cos": loss})


def composite_loss(
    spec: LossSpec,
    y: np.ndarray,
    y_hat: np.ndarray,
    student_trace: Optional[ForwardTrace] = None,
    teacher_trace: Optional[ForwardTrace] = None,
    proj: Optional[Parameter] = None,
) -> LossResult:
    """``loss_l2 + aux_weight * aux`` with gradients for the student and projection."""
    base = loss_l2(y, y_hat)
    if spec.kind is LossKind.LEAF_L2:
        return base
    if student_trace is None or teacher_trace is None:
        raise CompatibilityError(f"{spec.kind.value} needs student and teacher traces")
    if spec.needs_projection and proj is None:
        raise CompatibilityError(f"{spec.kind.value} needs a projection to the teacher width")
    if spec.kind is LossKind.LEAF_PLUS_MINILM:
        aux = loss_minilm(student_trace, teacher_trace)
    elif spec.kind is LossKind.LEAF_PLUS_TINYBERT:
        aux = loss_tinybert(student_trace, teacher_trace, proj)
    else:
        aux = loss_distilbert(student_trace, teacher_trace, proj)

    w = float(spec.aux_weight)
    tg = TraceGrads()
    for kind in ("hidden", "q", "k", "v", "logits", "probs"):
        for layer, grad in getattr(aux.trace_grads, kind).items():
            tg.add(kind, layer, (grad * F32(w)).astype(F32))
    d_proj = None if aux.d_proj is None else (aux.d_proj * F32(w)).astype(F32)
    parts = {"l2": base.loss, **{f"aux_{k}": v for k, v in aux.parts.items()}}
    return LossResult(base.loss + w * aux.loss, base.d_output, tg, d_proj, parts)
