"""Pre-norm transformer text encoder with a hand-written backward pass.

The embedding of a tokenized text is::

    y = Norm(Linear(Pool(Transformer(x))))

where Pool averages final-layer token states over non-PAD positions (or
takes position 0 for CLS pooling), Linear maps hidden_dim -> output_dim,
and Norm scales to unit length when ``normalize_output`` is set.

Activations are batched as ``(batch, tokens, hidden)``; per-head tensors as
``(batch, heads, tokens, head_dim)``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .errors import CheckpointFormatError, ConfigError, VocabError
from .numerics import F32, Parameter
from .tokenizer import TokenBatch, Vocab, frame, pad_sequences

MASK_NEG = -1e9
CKPT_MAGIC = b"LEFC"
CKPT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int
    num_heads: int
    hidden_dim: int
    vocab_size: int
    output_dim: int
    ffn_multiplier: int = 4
    max_context: int = 64
    pooling: str = "mean"
    normalize_output: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.num_layers < 1 or self.num_heads < 1 or self.hidden_dim < 1:
            raise ConfigError("num_layers, num_heads and hidden_dim must be positive")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}"
            )
        if self.output_dim < 1:
            raise ConfigError("output_dim must be >= 1")
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must cover the reserved tokens")
        if self.max_context < 3:
            raise ConfigError("max_context must be >= 3")
        if self.pooling not in ("mean", "cls"):
            raise ConfigError(f"pooling must be 'mean' or 'cls', got {self.pooling!r}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def ffn_dim(self) -> int:
        return self.hidden_dim * self.ffn_multiplier

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def teacher_config(vocab_size: int, **overrides) -> EncoderConfig:
    """Desk-scale teacher: 4 layers, 4 heads, hidden 64."""
    base = dict(num_layers=4, num_heads=4, hidden_dim=64, vocab_size=vocab_size, output_dim=64, seed=1)
    base.update(overrides)
    return EncoderConfig(**base)


def student_config(vocab_size: int, output_dim: int = 64, **overrides) -> EncoderConfig:
    """Desk-scale student: 2 layers, 4 heads, hidden 32, projected to ``output_dim``."""
    base = dict(num_layers=2, num_heads=4, hidden_dim=32, vocab_size=vocab_size, output_dim=output_dim, seed=2)
    base.update(overrides)
    return EncoderConfig(**base)


def param_shapes(cfg: EncoderConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Parameter names, shapes and init kind in fixed declaration order."""
    d, f = cfg.hidden_dim, cfg.ffn_dim
    out = [
        ("tok_emb", (cfg.vocab_size, d), "embed"),
        ("pos_emb", (cfg.max_context, d), "position"),
    ]
    for l in range(cfg.num_layers):
        p = f"layers.{l}."
        out += [
            (p + "ln1_g", (d,), "one"),
            (p + "ln1_b", (d,), "zero"),
            (p + "wq", (d, d), "weight"),
            (p + "bq", (d,), "zero"),
            (p + "wk", (d, d), "weight"),
            (p + "bk", (d,), "zero"),
            (p + "wv", (d, d), "weight"),
            (p + "bv", (d,), "zero"),
            (p + "wo", (d, d), "residual"),
            (p + "bo", (d,), "zero"),
            (p + "ln2_g", (d,), "one"),
            (p + "ln2_b", (d,), "zero"),
            (p + "w1", (d, f), "weight"),
            (p + "b1", (f,), "zero"),
            (p + "w2", (f, d), "residual"),
            (p + "b2", (d,), "zero"),
        ]
    out += [
        ("lnf_g", (d,), "one"),
        ("lnf_b", (d,), "zero"),
        ("w_out", (d, cfg.output_dim), "weight"),
        ("b_out", (cfg.output_dim,), "zero"),
    ]
    return out


class EncoderState:
    """All weights of one encoder, keyed by name in declaration order."""

    def __init__(self, config: EncoderConfig, params: dict[str, Parameter]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name].value

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def copy(self) -> "EncoderState":
        return EncoderState(
            self.config, {n: Parameter(n, p.value.copy()) for n, p in self.params.items()}
        )

    def zero_grad(self) -> None:
        nx.zero_grads(self.parameters())

    def weights_equal(self, other: "EncoderState") -> bool:
        return self.config == other.config and all(
            np.array_equal(p.value, other.params[n].value) for n, p in self.params.items()
        )

    # persistence -------------------------------------------------------------

    def to_bytes(self) -> bytes:
        cfg = json.dumps(self.config.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(cfg)), cfg]
        for p in self.params.values():
            parts.append(p.value.astype("<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple["EncoderState", int]:
        """Parse one encoder blob starting at ``offset``; returns (state, end)."""
        if buf[offset : offset + 4] != CKPT_MAGIC:
            raise CheckpointFormatError("bad encoder checkpoint magic")
        version, n = struct.unpack_from("<II", buf, offset + 4)
        if version != CKPT_VERSION:
            raise CheckpointFormatError(f"unsupported encoder checkpoint version {version}")
        pos = offset + 12
        try:
            cfg = EncoderConfig.from_dict(json.loads(buf[pos : pos + n].decode("utf-8")))
        except (ValueError, TypeError) as exc:
            raise CheckpointFormatError(f"bad encoder config: {exc}") from exc
        pos += n
        params = {}
        for name, shape, _ in param_shapes(cfg):
            size = int(np.prod(shape))
            if pos + 4 * size > len(buf):
                raise CheckpointFormatError("truncated encoder checkpoint")
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape)
            params[name] = Parameter(name, arr.astype(F32))
            pos += 4 * size
        return cls(cfg, params), pos

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "EncoderState":
        buf = Path(path).read_bytes()
        state, end = cls.from_bytes(buf)
        if end != len(buf):
            raise CheckpointFormatError("trailing bytes after encoder checkpoint")
        return state


POSITION_SCALE = 0.1


def init_encoder(config: EncoderConfig) -> EncoderState:
    """Scaled-uniform init, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` per weight.

    Embedding tables are lookups of one-hot rows, so their fan-in is 1.
    Projections that write into the residual stream (``wo``, ``w2``) are
    further shrunk by ``1/sqrt(2L)`` and position embeddings by
    ``POSITION_SCALE``, so a freshly drawn encoder keeps most of its
    token identity signal through the stack.
    """
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape, kind in param_shapes(config):
        if kind in ("weight", "residual"):
            bound = 1.0 / math.sqrt(shape[0])
            if kind == "residual":
                bound /= math.sqrt(2 * config.num_layers)
            val = rng.uniform(-bound, bound, size=shape)
        elif kind == "embed":
            val = rng.uniform(-1.0, 1.0, size=shape)
        elif kind == "position":
            val = rng.uniform(-POSITION_SCALE, POSITION_SCALE, size=shape)
        elif kind == "one":
            val = np.ones(shape)
        else:
            val = np.zeros(shape)
        params[name] = Parameter(name, val)
    return EncoderState(config, params)


# ---------------------------------------------------------------------------
# forward


@dataclass
class LayerTrace:
    q: np.ndarray  # (B, A, T, C)
    k: np.ndarray
    v: np.ndarray
    logits: np.ndarray  # (B, A, T, T) scaled, before masking and softmax
    probs: np.ndarray  # (B, A, T, T)
    # internals for the backward pass
    a: np.ndarray = field(repr=False, default=None)
    ln1: object = field(repr=False, default=None)
    o: np.ndarray = field(repr=False, default=None)
    f: np.ndarray = field(repr=False, default=None)
    ln2: object = field(repr=False, default=None)
    u: np.ndarray = field(repr=False, default=None)
    g: np.ndarray = field(repr=False, default=None)


@dataclass
class ForwardTrace:
    """Per-layer internals of one forward pass.

    ``hidden[l]`` is the residual stream after layer ``l``; ``hidden[0]`` is
    token plus position embeddings.
    """

    batch: TokenBatch
    hidden: list
    layers: list
    z: np.ndarray = field(repr=False, default=None)
    lnf: object = field(repr=False, default=None)
    pooled: np.ndarray = field(repr=False, default=None)
    proj: np.ndarray = field(repr=False, default=None)
    norms: np.ndarray = field(repr=False, default=None)
    output: np.ndarray = field(repr=False, default=None)

    @property
    def mask(self) -> np.ndarray:
        return self.batch.pad_mask


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    B, T, d = x.shape
    return np.ascontiguousarray(x.reshape(B, T, heads, d // heads).transpose(0, 2, 1, 3))


def _merge_heads(x: np.ndarray) -> np.ndarray:
    B, A, T, C = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3).reshape(B, T, A * C))


def key_bias(mask: np.ndarray) -> np.ndarray:
    """Additive attention bias, ``MASK_NEG`` on PAD keys, shaped (B, 1, 1, T)."""
    return np.where(mask, 0.0, MASK_NEG).astype(F32)[:, None, None, :]


def encode(state: EncoderState, batch: TokenBatch, want_trace: bool = False):
    """Embed a token batch. Returns ``y`` or ``(y, trace)`` when ``want_trace``."""
    cfg = state.config
    ids, mask = batch.ids, batch.pad_mask
    B, T = ids.shape
    if T > cfg.max_context:
        raise ConfigError(f"sequence length {T} exceeds max_context {cfg.max_context}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise VocabError(f"token id out of range [0, {cfg.vocab_size})")
    A, C = cfg.num_heads, cfg.head_dim
    scale = 1.0 / math.sqrt(C)
    bias = key_bias(mask)

    h = (state["tok_emb"][ids] + state["pos_emb"][:T][None]).astype(F32)
    hidden = [h]
    layers = []
    for l in range(cfg.num_layers):
        p = f"layers.{l}."
        a, ln1 = nx.layer_norm_rows(h, state[p + "ln1_g"], state[p + "ln1_b"])
        q = _split_heads(nx.matmul(a, state[p + "wq"]) + state[p + "bq"], A)
        k = _split_heads(nx.matmul(a, state[p + "wk"]) + state[p + "bk"], A)
        v = _split_heads(nx.matmul(a, state[p + "wv"]) + state[p + "bv"], A)
        logits = (nx.matmul(q, np.swapaxes(k, -1, -2)) * F32(scale)).astype(F32)
        probs = nx.softmax_rows(logits + bias)
        o = _merge_heads(nx.matmul(probs, v))
        h = h + nx.matmul(o, state[p + "wo"]) + state[p + "bo"]
        f, ln2 = nx.layer_norm_rows(h, state[p + "ln2_g"], state[p + "ln2_b"])
        u = nx.matmul(f, state[p + "w1"]) + state[p + "b1"]
        g = nx.gelu(u)
        h = h + nx.matmul(g, state[p + "w2"]) + state[p + "b2"]
        hidden.append(h)
        if want_trace:
            layers.append(LayerTrace(q, k, v, logits, probs, a, ln1, o, f, ln2, u, g))

    z, lnf = nx.layer_norm_rows(h, state["lnf_g"], state["lnf_b"])
    if cfg.pooling == "mean":
        pooled = np.stack([nx.masked_mean_rows(z[b], mask[b]) for b in range(B)])
    else:
        pooled = np.ascontiguousarray(z[:, 0, :])
    proj = nx.matmul(pooled, state["w_out"]) + state["b_out"]
    if cfg.normalize_output:
        y, norms = nx.l2_normalize_rows(proj)
    else:
        y, norms = proj.astype(F32), None
    nx.check_finite(y, "encoder output")
    if not want_trace:
        return y
    trace = ForwardTrace(batch, hidden, layers, z, lnf, pooled, proj, norms, y)
    return y, trace


# ---------------------------------------------------------------------------
# backward


@dataclass
class TraceGrads:
    """Extra upstream gradients on trace tensors, keyed by layer index.

    ``hidden`` is keyed 0..L like :attr:`ForwardTrace.hidden`; the per-head
    dictionaries are keyed 0..L-1.
    """

    hidden: dict = field(default_factory=dict)
    q: dict = field(default_factory=dict)
    k: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    logits: dict = field(default_factory=dict)
    probs: dict = field(default_factory=dict)

    def add(self, kind: str, layer: int, grad: np.ndarray) -> None:
        store = getattr(self, kind)
        if layer in store:
            store[layer] = (store[layer] + grad).astype(F32)
        else:
            store[layer] = np.asarray(grad, dtype=F32)


def _acc(param: Parameter, grad: np.ndarray) -> None:
    param.grad += grad.astype(F32)


def encode_backward(
    state: EncoderState,
    trace: Optional[ForwardTrace],
    d_output: np.ndarray,
    trace_grads: Optional[TraceGrads] = None,
) -> dict[str, np.ndarray]:
    """Accumulate parameter gradients of a forward pass into ``Parameter.grad``.

    ``d_output`` is the gradient on the embeddings returned by :func:`encode`;
    ``trace_grads`` adds gradients flowing into internal trace tensors.
    Returns a name -> gradient mapping (views of the accumulated buffers).
    """
    if trace is None or not trace.layers and state.config.num_layers:
        raise ConfigError("encode_backward needs a trace from encode(..., want_trace=True)")
    cfg = state.config
    P = state.params
    tg = trace_grads or TraceGrads()
    mask = trace.mask
    ids = trace.batch.ids
    B, T = ids.shape
    A, C = cfg.num_heads, cfg.head_dim
    scale = F32(1.0 / math.sqrt(C))

    dy = np.asarray(d_output, dtype=F32)
    if cfg.normalize_output:
        dproj = nx.l2_normalize_rows_backward(dy, trace.output, trace.norms)
    else:
        dproj = dy
    dpooled, dw = nx.matmul_backward(trace.pooled, P["w_out"].value, dproj)
    _acc(P["w_out"], dw)
    _acc(P["b_out"], dproj.astype(np.float64).sum(axis=0))

    dz = np.zeros((B, T, cfg.hidden_dim), dtype=F32)
    if cfg.pooling == "mean":
        for b in range(B):
            dz[b] = nx.masked_mean_rows_backward(dpooled[b], mask[b])
    else:
        dz[:, 0, :] = dpooled
    dh, dg_, db_ = nx.layer_norm_rows_backward(dz, trace.lnf, P["lnf_g"].value)
    _acc(P["lnf_g"], dg_)
    _acc(P["lnf_b"], db_)
    if cfg.num_layers in tg.hidden:
        dh = dh + tg.hidden[cfg.num_layers]

    for l in reversed(range(cfg.num_layers)):
        p = f"layers.{l}."
        lt = trace.layers[l]
        # feed-forward branch: h_out = h_mid + gelu(f W1 + b1) W2 + b2
        dg, dw2 = nx.matmul_backward(lt.g, P[p + "w2"].value, dh)
        _acc(P[p + "w2"], dw2)
        _acc(P[p + "b2"], dh.astype(np.float64).reshape(-1, dh.shape[-1]).sum(axis=0))
        du = nx.gelu_backward(lt.u, dg)
        df, dw1 = nx.matmul_backward(lt.f, P[p + "w1"].value, du)
        _acc(P[p + "w1"], dw1)
        _acc(P[p + "b1"], du.astype(np.float64).reshape(-1, du.shape[-1]).sum(axis=0))
        dln, dg2, db2 = nx.layer_norm_rows_backward(df, lt.ln2, P[p + "ln2_g"].value)
        _acc(P[p + "ln2_g"], dg2)
        _acc(P[p + "ln2_b"], db2)
        dh_mid = dh + dln

        # attention branch: h_mid = h_in + merge(softmax(q k^T * s + bias) v) Wo + bo
        do, dwo = nx.matmul_backward(lt.o, P[p + "wo"].value, dh_mid)
        _acc(P[p + "wo"], dwo)
        _acc(P[p + "bo"], dh_mid.astype(np.float64).reshape(-1, dh_mid.shape[-1]).sum(axis=0))
        do_h = _split_heads(do, A)
        dprobs, dv = nx.matmul_backward(lt.probs, lt.v, do_h)
        if l in tg.probs:
            dprobs = dprobs + tg.probs[l]
        if l in tg.v:
            dv = dv + tg.v[l]
        dlogits = nx.softmax_rows_backward(lt.probs, dprobs)
        if l in tg.logits:
            dlogits = dlogits + tg.logits[l]
        dlogits = (dlogits * scale).astype(F32)
        dq, dkT = nx.matmul_backward(lt.q, np.swapaxes(lt.k, -1, -2), dlogits)
        dk = np.swapaxes(dkT, -1, -2)
        if l in tg.q:
            dq = dq + tg.q[l]
        if l in tg.k:
            dk = dk + tg.k[l]
        da = np.zeros_like(lt.a)
        for name, dxh in (("q", dq), ("k", dk), ("v", dv)):
            dx = _merge_heads(np.ascontiguousarray(dxh, dtype=F32))
            da_part, dwx = nx.matmul_backward(lt.a, P[p + "w" + name].value, dx)
            _acc(P[p + "w" + name], dwx)
            _acc(P[p + "b" + name], dx.astype(np.float64).reshape(-1, dx.shape[-1]).sum(axis=0))
            da += da_part
        dln, dg1, db1 = nx.layer_norm_rows_backward(da, lt.ln1, P[p + "ln1_g"].value)
        _acc(P[p + "ln1_g"], dg1)
        _acc(P[p + "ln1_b"], db1)
        dh = dh_mid + dln
        if l in tg.hidden:
            dh = dh + tg.hidden[l]

    dtok = np.zeros(P["tok_emb"].value.shape, dtype=np.float64)
    np.add.at(dtok, ids.reshape(-1), dh.astype(np.float64).reshape(-1, cfg.hidden_dim))
    _acc(P["tok_emb"], dtok)
    dpos = np.zeros(P["pos_emb"].value.shape, dtype=np.float64)
    dpos[:T] = dh.astype(np.float64).sum(axis=0)
    _acc(P["pos_emb"], dpos)
    return {n: p.grad for n, p in P.items()}


# ---------------------------------------------------------------------------
# text-level wrapper


class TextEncoder:
    """Embeds raw texts with an encoder state, vocab and optional instruction prefix."""

    def __init__(self, state: EncoderState, vocab: Vocab, instruction: str = "", max_len: Optional[int] = None):
        if len(vocab) != state.config.vocab_size:
            raise ConfigError(f"vocab size {len(vocab)} != encoder vocab_size {state.config.vocab_size}")
        self.state = state
        self.vocab = vocab
        self.instruction = instruction or ""
        self.max_len = max_len or state.config.max_context

    @property
    def output_dim(self) -> int:
        return self.state.config.output_dim

    @property
    def normalized(self) -> bool:
        return self.state.config.normalize_output

    def tokenize(self, texts: Sequence[str], instruction: Optional[str] = None) -> list[list[int]]:
        prefix = self.instruction if instruction is None else instruction
        return [frame(self.vocab.tokenize(prefix + t), self.max_len) for t in texts]

    def embed(self, texts: Sequence[str], instruction: Optional[str] = None, batch_size: int = 64) -> np.ndarray:
        seqs = self.tokenize(texts, instruction)
        out = np.empty((len(seqs), self.output_dim), dtype=F32)
        for s in range(0, len(seqs), batch_size):
            out[s : s + batch_size] = encode(self.state, pad_sequences(seqs[s : s + batch_size]))
        return out

    def batch(self, texts: Sequence[str], instruction: Optional[str] = None) -> TokenBatch:
        return pad_sequences(self.tokenize(texts, instruction))
