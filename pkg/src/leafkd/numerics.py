"""Dense float32 kernels with hand-written backward passes.

Arrays are plain ``numpy.ndarray`` objects of dtype float32. Row-wise
kernels treat the last axis as the row and flatten any leading axes, so a
``(batch, tokens, hidden)`` activation is handled as ``batch * tokens`` rows.
Reductions accumulate in float64 and cast back, which keeps results
deterministic for a fixed loop order and stable under finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import DimensionError, DistributionError, EmptyPoolError, EvaluationError, NumericError

F32 = np.float32
KL_FLOOR = 1e-9
LN_EPS = 1e-5
NORM_FLOOR = 1e-12
L2_EPS = 1e-12


def as_f32(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=F32)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def _rows(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=F32).reshape(-1, x.shape[-1])


# ---------------------------------------------------------------------------
# matmul


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product ``a @ b`` accumulated in float64.

    ``a`` may carry leading batch axes; ``b`` is either 2-D or has the same
    leading axes as ``a``.
    """
    if a.shape[-1] != b.shape[-2 if b.ndim >= 2 else 0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.astype(np.float64), b.astype(np.float64))
    return out.astype(F32)


def matmul_backward(a: np.ndarray, b: np.ndarray, dout: np.ndarray, need_a: bool = True, need_b: bool = True):
    """Gradients of ``a @ b`` given the upstream gradient ``dout``.

    For a 2-D ``b`` shared across leading axes of ``a`` the gradient of ``b``
    is summed over those axes.
    """
    d64 = dout.astype(np.float64)
    da = db = None
    if need_a:
        da = np.matmul(d64, np.swapaxes(b.astype(np.float64), -1, -2)).astype(F32)
    if need_b:
        a64 = a.astype(np.float64)
        if b.ndim == 2:
            db = (a64.reshape(-1, a.shape[-1]).T @ d64.reshape(-1, dout.shape[-1])).astype(F32)
        else:
            db = np.matmul(np.swapaxes(a64, -1, -2), d64).astype(F32)
    return da, db


# ---------------------------------------------------------------------------
# softmax / KL


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row softmax with per-row max subtraction."""
    return kernels.softmax_rows(_rows(x)).reshape(x.shape)


def softmax_rows_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return kernels.softmax_rows_backward(_rows(y), _rows(dy)).reshape(y.shape)


def _check_stochastic(p: np.ndarray, name: str) -> None:
    s = p.astype(np.float64).sum(axis=-1)
    if np.any(np.abs(s - 1.0) > 1e-4) or np.any(p < 0):
        raise DistributionError(f"{name} rows are not probability distributions")


def kl_div_rows(p: np.ndarray, q: np.ndarray, floor: float = KL_FLOOR) -> np.ndarray:
    """Per-row ``sum p * ln(p / q)`` with ``0 * ln(0 / q) = 0``.

    ``q`` is clamped from below at ``floor`` before the log.
    """
    if p.shape != q.shape:
        raise DimensionError(f"kl_div_rows shape mismatch: {p.shape} vs {q.shape}")
    _check_stochastic(p, "p")
    _check_stochastic(q, "q")
    p64 = p.astype(np.float64)
    q64 = np.maximum(q.astype(np.float64), floor)
    pos = p64 > 0
    terms = np.zeros_like(p64)
    terms[pos] = p64[pos] * (np.log(p64[pos]) - np.log(q64[pos]))
    return terms.sum(axis=-1)


def kl_div_rows_grad_q(p: np.ndarray, q: np.ndarray, floor: float = KL_FLOOR) -> np.ndarray:
    """Gradient of ``kl_div_rows`` with respect to ``q`` (zero where clamped)."""
    p64 = p.astype(np.float64)
    q64 = q.astype(np.float64)
    g = np.where(q64 >= floor, -p64 / np.maximum(q64, floor), 0.0)
    return g.astype(F32)


# ---------------------------------------------------------------------------
# pooling


def masked_mean_rows(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mean over the rows of ``x`` selected by boolean ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    if x.ndim != 2 or mask.shape != (x.shape[0],):
        raise DimensionError(f"masked_mean_rows expects (rows, cols) and (rows,), got {x.shape}, {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        raise EmptyPoolError("all-false mask: nothing to pool")
    return (x[mask].astype(np.float64).sum(axis=0) / n).astype(F32)


def masked_mean_rows_backward(dpooled: np.ndarray, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    out = np.zeros((mask.shape[0], dpooled.shape[-1]), dtype=F32)
    out[mask] = (dpooled.astype(np.float64) / n).astype(F32)
    return out


# ---------------------------------------------------------------------------
# layer norm, gelu


@dataclass
class LayerNormCache:
    xhat: np.ndarray
    rstd: np.ndarray
    shape: tuple


def layer_norm_rows(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = LN_EPS):
    """Normalize each row to zero mean and unit variance, then scale and shift.

    Returns ``(y, cache)``; ``cache`` feeds :func:`layer_norm_rows_backward`.
    """
    if gain.shape != (x.shape[-1],) or bias.shape != gain.shape:
        raise DimensionError(f"layer norm gain/bias {gain.shape}/{bias.shape} vs rows of {x.shape[-1]}")
    y, xhat, rstd = kernels.layer_norm_forward(_rows(x), as_f32(gain), as_f32(bias), float(eps))
    return y.reshape(x.shape), LayerNormCache(xhat, rstd, x.shape)


def layer_norm_rows_backward(dy: np.ndarray, cache: LayerNormCache, gain: np.ndarray):
    dx, dgain, dbias = kernels.layer_norm_backward(_rows(dy), cache.xhat, cache.rstd, as_f32(gain))
    return dx.reshape(cache.shape), dgain, dbias


def gelu(x: np.ndarray) -> np.ndarray:
    """Tanh-approximated GELU."""
    return kernels.gelu_forward(_rows(x)).reshape(x.shape)


def gelu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return kernels.gelu_backward(_rows(x), _rows(dy)).reshape(x.shape)


# ---------------------------------------------------------------------------
# norms and similarities


def l2_normalize_rows(x: np.ndarray):
    """Scale each row to unit Euclidean norm. Returns ``(y, norms)``.

    Rows with norm below ``NORM_FLOOR`` are divided by the floor instead.
    """
    x64 = x.astype(np.float64)
    norms = np.sqrt((x64 * x64).sum(axis=-1, keepdims=True))
    y = x64 / np.maximum(norms, NORM_FLOOR)
    return y.astype(F32), norms


def l2_normalize_rows_backward(dy: np.ndarray, y: np.ndarray, norms: np.ndarray) -> np.ndarray:
    d64 = dy.astype(np.float64)
    y64 = y.astype(np.float64)
    live = norms > NORM_FLOOR
    proj = d64 - y64 * (y64 * d64).sum(axis=-1, keepdims=True)
    dx = np.where(live, proj / np.maximum(norms, NORM_FLOOR), d64 / NORM_FLOOR)
    return dx.astype(F32)


def mse(a: np.ndarray, b: np.ndarray) -> float:
    """Mean of squared differences over all entries."""
    if a.shape != b.shape:
        raise DimensionError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    d = a.astype(np.float64) - b.astype(np.float64)
    return float((d * d).mean())


def mse_grad(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Gradient of :func:`mse` with respect to ``a``."""
    d = a.astype(np.float64) - b.astype(np.float64)
    return (2.0 * d / d.size).astype(F32)


def cosine_sim_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise DimensionError(f"cosine_sim_rows shape mismatch: {a.shape} vs {b.shape}")
    a64 = a.astype(np.float64)
    b64 = b.astype(np.float64)
    na = np.maximum(np.sqrt((a64 * a64).sum(axis=-1)), NORM_FLOOR)
    nb = np.maximum(np.sqrt((b64 * b64).sum(axis=-1)), NORM_FLOOR)
    return (a64 * b64).sum(axis=-1) / (na * nb)


def cosine_sim_rows_backward(dcos: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Gradients of the per-row cosine with respect to ``a`` and ``b``."""
    a64 = a.astype(np.float64)
    b64 = b.astype(np.float64)
    na = np.maximum(np.sqrt((a64 * a64).sum(axis=-1, keepdims=True)), NORM_FLOOR)
    nb = np.maximum(np.sqrt((b64 * b64).sum(axis=-1, keepdims=True)), NORM_FLOOR)
    cos = (a64 * b64).sum(axis=-1, keepdims=True) / (na * nb)
    g = np.asarray(dcos, dtype=np.float64)[..., None]
    da = g * (b64 / (na * nb) - cos * a64 / (na * na))
    db = g * (a64 / (na * nb) - cos * b64 / (nb * nb))
    return da.astype(F32), db.astype(F32)


# ---------------------------------------------------------------------------
# parameters and gradient checking


@dataclass
class Parameter:
    """A trainable tensor with its gradient and AdamW moment buffers."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = as_f32(self.value)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


def zero_grads(params: Sequence[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def gradient_check(
    loss_and_grad: Callable[[], float],
    params: Sequence[Parameter],
    h: float = 1e-3,
    n_coords: int = 100,
    seed: int = 0,
) -> float:
    """Compare analytic gradients against central finite differences.

    ``loss_and_grad`` evaluates the scalar loss at the current parameter
    values and accumulates analytic gradients into ``p.grad``; grads are
    zeroed before each call. At least ``n_coords`` coordinates are sampled
    (all of them when there are fewer). Returns the maximum of
    ``|g_fd - g_an| / max(1, |g_fd|, |g_an|)``.
    """
    zero_grads(params)
    f0 = loss_and_grad()
    if not np.isfinite(f0):
        raise EvaluationError(f"loss is not finite: {f0}")
    analytic = [p.grad.astype(np.float64).ravel().copy() for p in params]

    sizes = np.array([p.value.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat = np.arange(total) if total <= n_coords else rng.choice(total, size=n_coords, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    for k in flat:
        pi = int(np.searchsorted(offsets, k, side="right") - 1)
        j = int(k - offsets[pi])
        view = params[pi].value.reshape(-1)
        orig = view[j]
        view[j] = orig + F32(h)
        hi = float(view[j])
        zero_grads(params)
        fp = loss_and_grad()
        view[j] = orig - F32(h)
        lo = float(view[j])
        zero_grads(params)
        fm = loss_and_grad()
        view[j] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"loss is not finite near coordinate {k}")
        g_fd = (fp - fm) / (hi - lo)
        g_an = analytic[pi][j]
        err = abs(g_fd - g_an) / max(1.0, abs(g_fd), abs(g_an))
        worst = max(worst, err)
    zero_grads(params)
    return worst
