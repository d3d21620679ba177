"""Pure-NumPy reference versions of the hot row kernels.

Every function takes C-contiguous 2-D arrays and mirrors the signature of
the compiled module ``leafkd._kernels`` exactly. Reductions accumulate in
float64; results are returned as float32.
"""

import numpy as np

GELU_C = 0.7978845608028654  # sqrt(2 / pi)
GELU_A = 0.044715


def softmax_rows(x):
    x64 = x.astype(np.float64)
    z = x64 - x64.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z.astype(np.float32)


def softmax_rows_backward(y, dy):
    y64 = y.astype(np.float64)
    dy64 = dy.astype(np.float64)
    dot = (y64 * dy64).sum(axis=1, keepdims=True)
    return (y64 * (dy64 - dot)).astype(np.float32)


def layer_norm_forward(x, gain, bias, eps):
    x64 = x.astype(np.float64)
    mu = x64.mean(axis=1, keepdims=True)
    xc = x64 - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat * gain.astype(np.float64) + bias.astype(np.float64)
    return y.astype(np.float32), xhat.astype(np.float32), rstd[:, 0].astype(np.float32)


def layer_norm_backward(dy, xhat, rstd, gain):
    dy64 = dy.astype(np.float64)
    xh = xhat.astype(np.float64)
    dgain = (dy64 * xh).sum(axis=0)
    dbias = dy64.sum(axis=0)
    g = dy64 * gain.astype(np.float64)
    n = xh.shape[1]
    mean_g = g.sum(axis=1, keepdims=True) / n
    mean_gx = (g * xh).sum(axis=1, keepdims=True) / n
    dx = (g - mean_g - xh * mean_gx) * rstd.astype(np.float64)[:, None]
    return dx.astype(np.float32), dgain.astype(np.float32), dbias.astype(np.float32)


def gelu_forward(x):
    x64 = x.astype(np.float64)
    t = np.tanh(GELU_C * (x64 + GELU_A * x64 ** 3))
    return (0.5 * x64 * (1.0 + t)).astype(np.float32)


def gelu_backward(x, dy):
    x64 = x.astype(np.float64)
    t = np.tanh(GELU_C * (x64 + GELU_A * x64 ** 3))
    dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x64 * x64)
    d = 0.5 * (1.0 + t) + 0.5 * x64 * dt
    return (d * dy.astype(np.float64)).astype(np.float32)


def int8_scores(qq, qd, scale_sq):
    weighted = qq.astype(np.float64) * scale_sq[None, :]
    return weighted @ qd.astype(np.float64).T


def binary_scores(pq, pd, dim):
    out = np.empty((pq.shape[0], pd.shape[0]), dtype=np.int64)
    for i in range(pq.shape[0]):
        ham = np.bitwise_count(np.bitwise_xor(pd, pq[i][None, :])).sum(axis=1, dtype=np.int64)
        out[i] = dim - 2 * ham
    return out
