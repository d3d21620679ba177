"""The compiled kernels must agree with the pure-NumPy fallback."""

import numpy as np
import pytest

from leafkd import _kernels_py as py
from leafkd import kernels

compiled = pytest.importorskip("leafkd._kernels")


@pytest.fixture
def x(rng):
    return np.ascontiguousarray(rng.normal(size=(7, 13)).astype(np.float32))


def test_backend_name_is_known():
    assert kernels.BACKEND in ("compiled", "python")


def test_softmax_parity(x, rng):
    np.testing.assert_allclose(compiled.softmax_rows(x), py.softmax_rows(x), rtol=1e-6, atol=1e-7)
    y = py.softmax_rows(x)
    dy = rng.normal(size=x.shape).astype(np.float32)
    np.testing.assert_allclose(compiled.softmax_rows_backward(y, dy), py.softmax_rows_backward(y, dy), rtol=1e-5, atol=1e-7)


def test_layer_norm_parity(x, rng):
    g = rng.normal(size=13).astype(np.float32)
    b = rng.normal(size=13).astype(np.float32)
    for got, want in zip(compiled.layer_norm_forward(x, g, b, 1e-5), py.layer_norm_forward(x, g, b, 1e-5)):
        np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-6)
    _, xhat, rstd = py.layer_norm_forward(x, g, b, 1e-5)
    dy = rng.normal(size=x.shape).astype(np.float32)
    for got, want in zip(compiled.layer_norm_backward(dy, xhat, rstd, g), py.layer_norm_backward(dy, xhat, rstd, g)):
        np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)


def test_gelu_parity(x, rng):
    np.testing.assert_allclose(compiled.gelu_forward(x), py.gelu_forward(x), rtol=1e-6, atol=1e-7)
    dy = rng.normal(size=x.shape).astype(np.float32)
    np.testing.assert_allclose(compiled.gelu_backward(x, dy), py.gelu_backward(x, dy), rtol=1e-5, atol=1e-7)


def test_int8_scores_parity(rng):
    qq = rng.integers(-127, 128, size=(5, 24), dtype=np.int8)
    qd = rng.integers(-127, 128, size=(9, 24), dtype=np.int8)
    s2 = rng.uniform(0.001, 0.01, size=24) ** 2
    got = compiled.int8_scores(qq, qd, s2)
    want = py.int8_scores(qq, qd, s2)
    ref = (qq.astype(np.float64)[:, None, :] * qd.astype(np.float64)[None] * s2).sum(-1)
    np.testing.assert_allclose(got, want, rtol=1e-12)
    np.testing.assert_allclose(want, ref, rtol=1e-12)


def test_binary_scores_parity_and_oracle(rng):
    dim = 37
    bits_q = rng.random((4, dim)) >= 0.5
    bits_d = rng.random((6, dim)) >= 0.5
    pq, pd = np.packbits(bits_q, axis=1), np.packbits(bits_d, axis=1)
    got = compiled.binary_scores(pq, pd, dim)
    assert np.array_equal(got, py.binary_scores(pq, pd, dim))
    # agreements minus disagreements over the real bits
    ref = (bits_q[:, None, :] == bits_d[None]).sum(-1) * 2 - dim
    assert np.array_equal(got, ref)
