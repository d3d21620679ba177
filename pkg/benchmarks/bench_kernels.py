"""Time the compiled row kernels against the NumPy fallback.

    python3 benchmarks/bench_kernels.py [--repeats 7] [--scale 1]

Shapes follow the student and teacher encoders on a 32-text batch, and a
200-doc index for the scoring kernels. Each line reports the best of
``--repeats`` timings per backend and the speedup of the compiled one.
The package routes ``int8_scores`` to the NumPy version regardless, since
its BLAS matmul wins; the compiled loop is timed here for reference.
"""

import argparse
import timeit

import numpy as np

from leafkd import _kernels_py

try:
    from leafkd import _kernels
except ImportError:  # extension not built
    _kernels = None


def cases(scale: int, rng: np.random.Generator) -> dict:
    B, T = 32 * scale, 48
    f = lambda *s: rng.normal(size=s).astype(np.float32)  # noqa: E731
    logits = f(B * 4 * T, T)
    probs = _kernels_py.softmax_rows(logits)
    x = f(B * T, 64)
    gain, bias = np.ones(64, np.float32), np.zeros(64, np.float32)
    _, xhat, rstd = _kernels_py.layer_norm_forward(x, gain, bias, 1e-5)
    h = f(B * T, 256)
    docs = rng.normal(size=(200 * scale, 64))
    scales = np.abs(docs).max(axis=0) / 127
    qd = np.clip(np.rint(docs / scales), -127, 127).astype(np.int8)
    qq = qd[: 50 * scale].copy()
    pd = np.packbits(docs >= 0, axis=1)
    pq = pd[: 50 * scale].copy()
    s2 = scales * scales
    return {
        "softmax_rows": ("softmax_rows", (logits,)),
        "softmax_rows_backward": ("softmax_rows_backward", (probs, f(*probs.shape))),
        "layer_norm_forward": ("layer_norm_forward", (x, gain, bias, 1e-5)),
        "layer_norm_backward": ("layer_norm_backward", (f(*x.shape), xhat, rstd, gain)),
        "gelu_forward": ("gelu_forward", (h,)),
        "gelu_backward": ("gelu_backward", (h, f(*h.shape))),
        "int8_scores": ("int8_scores", (qq, qd, s2)),
        "binary_scores": ("binary_scores", (pq, pd, 64)),
    }


def best_time(fn, args, repeats: int) -> float:
    number = 5
    return min(timeit.repeat(lambda: fn(*args), repeat=repeats, number=number)) / number


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=7)
    ap.add_argument("--scale", type=int, default=1, help="multiply batch and index sizes")
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'python ms':>12}{'compiled ms':>14}{'speedup':>10}")
    for label, (name, call_args) in cases(args.scale, rng).items():
        py = best_time(getattr(_kernels_py, name), call_args, args.repeats)
        if _kernels is None:
            print(f"{label:<24}{py * 1e3:>12.3f}{'-':>14}{'-':>10}")
            continue
        c = best_time(getattr(_kernels, name), call_args, args.repeats)
        print(f"{label:<24}{py * 1e3:>12.3f}{c * 1e3:>14.3f}{py / c:>9.2f}x")


if __name__ == "__main__":
    main()
