"""Compare the compiled CTC kernel against the pure-numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py``.  The first jit call pays
the compilation cost, so it is excluded from the timings.
"""

import time

import numpy as np

from dyndepth._kernels import USING_NUMBA, _ctc_jit, _ctc_numpy
from dyndepth.losses import extend_with_blanks


def make_instance(rng, t_len, vocab, n_tokens):
    logits = rng.normal(size=(t_len, vocab))
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    targets = rng.integers(1, vocab, size=n_tokens)
    return logp, extend_with_blanks(targets)


def bench(fn, instances, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        for logp, labels in instances:
            fn(logp, labels)
        best = min(best, time.perf_counter() - start)
    return best


def main():
    rng = np.random.default_rng(0)
    cases = [
        ("short  (T=16,  V=6,  L=4)", 16, 6, 4),
        ("medium (T=64,  V=32, L=12)", 64, 32, 12),
        ("long   (T=256, V=64, L=32)", 256, 64, 32),
    ]
    print(f"numba available and active: {USING_NUMBA}")
    print(f"{'case':<28} {'numpy (ms)':>12} {'jit (ms)':>12} {'speedup':>9}")
    for name, t_len, vocab, n_tokens in cases:
        instances = [make_instance(rng, t_len, vocab, n_tokens) for _ in range(20)]
        _ctc_jit(*instances[0])  # trigger compilation outside the timing
        t_np = bench(_ctc_numpy, instances, repeats=3)
        t_jit = bench(_ctc_jit, instances, repeats=3)
        print(f"{name:<28} {1e3 * t_np:>12.2f} {1e3 * t_jit:>12.2f} {t_np / t_jit:>8.1f}x")


if __name__ == "__main__":
    main()
