"""Hot numeric kernels: CTC forward-backward in log space.

The same source is used twice: once as plain Python/numpy loops and once
compiled with numba ``@njit``.  Set ``DYNDEPTH_NO_NUMBA=1`` to force the pure
numpy path (also used automatically when numba is unavailable).
``benchmarks/bench_kernels.py`` compares the two.
"""

import os

import numpy as np

NEG_INF = -np.inf


def _want_numba():
    flag = os.environ.get("DYNDEPTH_NO_NUMBA", "0").strip().lower()
    return flag not in ("1", "true", "yes")


def _ctc_forward_backward(logp, labels):
    """Loss and gradient of -log P(labels | logp) over all CTC alignments.

    logp:   (T, V) log-probabilities, rows normalized, blank at index 0.
    labels: (S,) extended label sequence blank,l1,blank,l2,...,blank.
    Returns (loss, grad) where grad is d loss / d logp, shape (T, V).
    """
    T, V = logp.shape
    S = labels.shape[0]

    alpha = np.full((T, S), NEG_INF)
    beta = np.full((T, S), NEG_INF)

    alpha[0, 0] = logp[0, labels[0]]
    if S > 1:
        alpha[0, 1] = logp[0, labels[1]]
    for t in range(1, T):
        for s in range(S):
            best = alpha[t - 1, s]
            if s >= 1 and alpha[t - 1, s - 1] > best:
                best = alpha[t - 1, s - 1]
            skip_ok = s >= 2 and labels[s] != 0 and labels[s] != labels[s - 2]
            if skip_ok and alpha[t - 1, s - 2] > best:
                best = alpha[t - 1, s - 2]
            if best == NEG_INF:
                continue
            acc = np.exp(alpha[t - 1, s] - best)
            if s >= 1:
                acc += np.exp(alpha[t - 1, s - 1] - best)
            if skip_ok:
                acc += np.exp(alpha[t - 1, s - 2] - best)
            alpha[t, s] = logp[t, labels[s]] + best + np.log(acc)

    ll = alpha[T - 1, S - 1]
    if S > 1:
        other = alpha[T - 1, S - 2]
        if other > ll:
            ll, other = other, ll
        if other != NEG_INF:
            ll = ll + np.log1p(np.exp(other - ll))
    loss = -ll

    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        for s in range(S - 1, -1, -1):
            best = NEG_INF
            v0 = beta[t + 1, s] + logp[t + 1, labels[s]]
            if v0 > best:
                best = v0
            v1 = NEG_INF
            if s + 1 < S:
                v1 = beta[t + 1, s + 1] + logp[t + 1, labels[s + 1]]
                if v1 > best:
                    best = v1
            v2 = NEG_INF
            if s + 2 < S and labels[s + 2] != 0 and labels[s + 2] != labels[s]:
                v2 = beta[t + 1, s + 2] + logp[t + 1, labels[s + 2]]
                if v2 > best:
                    best = v2
            if best == NEG_INF:
                continue
            acc = np.exp(v0 - best)
            if v1 != NEG_INF:
                acc += np.exp(v1 - best)
            if v2 != NEG_INF:
                acc += np.exp(v2 - best)
            beta[t, s] = best + np.log(acc)

    # d loss / d logp[t,k] = -sum_{s: labels[s]==k} exp(alpha + beta - ll)
    grad = np.zeros((T, V))
    for t in range(T):
        for s in range(S):
            ab = alpha[t, s] + beta[t, s]
            if ab == NEG_INF:
                continue
            grad[t, labels[s]] -= np.exp(ab - ll)
    return loss, grad


_ctc_numpy = _ctc_forward_backward

if _want_numba():
    try:
        from numba import njit

        _ctc_jit = njit(cache=True)(_ctc_forward_backward)
        USING_NUMBA = True
    except ImportError:  # pragma: no cover
        _ctc_jit = _ctc_numpy
        USING_NUMBA = False
else:
    _ctc_jit = _ctc_numpy
    USING_NUMBA = False


def ctc_forward_backward(logp, labels):
    logp = np.ascontiguousarray(logp, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    return _ctc_jit(logp, labels)
