"""Training objectives: CTC, utility-rate regularizer, combined total.

The CTC loss marginalizes over all blank-augmented alignments with a
log-space forward pass; its gradient with respect to the log-probability
inputs comes from the matching backward pass (see _kernels).  The utility
loss is the (optionally cost-weighted) mean of all 2N gate values of an
utterance; the total objective is asr + lambda * utility.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from ._kernels import ctc_forward_backward
from .errors import ConfigError, ContractError, InfeasibleAlignmentError
from .tensor import Tensor

BLANK_ID = 0


@dataclass
class VocabSpec:
    size: int  # includes the blank at index 0

    def validate(self):
        if self.size < 2:
            raise ConfigError("vocab size must be >= 2 (blank plus one token)")

    def check_targets(self, targets):
        for tok in targets:
            if not 1 <= tok < self.size:
                raise ConfigError(f"target token {tok} outside [1, {self.size - 1}]")


@dataclass
class LossBreakdown:
    asr_loss: float
    utility_loss: float
    total: float
    lam: float


def extend_with_blanks(targets):
    ext = [BLANK_ID]
    for tok in targets:
        ext.append(int(tok))
        ext.append(BLANK_ID)
    return np.asarray(ext, dtype=np.int64)


def min_frames(targets):
    """Fewest frames that admit any alignment: |y| plus forced blanks."""
    repeats = sum(1 for a, b in zip(targets, targets[1:]) if a == b)
    return len(targets) + repeats


def ctc_loss(log_probs, targets):
    """Negative log-probability of all alignments of ``targets``.

    log_probs: Tensor (T, V) with log-softmax-normalized rows, blank id 0.
    """
    if log_probs.ndim != 2:
        raise ContractError("ctc_loss expects a (T, V) tensor")
    t_len, vocab = log_probs.shape
    targets = [int(t) for t in targets]
    for tok in targets:
        if not 1 <= tok < vocab:
            raise ContractError(f"target token {tok} outside [1, {vocab - 1}]")
    if t_len < min_frames(targets):
        raise InfeasibleAlignmentError(
            f"{len(targets)} targets need at least {min_frames(targets)} frames, got {t_len}"
        )
    labels = extend_with_blanks(targets)
    loss, grad = ctc_forward_backward(log_probs.data, labels)

    def bw(g, accum):
        accum(log_probs, g * grad)

    return T._make(np.float64(loss), (log_probs,), bw)


def utility_loss(soft_gates, weights=(0.5, 0.5)):
    """(1/N) * sum_l (w_mha * g_mha_l + w_ffn * g_ffn_l) as a tape scalar.

    soft_gates: list of N (g_mha, g_ffn) pairs; Tensor scalars or floats.
    Equal weights reduce to the plain utility rate (1/2N) * sum of all gates.
    """
    w_mha, w_ffn = float(weights[0]), float(weights[1])
    if abs(w_mha + w_ffn - 1.0) > 1e-12:
        raise ConfigError(f"cost weights must sum to 1, got {weights}")
    n = len(soft_gates)
    if n == 0:
        raise ContractError("utility_loss needs at least one gate pair")
    total = Tensor(0.0)
    for g_mha, g_ffn in soft_gates:
        total = T.add(total, T.scale(_as_scalar(g_mha), w_mha))
        total = T.add(total, T.scale(_as_scalar(g_ffn), w_ffn))
    return T.scale(total, 1.0 / n)


def _as_scalar(g):
    if isinstance(g, Tensor):
        return g
    val = float(g)
    if not 0.0 <= val <= 1.0:
        raise ContractError(f"gate value {val} outside [0, 1]")
    return Tensor(val)


def total_loss(asr, utility, lam):
    """Combined objective; returns (tape scalar, LossBreakdown)."""
    if lam < 0:
        raise ConfigError("lambda must be nonnegative")
    asr_t = _as_tensor(asr)
    util_t = _as_tensor(utility)
    tot = T.add(asr_t, T.scale(util_t, lam))
    return tot, LossBreakdown(
        asr_loss=asr_t.item(), utility_loss=util_t.item(), total=tot.item(), lam=float(lam)
    )


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(float(x))


def interctc_loss(intermediate, targets, params):
    """CTC on an intermediate layer's output via the auxiliary projection."""
    from .encoder import output_log_probs

    logp = output_log_probs(params, intermediate, head="inter_head")
    return ctc_loss(logp, targets)


def combine_interctc(final_loss, intermediate_loss):
    """Equal-weight mean of final and intermediate CTC losses."""
    return T.scale(T.add(final_loss, intermediate_loss), 0.5)
