"""Evaluation metrics and study tooling emitted as CSV plot data."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateInputError
from .losses import BLANK_ID

GATE_STATS_HEADER = ["layer", "module", "mean", "std"]
LENGTH_BLOCKS_HEADER = ["module", "block_count", "n", "min", "q1", "median", "q3", "max"]
SWEEP_HEADER = ["beta", "lambda", "avg_layers", "ter"]


@dataclass
class EvalReport:
    token_error_rate: float
    avg_layers: float
    avg_mha_blocks: float
    avg_ffn_blocks: float
    traces: list
    beta: float


@dataclass
class GateStats:
    """mean/std of execute probability per layer, MHA and FFN separately."""

    mha_mean: np.ndarray
    mha_std: np.ndarray
    ffn_mean: np.ndarray
    ffn_std: np.ndarray


def edit_distance(hyp, ref):
    """Levenshtein distance plus a (substitutions, insertions, deletions) split.

    Insertions are hypothesis tokens with no reference counterpart.
    """
    h, r = len(hyp), len(ref)
    dist = np.zeros((h + 1, r + 1), dtype=np.int64)
    dist[:, 0] = np.arange(h + 1)
    dist[0, :] = np.arange(r + 1)
    for i in range(1, h + 1):
        for j in range(1, r + 1):
            sub = dist[i - 1, j - 1] + (hyp[i - 1] != ref[j - 1])
            dist[i, j] = min(sub, dist[i - 1, j] + 1, dist[i, j - 1] + 1)
    # backtrace for the breakdown
    subs = ins = dels = 0
    i, j = h, r
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (hyp[i - 1] != ref[j - 1]):
            subs += hyp[i - 1] != ref[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            ins += 1
            i -= 1
        else:
            dels += 1
            j -= 1
    return int(dist[h, r]), (subs, ins, dels)


def token_error_rate(hyp, ref):
    """Distance / len(ref); defined as len(hyp) for an empty reference."""
    if not ref:
        return float(len(hyp))
    dist, _ = edit_distance(hyp, ref)
    return dist / len(ref)


def greedy_ctc_decode(log_probs):
    """Best-path decoding: argmax per frame, merge repeats, drop blanks."""
    data = log_probs.data if hasattr(log_probs, "data") else np.asarray(log_probs)
    best = np.argmax(data, axis=1)
    out = []
    prev = -1
    for tok in best:
        if tok != prev and tok != BLANK_ID:
            out.append(int(tok))
        prev = tok
    return out


def evaluate(model, batches, beta=None):
    """Binarized-gate inference over a dataset: corpus TER plus block counts."""
    policy = model.threshold_policy(beta)
    used_beta = getattr(policy, "beta", 1.0 if beta is None else float(beta))
    n_layers = model.config.num_layers
    total_dist = 0
    total_ref = 0
    traces = []
    mha_counts = []
    ffn_counts = []
    for batch in batches:
        for i in range(len(batch)):
            logp, _ = model.utterance_forward(batch.feats[i], batch.lengths[i], policy)
            hyp = greedy_ctc_decode(logp)
            dist, _ = edit_distance(hyp, batch.targets[i])
            total_dist += dist
            total_ref += len(batch.targets[i])
            trace = policy.finish(batch.utt_ids[i], batch.lengths[i])
            if trace is not None:
                traces.append(trace)
                mha_counts.append(trace.executed_mha())
                ffn_counts.append(trace.executed_ffn())
            else:
                mha_counts.append(n_layers)
                ffn_counts.append(n_layers)
    avg_mha = float(np.mean(mha_counts))
    avg_ffn = float(np.mean(ffn_counts))
    return EvalReport(
        token_error_rate=total_dist / max(total_ref, 1),
        avg_layers=(avg_mha + avg_ffn) / 2.0,
        avg_mha_blocks=avg_mha,
        avg_ffn_blocks=avg_ffn,
        traces=traces,
        beta=used_beta if model.config.predictor_kind != "none" else model.config.beta,
    )


def gate_statistics(traces):
    """Per-layer mean/std of the execute probability over an evaluation set."""
    if not traces:
        raise ContractError("gate_statistics needs at least one trace")
    p_mha = np.stack([t.p_mha for t in traces])
    p_ffn = np.stack([t.p_ffn for t in traces])
    return GateStats(
        mha_mean=p_mha.mean(axis=0),
        mha_std=p_mha.std(axis=0),
        ffn_mean=p_ffn.mean(axis=0),
        ffn_std=p_ffn.std(axis=0),
    )


def length_vs_blocks(traces):
    """Length quantiles grouped by executed block count, per module type.

    Returns rows matching LENGTH_BLOCKS_HEADER.
    """
    rows = []
    for module, counter in (("mha", lambda t: t.executed_mha()),
                            ("ffn", lambda t: t.executed_ffn())):
        groups = {}
        for t in traces:
            groups.setdefault(counter(t), []).append(t.input_len)
        for count in sorted(groups):
            lens = np.asarray(groups[count], dtype=np.float64)
            q1, med, q3 = np.percentile(lens, [25, 50, 75])
            rows.append([module, count, len(lens),
                         float(lens.min()), float(q1), float(med), float(q3),
                         float(lens.max())])
    return rows


def spearman_correlation(x, y):
    """Spearman rank correlation (average ranks for ties)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y) or len(x) < 2:
        raise DegenerateInputError("need two same-length samples of size >= 2")
    rx = _ranks(x)
    ry = _ranks(y)
    sx, sy = rx.std(), ry.std()
    if sx == 0 or sy == 0:
        return 0.0
    return float(np.mean((rx - rx.mean()) * (ry - ry.mean())) / (sx * sy))


def _ranks(v):
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=np.float64)
    ranks[order] = np.arange(1, len(v) + 1)
    # average ranks over ties
    for val in np.unique(v):
        mask = v == val
        if mask.sum() > 1:
            ranks[mask] = ranks[mask].mean()
    return ranks


# ---------------------------------------------------------------------------
# CSV emitters


def _fmt(x):
    if isinstance(x, float):
        return f"{x:.12g}"
    return str(x)


def write_gate_stats_csv(path, stats):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(GATE_STATS_HEADER)
        n = len(stats.mha_mean)
        for module, mean, std in (("mha", stats.mha_mean, stats.mha_std),
                                  ("ffn", stats.ffn_mean, stats.ffn_std)):
            for l in range(n):
                writer.writerow([l + 1, module, _fmt(float(mean[l])), _fmt(float(std[l]))])


def write_length_blocks_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LENGTH_BLOCKS_HEADER)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_sweep_csv(path, rows):
    """rows: (beta, lambda, avg_layers, ter), sorted by beta ascending."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_HEADER)
        for row in sorted(rows, key=lambda r: r[0]):
            writer.writerow([_fmt(v) for v in row])
