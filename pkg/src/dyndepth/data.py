"""Synthetic transduction task, batching, and dataset files.

Each token of the vocabulary owns a fixed prototype feature vector.  An
utterance is a concatenation of token segments (prototype repeated for a
random duration) plus Gaussian noise, so the mapping is learnable and longer
utterances carry more tokens.  Segment durations are kept long enough that
every target is CTC-feasible after subsampling.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .container import read_container, write_container
from .errors import ConfigError

# frames per token segment, in units of the subsample factor; 3 subsampled
# frames per token guarantee 2L+1 <= T' for any target length L
MIN_SEGMENT_SUBFRAMES = 3


@dataclass
class SyntheticTaskSpec:
    vocab_size: int = 6  # includes blank 0
    feat_dim: int = 8
    min_len: int = 12
    max_len: int = 60
    min_tokens: int = 1
    max_tokens: int = 4
    noise_std: float = 0.1
    seed: int = 0

    def validate(self, subsample_factor):
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.feat_dim < 1:
            raise ConfigError("feat_dim must be >= 1")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ConfigError("need 1 <= min_tokens <= max_tokens")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("need 1 <= min_len <= max_len")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be nonnegative")
        seg = MIN_SEGMENT_SUBFRAMES * subsample_factor
        if self.max_tokens * seg > self.max_len:
            raise ConfigError(
                f"max_tokens={self.max_tokens} needs at least {self.max_tokens * seg} "
                f"frames but max_len={self.max_len} (CTC feasibility)"
            )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Batch:
    feats: np.ndarray  # (B, T, f), zero-padded
    lengths: list
    targets: list
    utt_ids: list

    def __len__(self):
        return len(self.lengths)


def token_prototypes(spec):
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(2)[0])
    raw = rng.normal(size=(spec.feat_dim, spec.feat_dim))
    n_tokens = spec.vocab_size - 1
    if n_tokens <= spec.feat_dim:
        # orthonormal directions keep tokens well separated for any seed
        q, _ = np.linalg.qr(raw)
        return 2.0 * q[:n_tokens]
    return 2.0 * rng.normal(size=(n_tokens, spec.feat_dim)) / np.sqrt(spec.feat_dim)


def generate_utterances(spec, count, subsample_factor, id_prefix="utt"):
    """Deterministic list of (utt_id, feats (T, f), targets) tuples."""
    spec.validate(subsample_factor)
    protos = token_prototypes(spec)
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(2)[1])
    seg = MIN_SEGMENT_SUBFRAMES * subsample_factor
    utts = []
    for i in range(count):
        n_tokens = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
        # no immediate repeats: identical adjacent segments are visually
        # indistinguishable, which makes the toy task needlessly ambiguous
        tokens = []
        for _ in range(n_tokens):
            tok = int(rng.integers(1, spec.vocab_size))
            while spec.vocab_size > 2 and tokens and tok == tokens[-1]:
                tok = int(rng.integers(1, spec.vocab_size))
            tokens.append(tok)
        # per-token slack keeps utterance length roughly proportional to the
        # token count, so longer utterances genuinely carry more content
        slack = (spec.max_len - spec.max_tokens * seg) // spec.max_tokens
        lo = max(spec.min_len, n_tokens * seg)
        hi = min(spec.max_len, n_tokens * (seg + slack))
        total = int(rng.integers(lo, max(lo, hi) + 1))
        extra = rng.multinomial(total - n_tokens * seg, np.full(n_tokens, 1.0 / n_tokens))
        durations = seg + extra
        pieces = [np.tile(protos[tok - 1], (dur, 1)) for tok, dur in zip(tokens, durations)]
        feats = np.concatenate(pieces, axis=0)
        if spec.noise_std > 0:
            feats = feats + spec.noise_std * rng.normal(size=feats.shape)
        utts.append((f"{id_prefix}-{i:05d}", feats, [int(t) for t in tokens]))
    return utts


def batchify(utts, batch_size):
    """Group utterances in order into zero-padded batches."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    batches = []
    for start in range(0, len(utts), batch_size):
        chunk = utts[start:start + batch_size]
        t_max = max(f.shape[0] for _, f, _ in chunk)
        feat_dim = chunk[0][1].shape[1]
        feats = np.zeros((len(chunk), t_max, feat_dim))
        lengths, targets, ids = [], [], []
        for j, (uid, f, y) in enumerate(chunk):
            feats[j, : f.shape[0]] = f
            lengths.append(f.shape[0])
            targets.append(y)
            ids.append(uid)
        batches.append(Batch(feats=feats, lengths=lengths, targets=targets, utt_ids=ids))
    return batches


def generate_task(spec, count, subsample_factor, batch_size, id_prefix="utt"):
    return batchify(generate_utterances(spec, count, subsample_factor, id_prefix), batch_size)


# ---------------------------------------------------------------------------
# dataset files


def save_dataset(path, spec, utts, split):
    manifest = {
        "kind": "dataset",
        "split": split,
        "count": len(utts),
        "task": spec.to_dict(),
        "utt_ids": [uid for uid, _, _ in utts],
    }
    tensors = {}
    for i, (_, feats, targets) in enumerate(utts):
        tensors[f"utt{i:06d}.feats"] = feats
        tensors[f"utt{i:06d}.targets"] = np.asarray(targets, dtype=np.float64)
    write_container(path, manifest, tensors)


def load_dataset(path):
    """Returns (SyntheticTaskSpec, list of (utt_id, feats, targets))."""
    manifest, tensors = read_container(path)
    if manifest.get("kind") != "dataset":
        raise ConfigError(f"{path}: not a dataset container")
    spec = SyntheticTaskSpec.from_dict(manifest["task"])
    utts = []
    for i, uid in enumerate(manifest["utt_ids"]):
        feats = tensors[f"utt{i:06d}.feats"]
        targets = [int(t) for t in tensors[f"utt{i:06d}.targets"]]
        utts.append((uid, feats, targets))
    return spec, utts
