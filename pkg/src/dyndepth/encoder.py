"""Transformer encoder stack with per-module execute/skip gates.

A layer is the standard MHA + FFN pair with pre-norm residual branches.  The
gated variant multiplies each branch by a gate value before the residual add,
so gate 1 reproduces the vanilla layer bitwise and gate 0 is the identity.
The frontend replaces a convolutional subsampler with a strided linear
projection (frames grouped in windows of ``subsample_factor``) plus
sinusoidal positional embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DegenerateInputError
from .tensor import Tensor

PREDICTOR_KINDS = ("none", "local", "global")


@dataclass
class EncoderConfig:
    num_layers: int = 4
    model_dim: int = 16
    num_heads: int = 2
    ffn_dim: int = 32
    subsample_factor: int = 2
    predictor_kind: str = "none"
    predictor_hidden: int = 32
    tau: float = 1.0
    beta: float = 0.5
    lam: float = 0.0
    mha_cost_weight: float = 0.5
    ffn_cost_weight: float = 0.5

    def validate(self):
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.model_dim % self.num_heads != 0:
            raise ConfigError("model_dim must be divisible by num_heads")
        if self.predictor_kind not in PREDICTOR_KINDS:
            raise ConfigError(f"unknown predictor_kind {self.predictor_kind!r}")
        if self.predictor_hidden < 1:
            raise ConfigError("predictor_hidden must be >= 1")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta must be in [0, 1]")
        if self.lam < 0:
            raise ConfigError("lambda must be nonnegative")
        if self.mha_cost_weight < 0 or self.ffn_cost_weight < 0:
            raise ConfigError("cost weights must be nonnegative")
        if abs(self.mha_cost_weight + self.ffn_cost_weight - 1.0) > 1e-12:
            raise ConfigError("cost weights must sum to 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        cfg = cls(**d)
        cfg.validate()
        return cfg


def sinusoidal_embeddings(length, dim):
    """pe[pos, 2i] = sin(pos / 10000^(2i/d)), pe[pos, 2i+1] = cos(...)."""
    pe = np.zeros((length, dim))
    pos = np.arange(length)[:, None].astype(np.float64)
    div = np.exp(np.arange(0, dim, 2) * (-math.log(10000.0) / dim))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div[: pe[:, 1::2].shape[1]])
    return pe


def subsampled_len(raw_len, factor):
    return -(-int(raw_len) // int(factor))


def frontend(feats, valid_len, proj_w, proj_b, config):
    """Strided linear downsampling plus positional embeddings.

    feats: numpy array (T, f), zero-padded beyond valid_len.
    Returns (Tensor (T', d), valid_len') with T' = ceil(T / factor).
    """
    factor = config.subsample_factor
    raw_t, feat_dim = feats.shape
    if raw_t < factor or valid_len < 1:
        raise DegenerateInputError(f"input length {raw_t} below subsample factor {factor}")
    t_sub = subsampled_len(raw_t, factor)
    padded = np.zeros((t_sub * factor, feat_dim))
    padded[:raw_t] = feats
    grouped = padded.reshape(t_sub, factor * feat_dim)
    x = T.add_rowvec(T.matmul(Tensor(grouped), proj_w), proj_b)
    pe = Tensor(sinusoidal_embeddings(t_sub, config.model_dim))
    return T.add(x, pe), subsampled_len(valid_len, factor)


def attention_mask(t_len, valid_len):
    """Additive mask: 0 for valid key positions, -1e9 for padded ones."""
    mask = np.zeros((t_len, t_len))
    mask[:, valid_len:] = -1e9
    return Tensor(mask)


def mha_block(x, lp, valid_len, config):
    """Multi-head self-attention branch, pre-norm, WITHOUT the residual add."""
    valid_len = int(valid_len)
    if valid_len < 1:
        raise DegenerateInputError("mha_block with valid_len=0")
    h = T.layer_norm(x, lp["ln1.g"], lp["ln1.b"])
    q = T.add_rowvec(T.matmul(h, lp["Wq"]), lp["bq"])
    k = T.add_rowvec(T.matmul(h, lp["Wk"]), lp["bk"])
    v = T.add_rowvec(T.matmul(h, lp["Wv"]), lp["bv"])
    d = config.model_dim
    dh = d // config.num_heads
    mask = attention_mask(x.shape[0], valid_len)
    heads = []
    for i in range(config.num_heads):
        qh = T.narrow(q, 1, i * dh, (i + 1) * dh)
        kh = T.narrow(k, 1, i * dh, (i + 1) * dh)
        vh = T.narrow(v, 1, i * dh, (i + 1) * dh)
        scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / math.sqrt(dh))
        attn = T.softmax(T.add(scores, mask), axis=1)
        heads.append(T.matmul(attn, vh))
    merged = heads[0] if len(heads) == 1 else T.concat(heads, axis=1)
    return T.add_rowvec(T.matmul(merged, lp["Wo"]), lp["bo"])


def ffn_block(y, lp):
    """Position-wise feed-forward branch, pre-norm, WITHOUT the residual add."""
    h = T.layer_norm(y, lp["ln2.g"], lp["ln2.b"])
    h = T.relu(T.add_rowvec(T.matmul(h, lp["W1"]), lp["b1"]))
    return T.add_rowvec(T.matmul(h, lp["W2"]), lp["b2"])


def _check_gate(g):
    val = g.item() if isinstance(g, Tensor) else float(g)
    if not 0.0 <= val <= 1.0:
        raise ContractError(f"gate value {val} outside [0, 1]")
    return val


def _apply_gate(x, branch_fn, gate):
    """x + gate * branch(x), skipping branch evaluation for a hard 0 gate."""
    val = _check_gate(gate)
    if not isinstance(gate, Tensor):
        if val == 0.0:
            return x
        if val == 1.0:
            return T.add(x, branch_fn(x))
        return T.add(x, T.scale(branch_fn(x), val))
    return T.add(x, T.mul(gate, branch_fn(x)))


def i3d_layer(x, lp, g_mha, g_ffn, valid_len, config):
    y = _apply_gate(x, lambda t: mha_block(t, lp, valid_len, config), g_mha)
    return _apply_gate(y, lambda t: ffn_block(t, lp), g_ffn)


def encode_utterance(params, config, feats, valid_len, policy, intermediates=None):
    """Run the frontend and all gated layers for one utterance.

    ``policy`` supplies the 2N gate values (see gating.GatePolicy).  When
    ``intermediates`` is a dict, layer outputs are stored under their 1-based
    index (used by the intermediate CTC head).
    """
    x, vlen = frontend(feats, valid_len, params["frontend.W"], params["frontend.b"], config)
    policy.begin_utterance()
    for l in range(config.num_layers):
        pooled = None
        if policy.needs_pooled(l):
            pooled = T.masked_mean_pool(x, vlen)
        g_mha, g_ffn = policy.gates(l, pooled)
        lp = layer_params(params, l)
        x = i3d_layer(x, lp, g_mha, g_ffn, vlen, config)
        if intermediates is not None:
            intermediates[l + 1] = x
    return x, vlen


def layer_params(params, index):
    prefix = f"layers.{index}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


# ---------------------------------------------------------------------------
# parameter construction


LAYER_PARAM_NAMES = (
    "ln1.g", "ln1.b", "Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo",
    "ln2.g", "ln2.b", "W1", "b1", "W2", "b2",
)


def _init_matrix(rng, fan_in, fan_out):
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))


def init_layer_params(rng, config):
    d, f = config.model_dim, config.ffn_dim
    out = {}
    out["ln1.g"] = np.ones(d)
    out["ln1.b"] = np.zeros(d)
    for name in ("Wq", "Wk", "Wv", "Wo"):
        out[name] = _init_matrix(rng, d, d)
    for name in ("bq", "bk", "bv", "bo"):
        out[name] = np.zeros(d)
    out["ln2.g"] = np.ones(d)
    out["ln2.b"] = np.zeros(d)
    out["W1"] = _init_matrix(rng, d, f)
    out["b1"] = np.zeros(f)
    out["W2"] = _init_matrix(rng, f, d)
    out["b2"] = np.zeros(d)
    return out


def init_encoder_params(rng, config, feat_dim, vocab_size, use_interctc=False):
    """All trainable arrays (numpy) keyed by dotted name; predictors excluded."""
    d = config.model_dim
    arrays = {}
    arrays["frontend.W"] = _init_matrix(rng, config.subsample_factor * feat_dim, d)
    arrays["frontend.b"] = np.zeros(d)
    for l in range(config.num_layers):
        for name, arr in init_layer_params(rng, config).items():
            arrays[f"layers.{l}.{name}"] = arr
    arrays["final_ln.g"] = np.ones(d)
    arrays["final_ln.b"] = np.zeros(d)
    arrays["head.W"] = _init_matrix(rng, d, vocab_size)
    arrays["head.b"] = np.zeros(vocab_size)
    if use_interctc:
        arrays["inter_head.W"] = _init_matrix(rng, d, vocab_size)
        arrays["inter_head.b"] = np.zeros(vocab_size)
    return arrays


def as_tensors(arrays):
    return {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}


def output_log_probs(params, enc, head="head"):
    """Final layer norm, vocabulary projection, log-softmax rows."""
    h = T.layer_norm(enc, params["final_ln.g"], params["final_ln.b"])
    logits = T.add_rowvec(T.matmul(h, params[f"{head}.W"]), params[f"{head}.b"])
    return T.log_softmax(logits, axis=1)
