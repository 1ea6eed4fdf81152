"""Model bundle (encoder + heads + optional gate predictors) and checkpoints."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .container import read_container, write_container
from .encoder import (
    EncoderConfig,
    encode_utterance,
    init_encoder_params,
    output_log_probs,
)
from .errors import ConfigError
from .gating import (
    AllOnesPolicy,
    GumbelTrainPolicy,
    ThresholdPolicy,
    init_predictor_params,
)
from .losses import combine_interctc, ctc_loss, interctc_loss, utility_loss
from .tensor import Tensor


class Model:
    """Owns the parameter tensors and runs per-utterance forward passes."""

    def __init__(self, config, feat_dim, vocab_size, arrays,
                 use_interctc=False, inter_layer=None):
        config.validate()
        self.config = config
        self.feat_dim = int(feat_dim)
        self.vocab_size = int(vocab_size)
        self.use_interctc = bool(use_interctc)
        self.inter_layer = inter_layer
        if self.use_interctc:
            if inter_layer is None:
                self.inter_layer = max(1, config.num_layers // 2)
            if not 1 <= self.inter_layer <= config.num_layers:
                raise ConfigError(f"inter_layer {self.inter_layer} outside [1, N]")
        self.params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}

    @classmethod
    def build(cls, config, feat_dim, vocab_size, rng, use_interctc=False, inter_layer=None):
        config.validate()
        arrays = init_encoder_params(rng, config, feat_dim, vocab_size, use_interctc)
        if config.predictor_kind != "none":
            arrays.update(init_predictor_params(rng, config))
        return cls(config, feat_dim, vocab_size, arrays, use_interctc, inter_layer)

    def arrays(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    # policies -------------------------------------------------------------

    def vanilla_policy(self):
        return AllOnesPolicy()

    def train_policy(self, rng, noise_fn=None):
        return GumbelTrainPolicy(self.params, self.config, rng, noise_fn)

    def threshold_policy(self, beta=None):
        if self.config.predictor_kind == "none":
            return AllOnesPolicy()
        return ThresholdPolicy(self.params, self.config, beta)

    # forward passes -------------------------------------------------------

    def utterance_forward(self, feats, valid_len, policy):
        """(final log-probs over valid frames, intermediate log-probs or None)."""
        intermediates = {} if self.use_interctc else None
        enc, vlen = encode_utterance(self.params, self.config, feats, valid_len,
                                     policy, intermediates)
        enc_valid = T.narrow(enc, 0, 0, vlen) if vlen < enc.shape[0] else enc
        logp = output_log_probs(self.params, enc_valid)
        inter_logp = None
        if self.use_interctc:
            inter = intermediates[self.inter_layer]
            inter_valid = T.narrow(inter, 0, 0, vlen) if vlen < inter.shape[0] else inter
            inter_logp = output_log_probs(self.params, inter_valid, head="inter_head")
        return logp, inter_logp

    def utterance_asr_loss(self, feats, valid_len, targets, policy):
        logp, inter_logp = self.utterance_forward(feats, valid_len, policy)
        loss = ctc_loss(logp, targets)
        if inter_logp is not None:
            loss = combine_interctc(loss, ctc_loss(inter_logp, targets))
        return loss

    def batch_losses(self, batch, policy, collect_traces=None):
        """Mean ASR loss and mean utility over a batch as tape scalars.

        The utility term is zero (constant) when the policy carries no soft
        gates.  ``collect_traces`` (a list) receives per-utterance GateTraces.
        """
        weights = (self.config.mha_cost_weight, self.config.ffn_cost_weight)
        asr_total = Tensor(0.0)
        util_total = Tensor(0.0)
        soft = False
        for i in range(len(batch)):
            loss = self.utterance_asr_loss(
                batch.feats[i], batch.lengths[i], batch.targets[i], policy
            )
            asr_total = T.add(asr_total, loss)
            gates = getattr(policy, "soft_gates", None)
            if gates:
                util_total = T.add(util_total, utility_loss(gates, weights))
                soft = True
            if collect_traces is not None:
                trace = policy.finish(batch.utt_ids[i], batch.lengths[i])
                if trace is not None:
                    collect_traces.append(trace)
        inv = 1.0 / len(batch)
        return T.scale(asr_total, inv), T.scale(util_total, inv) if soft else Tensor(0.0)

    def to_checkpoint(self, step=0, rng_state=None):
        return Checkpoint(
            config=copy.deepcopy(self.config),
            feat_dim=self.feat_dim,
            vocab_size=self.vocab_size,
            use_interctc=self.use_interctc,
            inter_layer=self.inter_layer,
            step=step,
            rng_state=rng_state,
            arrays=self.arrays(),
        )


@dataclass
class Checkpoint:
    config: EncoderConfig
    feat_dim: int
    vocab_size: int
    use_interctc: bool
    inter_layer: int | None
    step: int
    rng_state: dict | None
    arrays: dict

    def to_model(self):
        return Model(
            copy.deepcopy(self.config),
            self.feat_dim,
            self.vocab_size,
            {k: v.copy() for k, v in self.arrays.items()},
            self.use_interctc,
            self.inter_layer,
        )

    def save(self, path):
        manifest = {
            "kind": "checkpoint",
            "encoder": self.config.to_dict(),
            "feat_dim": self.feat_dim,
            "vocab_size": self.vocab_size,
            "use_interctc": self.use_interctc,
            "inter_layer": self.inter_layer,
            "step": self.step,
            "rng_state": _encode_rng_state(self.rng_state),
        }
        write_container(path, manifest, self.arrays)

    @classmethod
    def load(cls, path):
        manifest, tensors = read_container(path)
        if manifest.get("kind") != "checkpoint":
            raise ConfigError(f"{path}: not a checkpoint container")
        return cls(
            config=EncoderConfig.from_dict(manifest["encoder"]),
            feat_dim=manifest["feat_dim"],
            vocab_size=manifest["vocab_size"],
            use_interctc=manifest["use_interctc"],
            inter_layer=manifest["inter_layer"],
            step=manifest["step"],
            rng_state=_decode_rng_state(manifest["rng_state"]),
            arrays=tensors,
        )


def _encode_rng_state(state):
    if state is None:
        return None
    # PCG64 state holds arbitrarily large ints; stringify for JSON safety
    enc = copy.deepcopy(state)
    inner = enc.get("state", {})
    for key in list(inner):
        inner[key] = str(inner[key])
    return enc


def _decode_rng_state(state):
    if state is None:
        return None
    dec = copy.deepcopy(state)
    inner = dec.get("state", {})
    for key in list(inner):
        inner[key] = int(inner[key])
    return dec
