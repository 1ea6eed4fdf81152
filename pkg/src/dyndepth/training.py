"""Training loops: dense pretraining, gated fine-tuning, LayerDrop, pruning."""

from __future__ import annotations

import copy
from dataclasses import dataclass, asdict

import numpy as np

from .analysis import evaluate
from .errors import ConfigError, NonFiniteError, TrainingDivergedError
from .gating import ForcedGatePolicy
from .losses import total_loss
from .model import Checkpoint, Model


@dataclass
class TrainConfig:
    epochs: int = 8
    lr: float = 3e-3
    ft_lr: float = 1e-3
    ft_epochs: int = 8
    batch_size: int = 8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_steps: int = 30
    lam: float = 0.0
    layerdrop_prob: float = 0.0
    use_interctc: bool = False
    inter_layer: int | None = None

    def validate(self):
        if self.epochs < 1 or self.ft_epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.ft_lr > self.lr:
            raise ConfigError("fine-tune lr must not exceed pretrain lr")
        if not 0.0 <= self.layerdrop_prob < 1.0:
            raise ConfigError("layerdrop_prob must be in [0, 1)")
        if self.lam < 0:
            raise ConfigError("lambda must be nonnegative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        cfg = cls(**d)
        cfg.validate()
        return cfg


class Adam:
    """Adaptive moment estimation with optional linear warmup."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, warmup=0):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.warmup = warmup
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        lr = self.lr
        if self.warmup:
            lr *= min(1.0, self.t / self.warmup)
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            if p.grad is None:
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * p.grad
            self.v[k] = b2 * self.v[k] + (1 - b2) * p.grad**2
            m_hat = self.m[k] / (1 - b1**self.t)
            v_hat = self.v[k] / (1 - b2**self.t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _log_line(step, epoch, breakdown):
    return (
        f"step={step} epoch={epoch} asr_loss={breakdown.asr_loss:.10g} "
        f"utility_loss={breakdown.utility_loss:.10g} total={breakdown.total:.10g} "
        f"lambda={breakdown.lam:.10g}"
    )


def _run_epochs(model, opt, train_batches, valid_batches, epochs, lam,
                policy_for_batch, log, start_step=0):
    step = start_step
    for epoch in range(1, epochs + 1):
        for batch in train_batches:
            step += 1
            try:
                policy = policy_for_batch()
                asr, util = model.batch_losses(batch, policy)
                tot, breakdown = total_loss(asr, util, lam)
                opt.zero_grad()
                tot.backward()
                opt.step()
            except NonFiniteError as exc:
                raise TrainingDivergedError(step, str(exc)) from exc
            log.append(_log_line(step, epoch, breakdown))
        if valid_batches:
            report = evaluate(model, valid_batches)
            log.append(
                f"epoch={epoch} valid_ter={report.token_error_rate:.10g} "
                f"avg_layers={report.avg_layers:.10g}"
            )
    return step


def train_dense(enc_config, train_config, train_batches, valid_batches, seed, log=None):
    """Vanilla encoder + CTC; the utility term is identically zero."""
    enc_config = copy.deepcopy(enc_config)
    enc_config.predictor_kind = "none"
    enc_config.validate()
    train_config.validate()
    log = log if log is not None else []
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    if not train_batches:
        raise ConfigError("no training batches")
    feat_dim = train_batches[0].feats.shape[2]
    vocab = _vocab_size(train_batches)
    model = Model.build(enc_config, feat_dim, vocab, rng,
                        use_interctc=train_config.use_interctc,
                        inter_layer=train_config.inter_layer)
    opt = Adam(model.params, train_config.lr, train_config.adam_beta1,
               train_config.adam_beta2, train_config.adam_eps,
               warmup=train_config.warmup_steps)
    step = _run_epochs(model, opt, train_batches, valid_batches,
                       train_config.epochs, 0.0, model.vanilla_policy, log)
    return model.to_checkpoint(step=step, rng_state=rng.bit_generator.state)


def finetune_i3d(dense_ckpt, enc_config, train_config, train_batches, valid_batches,
                 seed, log=None):
    """Initialize from a dense checkpoint, add predictors, optimize Eq-style total loss."""
    enc_config = copy.deepcopy(enc_config)
    if enc_config.predictor_kind not in ("local", "global"):
        raise ConfigError("fine-tuning needs predictor_kind local or global")
    enc_config.validate()
    train_config.validate()
    _check_architecture(dense_ckpt.config, enc_config)
    log = log if log is not None else []
    rng = np.random.default_rng(np.random.SeedSequence(seed))

    from .gating import init_predictor_params

    arrays = {k: v.copy() for k, v in dense_ckpt.arrays.items()}
    arrays.update(init_predictor_params(rng, enc_config))
    model = Model(enc_config, dense_ckpt.feat_dim, dense_ckpt.vocab_size, arrays,
                  dense_ckpt.use_interctc, dense_ckpt.inter_layer)
    opt = Adam(model.params, train_config.ft_lr, train_config.adam_beta1,
               train_config.adam_beta2, train_config.adam_eps, warmup=0)
    step = _run_epochs(model, opt, train_batches, valid_batches,
                       train_config.ft_epochs, train_config.lam,
                       lambda: model.train_policy(rng), log)
    return model.to_checkpoint(step=step, rng_state=rng.bit_generator.state)


def train_layerdrop(enc_config, train_config, train_batches, valid_batches, seed, log=None):
    """Dense training with whole layers dropped i.i.d. per step."""
    enc_config = copy.deepcopy(enc_config)
    enc_config.predictor_kind = "none"
    enc_config.validate()
    train_config.validate()
    log = log if log is not None else []
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    if not train_batches:
        raise ConfigError("no training batches")
    feat_dim = train_batches[0].feats.shape[2]
    vocab = _vocab_size(train_batches)
    model = Model.build(enc_config, feat_dim, vocab, rng,
                        use_interctc=train_config.use_interctc,
                        inter_layer=train_config.inter_layer)
    opt = Adam(model.params, train_config.lr, train_config.adam_beta1,
               train_config.adam_beta2, train_config.adam_eps,
               warmup=train_config.warmup_steps)
    p = train_config.layerdrop_prob

    def policy_for_batch():
        keep = layerdrop_mask(rng, enc_config.num_layers, p)
        return ForcedGatePolicy([(1.0, 1.0) if k else (0.0, 0.0) for k in keep])

    step = _run_epochs(model, opt, train_batches, valid_batches,
                       train_config.epochs, 0.0, policy_for_batch, log)
    return model.to_checkpoint(step=step, rng_state=rng.bit_generator.state)


def layerdrop_mask(rng, num_layers, prob):
    """Per-step keep decisions: True keeps the layer, False drops it whole."""
    return rng.random(num_layers) >= prob


def remove_layer(ckpt, layer_index):
    """Checkpoint with one encoder layer removed and the rest renumbered."""
    n = ckpt.config.num_layers
    if not 0 <= layer_index < n:
        raise ConfigError(f"layer index {layer_index} outside [0, {n})")
    if ckpt.config.predictor_kind != "none":
        raise ConfigError("layer pruning applies to dense checkpoints only")
    new = copy.deepcopy(ckpt)
    new.config.num_layers = n - 1
    arrays = {}
    for k, v in ckpt.arrays.items():
        if not k.startswith("layers."):
            arrays[k] = v.copy()
            continue
        idx_str, rest = k[len("layers."):].split(".", 1)
        idx = int(idx_str)
        if idx == layer_index:
            continue
        if idx > layer_index:
            idx -= 1
        arrays[f"layers.{idx}.{rest}"] = v.copy()
    new.arrays = arrays
    if new.use_interctc and new.inter_layer is not None:
        new.inter_layer = min(new.inter_layer, new.config.num_layers)
    return new


def iterative_layer_prune(ckpt, valid_batches, target_layers):
    """Greedy depth reduction: drop whichever layer hurts validation TER least.

    Returns one checkpoint per emitted size, from the input size down to
    ``target_layers``.
    """
    if target_layers < 1:
        raise ConfigError("target_layers must be >= 1")
    if target_layers > ckpt.config.num_layers:
        raise ConfigError("target_layers exceeds current depth")
    out = [ckpt]
    current = ckpt
    while current.config.num_layers > target_layers:
        best = None
        for j in range(current.config.num_layers):
            candidate = remove_layer(current, j)
            ter = evaluate(candidate.to_model(), valid_batches).token_error_rate
            if best is None or ter < best[0]:
                best = (ter, j, candidate)
        current = best[2]
        out.append(current)
    return out


def _vocab_size(batches):
    top = 0
    for batch in batches:
        for targets in batch.targets:
            if targets:
                top = max(top, max(targets))
    if top == 0:
        raise ConfigError("training data contains no target tokens")
    return top + 1


def _check_architecture(dense_cfg, i3d_cfg):
    for attr in ("num_layers", "model_dim", "num_heads", "ffn_dim", "subsample_factor"):
        if getattr(dense_cfg, attr) != getattr(i3d_cfg, attr):
            raise ConfigError(
                f"architecture mismatch on {attr}: dense "
                f"{getattr(dense_cfg, attr)} vs fine-tune {getattr(i3d_cfg, attr)}"
            )


def make_batches(spec, counts, subsample_factor, batch_size):
    """(train, valid, test) batch lists from one task spec.

    Split utterances come from one deterministic stream; counts is a dict with
    train/valid/test sizes.
    """
    from .data import batchify, generate_utterances

    total = counts["train"] + counts["valid"] + counts["test"]
    utts = generate_utterances(spec, total, subsample_factor)
    a, b = counts["train"], counts["train"] + counts["valid"]
    return (
        batchify(utts[:a], batch_size),
        batchify(utts[a:b], batch_size),
        batchify(utts[b:], batch_size),
    )
