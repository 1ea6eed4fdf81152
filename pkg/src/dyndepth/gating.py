"""Gate prediction, Gumbel-Softmax sampling and threshold binarization.

A gate predictor is a one-hidden-layer MLP over a pooled feature vector.
The local variant owns one MLP per layer and sees that layer's input; the
global variant emits all 2N distributions from the encoder input in a single
pass.  During training a soft sample from each 2-way distribution multiplies
the residual branch directly (no straight-through path); at inference the
execute probability is compared against a fixed threshold beta, with ties
resolving to skip.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DegenerateInputError
from .tensor import Tensor

EXECUTE_BIAS = 3.0  # initial execute-logit offset; fine-tuning starts near dense
GUMBEL_CLAMP = 1e-12


@dataclass
class GateDistribution:
    p_exec: float
    p_skip: float

    def validate(self):
        if abs(self.p_exec + self.p_skip - 1.0) > 1e-9 or min(self.p_exec, self.p_skip) < 0:
            raise ContractError(f"invalid gate distribution ({self.p_exec}, {self.p_skip})")


@dataclass
class GateTrace:
    """Per-utterance record of gate probabilities and realized gates."""

    utterance_id: str
    input_len: int
    p_mha: np.ndarray  # (N,) execute probabilities
    p_ffn: np.ndarray
    g_mha: np.ndarray  # (N,) realized gates, {0,1} at inference, [0,1] soft
    g_ffn: np.ndarray

    @property
    def num_layers(self):
        return len(self.p_mha)

    def executed_mha(self):
        return int(np.sum(self.g_mha > 0))

    def executed_ffn(self):
        return int(np.sum(self.g_ffn > 0))


def sample_gumbel(rng, shape):
    """g = -log(-log(u)), u clamped away from {0, 1}."""
    u = rng.random(shape)
    u = np.clip(u, GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP)
    return -np.log(-np.log(u))


def gumbel_softmax(logits, tau, noise):
    """Soft sample z = softmax((log alpha + g) / tau) for a (2,) logit tensor.

    ``noise`` is the pre-drawn Gumbel vector so tests can inject it.
    """
    log_alpha = T.log_softmax(logits, axis=0)
    perturbed = T.add(log_alpha, Tensor(noise))
    return T.softmax(T.scale(perturbed, 1.0 / tau), axis=0)


def binarize_pair(p_exec, beta):
    """Strict threshold: execute iff p_exec > beta (tie resolves to skip)."""
    if not 0.0 <= beta <= 1.0:
        raise ContractError(f"beta {beta} outside [0, 1]")
    return 1 if p_exec > beta else 0


def binarize(gate_set, beta):
    """gate_set: list of (GateDistribution, GateDistribution) pairs, length N."""
    return [
        (binarize_pair(mha.p_exec, beta), binarize_pair(ffn.p_exec, beta))
        for mha, ffn in gate_set
    ]


# ---------------------------------------------------------------------------
# predictor parameters and forward passes


def init_predictor_params(rng, config):
    """Numpy arrays for the gate predictor MLP(s), execute-biased."""
    d, h, n = config.model_dim, config.predictor_hidden, config.num_layers
    arrays = {}

    def mlp(prefix, out_dim):
        arrays[f"{prefix}.W1"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, h))
        arrays[f"{prefix}.b1"] = np.zeros(h)
        # zero output weights: step-0 logits equal the bias exactly, so every
        # gate starts at the same execute probability and the fine-tuned model
        # binarizes to the dense network before the first update
        arrays[f"{prefix}.W2"] = np.zeros((h, out_dim))
        b2 = np.zeros(out_dim)
        b2[0::2] = EXECUTE_BIAS  # even entries are execute logits
        arrays[f"{prefix}.b2"] = b2

    if config.predictor_kind == "local":
        for l in range(n):
            mlp(f"pred.{l}", 4)
    elif config.predictor_kind == "global":
        mlp("pred", 4 * n)
    else:
        raise ConfigError("predictor_kind 'none' has no predictor parameters")
    return arrays


def _mlp_logits(pooled, params, prefix):
    x = T.reshape(pooled, (1, pooled.shape[0]))
    h = T.relu(T.add_rowvec(T.matmul(x, params[f"{prefix}.W1"]), params[f"{prefix}.b1"]))
    out = T.add_rowvec(T.matmul(h, params[f"{prefix}.W2"]), params[f"{prefix}.b2"])
    return T.reshape(out, (out.shape[1],))


def local_predict(pooled, layer_index, params):
    """Two (2,) probability tensors (execute at index 0) for one layer."""
    logits = _mlp_logits(pooled, params, f"pred.{layer_index}")
    p_mha = T.softmax(T.narrow(logits, 0, 0, 2), axis=0)
    p_ffn = T.softmax(T.narrow(logits, 0, 2, 4), axis=0)
    return p_mha, p_ffn


def global_predict(pooled, params, num_layers):
    """List of N (p_mha, p_ffn) probability tensor pairs from one MLP pass."""
    logits = _mlp_logits(pooled, params, "pred")
    out = []
    for l in range(num_layers):
        base = 4 * l
        p_mha = T.softmax(T.narrow(logits, 0, base, base + 2), axis=0)
        p_ffn = T.softmax(T.narrow(logits, 0, base + 2, base + 4), axis=0)
        out.append((p_mha, p_ffn))
    return out


# ---------------------------------------------------------------------------
# gate policies consumed by encoder.encode_utterance


class GatePolicy:
    """Supplies 2N gate values per utterance, optionally recording a trace."""

    def begin_utterance(self):
        pass

    def needs_pooled(self, layer_index):
        return False

    def gates(self, layer_index, pooled):
        raise NotImplementedError

    def finish(self, utterance_id, input_len):
        """GateTrace for the utterance just encoded, or None."""
        return None


class AllOnesPolicy(GatePolicy):
    """Vanilla Transformer behavior: every module executes."""

    def gates(self, layer_index, pooled):
        return 1.0, 1.0


class ForcedGatePolicy(GatePolicy):
    """Fixed gate values, e.g. all-zeros passthrough or LayerDrop masks."""

    def __init__(self, pairs):
        self.pairs = list(pairs)

    def gates(self, layer_index, pooled):
        return self.pairs[layer_index]


class _PredictorPolicy(GatePolicy):
    def __init__(self, params, config):
        if config.predictor_kind not in ("local", "global"):
            raise ConfigError("predictor policy needs predictor_kind local or global")
        self.params = params
        self.config = config
        self._cached = None
        self.p_mha = []
        self.p_ffn = []
        self.g_mha = []
        self.g_ffn = []

    def begin_utterance(self):
        self._cached = None
        self.p_mha, self.p_ffn, self.g_mha, self.g_ffn = [], [], [], []

    def needs_pooled(self, layer_index):
        if self.config.predictor_kind == "local":
            return True
        return layer_index == 0

    def _distributions(self, layer_index, pooled):
        if self.config.predictor_kind == "local":
            return local_predict(pooled, layer_index, self.params)
        if self._cached is None:
            self._cached = global_predict(pooled, self.params, self.config.num_layers)
        return self._cached[layer_index]

    def finish(self, utterance_id, input_len):
        return GateTrace(
            utterance_id=utterance_id,
            input_len=int(input_len),
            p_mha=np.array(self.p_mha),
            p_ffn=np.array(self.p_ffn),
            g_mha=np.array(self.g_mha),
            g_ffn=np.array(self.g_ffn),
        )


class GumbelTrainPolicy(_PredictorPolicy):
    """Soft Gumbel-Softmax gates for training; keeps them for the utility loss.

    ``noise_fn(layer_index, kind)`` overrides the rng draw (gradient checks).
    """

    def __init__(self, params, config, rng, noise_fn=None):
        super().__init__(params, config)
        self.rng = rng
        self.noise_fn = noise_fn
        self.soft_gates = []
        self._cached_logits = None

    def begin_utterance(self):
        super().begin_utterance()
        self.soft_gates = []
        self._cached_logits = None

    def _noise(self, layer_index, kind):
        if self.noise_fn is not None:
            return self.noise_fn(layer_index, kind)
        return sample_gumbel(self.rng, 2)

    def _logit_group(self, layer_index, pooled):
        if self.config.predictor_kind == "local":
            return _mlp_logits(pooled, self.params, f"pred.{layer_index}")
        if self._cached_logits is None:
            self._cached_logits = _mlp_logits(pooled, self.params, "pred")
        base = 4 * layer_index
        return T.narrow(self._cached_logits, 0, base, base + 4)

    def _soft_gate(self, logits2, layer_index, kind):
        # log_softmax of the raw logits is log alpha; saturated logits stay finite
        z = gumbel_softmax(logits2, self.config.tau, self._noise(layer_index, kind))
        return T.element(z, 0), float(np.exp(T.log_softmax(logits2, axis=0).data[0]))

    def gates(self, layer_index, pooled):
        group = self._logit_group(layer_index, pooled)
        g_mha, pe_mha = self._soft_gate(T.narrow(group, 0, 0, 2), layer_index, "mha")
        g_ffn, pe_ffn = self._soft_gate(T.narrow(group, 0, 2, 4), layer_index, "ffn")
        self.p_mha.append(pe_mha)
        self.p_ffn.append(pe_ffn)
        self.g_mha.append(g_mha.item())
        self.g_ffn.append(g_ffn.item())
        self.soft_gates.append((g_mha, g_ffn))
        return g_mha, g_ffn


class ThresholdPolicy(_PredictorPolicy):
    """Binary gates from the execute probability and a fixed threshold."""

    def __init__(self, params, config, beta=None):
        super().__init__(params, config)
        self.beta = config.beta if beta is None else float(beta)
        if not 0.0 <= self.beta <= 1.0:
            raise ContractError(f"beta {self.beta} outside [0, 1]")

    def gates(self, layer_index, pooled):
        p_mha, p_ffn = self._distributions(layer_index, pooled)
        pe_mha = float(p_mha.data[0])
        pe_ffn = float(p_ffn.data[0])
        g_mha = float(binarize_pair(pe_mha, self.beta))
        g_ffn = float(binarize_pair(pe_ffn, self.beta))
        self.p_mha.append(pe_mha)
        self.p_ffn.append(pe_ffn)
        self.g_mha.append(g_mha)
        self.g_ffn.append(g_ffn)
        return g_mha, g_ffn


# ---------------------------------------------------------------------------
# trace serialization: one CSV row per utterance


def trace_header(num_layers):
    cols = ["utterance_id", "input_len"]
    cols += [f"p_mha_{l + 1}" for l in range(num_layers)]
    cols += [f"p_ffn_{l + 1}" for l in range(num_layers)]
    cols += [f"g_mha_{l + 1}" for l in range(num_layers)]
    cols += [f"g_ffn_{l + 1}" for l in range(num_layers)]
    return cols


def write_traces_csv(path, traces):
    if not traces:
        raise DegenerateInputError("no traces to write")
    n = traces[0].num_layers
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(trace_header(n))
        for tr in traces:
            row = [tr.utterance_id, tr.input_len]
            for vec in (tr.p_mha, tr.p_ffn, tr.g_mha, tr.g_ffn):
                row += [f"{v:.12g}" for v in vec]
            writer.writerow(row)


def read_traces_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "utterance_id":
            raise ConfigError(f"{path}: not a gate trace file")
        n = (len(header) - 2) // 4
        if len(header) != 2 + 4 * n:
            raise ConfigError(f"{path}: malformed header")
        traces = []
        for i, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ConfigError(f"{path}: row {i} has {len(row)} fields, expected {len(header)}")
            try:
                vals = [float(v) for v in row[2:]]
                input_len = int(row[1])
            except ValueError as exc:
                raise ConfigError(f"{path}: row {i}: {exc}") from exc
            traces.append(
                GateTrace(
                    utterance_id=row[0],
                    input_len=input_len,
                    p_mha=np.array(vals[0:n]),
                    p_ffn=np.array(vals[n:2 * n]),
                    g_mha=np.array(vals[2 * n:3 * n]),
                    g_ffn=np.array(vals[3 * n:4 * n]),
                )
            )
    return traces
