"""Training loops: dense, gated fine-tuning, LayerDrop and iterative pruning."""

import re

import numpy as np
import pytest

from dyndepth import EncoderConfig, SyntheticTaskSpec, TrainConfig
from dyndepth.analysis import evaluate
from dyndepth.errors import ConfigError
from dyndepth.gating import ForcedGatePolicy
from dyndepth.training import (
    Adam,
    finetune_i3d,
    iterative_layer_prune,
    layerdrop_mask,
    make_batches,
    remove_layer,
    train_dense,
    train_layerdrop,
)
from dyndepth.tensor import Tensor

from conftest import build_model, tiny_config


def noise_free_task(**overrides):
    base = dict(vocab_size=3, feat_dim=6, min_len=12, max_len=24,
                min_tokens=1, max_tokens=2, noise_std=0.0, seed=5)
    base.update(overrides)
    return SyntheticTaskSpec(**base)


def quick_train_config(**overrides):
    base = dict(epochs=8, lr=5e-3, ft_lr=1e-3, ft_epochs=3, batch_size=8,
                warmup_steps=10)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def small_run():
    """Dense model trained on the noise-free task; reused across tests."""
    spec = noise_free_task()
    train_b, valid_b, test_b = make_batches(spec, {"train": 32, "valid": 8, "test": 8}, 2, 8)
    log = []
    ckpt = train_dense(tiny_config(), quick_train_config(), train_b, valid_b, 0, log)
    return spec, train_b, valid_b, test_b, ckpt, log


# ---------------------------------------------------------------------------
# optimizer


def test_adam_moves_toward_minimum():
    p = Tensor(np.array([5.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    for _ in range(200):
        opt.zero_grad()
        p.grad = 2 * p.data  # d/dp of p^2
        opt.step()
    assert abs(p.data[0]) < 0.1


def test_adam_warmup_scales_first_steps():
    p1 = Tensor(np.array([1.0]), requires_grad=True)
    p2 = Tensor(np.array([1.0]), requires_grad=True)
    cold = Adam({"p": p1}, lr=0.1, warmup=10)
    hot = Adam({"p": p2}, lr=0.1, warmup=0)
    p1.grad = np.array([1.0])
    p2.grad = np.array([1.0])
    cold.step()
    hot.step()
    assert abs(1.0 - p1.data[0]) < abs(1.0 - p2.data[0])


# ---------------------------------------------------------------------------
# dense training


def test_dense_training_reaches_low_ter(small_run):
    spec, train_b, _, _, ckpt, _ = small_run
    report = evaluate(ckpt.to_model(), train_b)
    assert report.token_error_rate == 0.0  # noise-free task is exactly learnable
    assert report.avg_layers == ckpt.config.num_layers


def test_dense_generalizes_below_five_percent(small_run):
    _, _, _, test_b, ckpt, _ = small_run
    report = evaluate(ckpt.to_model(), test_b)
    assert report.token_error_rate < 0.05


def test_dense_loss_decreases_over_first_epochs(small_run):
    *_, log = small_run
    by_epoch = {}
    for line in log:
        m = re.match(r"step=\d+ epoch=(\d+) asr_loss=(\S+)", line)
        if m:
            by_epoch.setdefault(int(m.group(1)), []).append(float(m.group(2)))
    means = [np.mean(by_epoch[e]) for e in sorted(by_epoch)[:3]]
    assert means[2] < means[0]


def test_log_lines_satisfy_total_identity(small_run):
    *_, log = small_run
    checked = 0
    for line in log:
        m = re.match(
            r"step=\d+ epoch=\d+ asr_loss=(\S+) utility_loss=(\S+) total=(\S+) lambda=(\S+)",
            line,
        )
        if not m:
            continue
        asr, util, total, lam = map(float, m.groups())
        assert total == pytest.approx(asr + lam * util, rel=1e-8)
        assert util == 0.0  # dense mode reports zero utility regardless of lambda
        checked += 1
    assert checked > 0


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(lr=1e-3, ft_lr=1e-2).validate()
    with pytest.raises(ConfigError):
        TrainConfig(layerdrop_prob=1.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(lam=-1.0).validate()


# ---------------------------------------------------------------------------
# gated fine-tuning


def test_finetune_requires_predictor_and_matching_architecture(small_run):
    _, train_b, valid_b, _, ckpt, _ = small_run
    enc = tiny_config(predictor_kind="none")
    with pytest.raises(ConfigError):
        finetune_i3d(ckpt, enc, quick_train_config(), train_b, valid_b, 1)
    mismatched = tiny_config(num_layers=3, predictor_kind="global")
    with pytest.raises(ConfigError):
        finetune_i3d(ckpt, mismatched, quick_train_config(), train_b, valid_b, 1)


def test_finetune_lambda_zero_keeps_layers(small_run):
    _, train_b, valid_b, _, ckpt, _ = small_run
    enc = tiny_config(predictor_kind="global")
    log = []
    tuned = finetune_i3d(ckpt, enc, quick_train_config(ft_epochs=2, lam=0.0),
                         train_b, valid_b, 1, log)
    report = evaluate(tuned.to_model(), valid_b)
    # the execute bias dominates with no utility pressure
    assert report.avg_layers == pytest.approx(enc.num_layers, abs=0.3)
    assert any("utility_loss=" in line for line in log)


def test_finetune_step_zero_matches_dense(small_run):
    """Execute-biased init binarizes to all-ones before any update."""
    _, _, valid_b, _, ckpt, _ = small_run
    from dyndepth.gating import init_predictor_params
    from dyndepth.model import Model

    enc = tiny_config(predictor_kind="global")
    arrays = {k: v.copy() for k, v in ckpt.arrays.items()}
    arrays.update(init_predictor_params(np.random.default_rng(1), enc))
    gated = Model(enc, ckpt.feat_dim, ckpt.vocab_size, arrays)
    dense_report = evaluate(ckpt.to_model(), valid_b)
    gated_report = evaluate(gated, valid_b)
    assert gated_report.token_error_rate == dense_report.token_error_rate
    assert gated_report.avg_layers == enc.num_layers


# ---------------------------------------------------------------------------
# layerdrop


def test_layerdrop_mask_frequency_within_3_sigma():
    rng = np.random.default_rng(0)
    n = 10_000
    drops = sum(int((~layerdrop_mask(rng, 4, 0.5)).sum()) for _ in range(n // 4))
    freq = drops / n
    assert abs(freq - 0.5) <= 3 * np.sqrt(0.25 / n)


def test_layerdrop_prob_zero_equals_dense(small_run):
    spec, train_b, valid_b, *_ = small_run
    cfg = quick_train_config(epochs=2)
    dense = train_dense(tiny_config(), cfg, train_b, valid_b, 3)
    dropped = train_layerdrop(tiny_config(), cfg, train_b, valid_b, 3)
    assert set(dense.arrays) == set(dropped.arrays)
    for k in dense.arrays:
        np.testing.assert_array_equal(dense.arrays[k], dropped.arrays[k])


def test_dropped_layer_gets_no_gradient():
    model = build_model(tiny_config(), seed=4)
    spec = noise_free_task()
    batch = make_batches(spec, {"train": 4, "valid": 0, "test": 0}, 2, 4)[0][0]
    policy = ForcedGatePolicy([(0.0, 0.0), (1.0, 1.0)])
    asr, _ = model.batch_losses(batch, policy)
    model.zero_grad()
    asr.backward()
    for k, p in model.params.items():
        if k.startswith("layers.0."):
            assert p.grad is None, k
        elif k.startswith("layers.1."):
            assert p.grad is not None, k
        elif k.startswith(("frontend.W", "head.W", "final_ln.g")):
            assert p.grad is not None and np.any(p.grad != 0), k


# ---------------------------------------------------------------------------
# pruning


def test_remove_layer_renumbers(small_run):
    *_, ckpt, _ = small_run
    smaller = remove_layer(ckpt, 0)
    assert smaller.config.num_layers == ckpt.config.num_layers - 1
    np.testing.assert_array_equal(smaller.arrays["layers.0.Wq"], ckpt.arrays["layers.1.Wq"])
    with pytest.raises(ConfigError):
        remove_layer(ckpt, 9)


def test_remove_layer_rejects_gated_checkpoints():
    model = build_model(tiny_config(predictor_kind="global"), seed=5)
    with pytest.raises(ConfigError):
        remove_layer(model.to_checkpoint(), 0)


def test_prune_to_same_size_returns_input(small_run):
    _, _, valid_b, _, ckpt, _ = small_run
    out = iterative_layer_prune(ckpt, valid_b, ckpt.config.num_layers)
    assert out == [ckpt]


def test_prune_emits_descending_sizes(small_run):
    _, _, valid_b, _, ckpt, _ = small_run
    out = iterative_layer_prune(ckpt, valid_b, 1)
    sizes = [c.config.num_layers for c in out]
    assert sizes == list(range(ckpt.config.num_layers, 0, -1))
    with pytest.raises(ConfigError):
        iterative_layer_prune(ckpt, valid_b, 0)
    with pytest.raises(ConfigError):
        iterative_layer_prune(ckpt, valid_b, 9)


def test_greedy_prune_matches_exhaustive_at_n3():
    spec = noise_free_task(seed=9)
    train_b, valid_b, _ = make_batches(spec, {"train": 24, "valid": 8, "test": 0}, 2, 8)
    enc = tiny_config(num_layers=3)
    ckpt = train_dense(enc, quick_train_config(epochs=3), train_b, valid_b, 6)

    out = iterative_layer_prune(ckpt, valid_b, 1)
    current = ckpt
    for nxt in out[1:]:
        ters = [
            evaluate(remove_layer(current, j).to_model(), valid_b).token_error_rate
            for j in range(current.config.num_layers)
        ]
        best_j = int(np.argmin(ters))  # first minimum, matching the greedy tie rule
        expected = remove_layer(current, best_j)
        assert nxt.config.num_layers == expected.config.num_layers
        for k in expected.arrays:
            np.testing.assert_array_equal(nxt.arrays[k], expected.arrays[k])
        current = nxt
