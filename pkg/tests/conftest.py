"""Shared test helpers: finite differences and small model builders."""

import numpy as np
import pytest

from dyndepth import EncoderConfig, Model


def rel_err(fd, an, floor=1e-6):
    """Relative error with a floor so structurally-zero gradients compare sanely."""
    return abs(fd - an) / max(abs(fd), abs(an), floor)


def finite_difference(f, arr, h=1e-5):
    """Central-difference gradient of scalar f() w.r.t. a numpy array edited in place."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f()
        flat[i] = orig - h
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * h)
    return grad


def tiny_config(**overrides):
    base = dict(num_layers=2, model_dim=8, num_heads=2, ffn_dim=16, subsample_factor=2)
    base.update(overrides)
    return EncoderConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def build_model(config, feat_dim=6, vocab_size=4, seed=0, **kwargs):
    return Model.build(config, feat_dim, vocab_size, np.random.default_rng(seed), **kwargs)
