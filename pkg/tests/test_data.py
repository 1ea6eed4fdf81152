"""Synthetic task generator: determinism, feasibility and file round trips."""

import numpy as np
import pytest

from dyndepth import SyntheticTaskSpec
from dyndepth.data import (
    MIN_SEGMENT_SUBFRAMES,
    batchify,
    generate_task,
    generate_utterances,
    load_dataset,
    save_dataset,
    token_prototypes,
)
from dyndepth.errors import ConfigError
from dyndepth.losses import min_frames


def small_spec(**overrides):
    base = dict(vocab_size=4, feat_dim=6, min_len=12, max_len=30,
                min_tokens=1, max_tokens=2, noise_std=0.1, seed=5)
    base.update(overrides)
    return SyntheticTaskSpec(**base)


def test_same_seed_identical_batches():
    a = generate_task(small_spec(), 16, 2, 4)
    b = generate_task(small_spec(), 16, 2, 4)
    assert len(a) == len(b) == 4
    for ba, bb in zip(a, b):
        np.testing.assert_array_equal(ba.feats, bb.feats)
        assert ba.lengths == bb.lengths
        assert ba.targets == bb.targets
        assert ba.utt_ids == bb.utt_ids


def test_count_zero_empty():
    assert generate_utterances(small_spec(), 0, 2) == []


def test_feasibility_validation():
    with pytest.raises(ConfigError):
        small_spec(max_tokens=10).validate(2)  # 10 tokens need 60 frames > max_len
    with pytest.raises(ConfigError):
        small_spec(vocab_size=1).validate(2)
    with pytest.raises(ConfigError):
        small_spec(min_tokens=3, max_tokens=2).validate(2)
    small_spec().validate(2)


def test_every_utterance_is_ctc_feasible():
    spec = small_spec()
    factor = 2
    for _, feats, targets in generate_utterances(spec, 64, factor):
        t_sub = -(-feats.shape[0] // factor)
        assert t_sub >= min_frames(targets)
        assert spec.min_len <= feats.shape[0] <= spec.max_len
        assert spec.min_tokens <= len(targets) <= spec.max_tokens
        assert all(1 <= t < spec.vocab_size for t in targets)


def test_no_immediate_token_repeats():
    for _, _, targets in generate_utterances(small_spec(max_tokens=4, max_len=60), 64, 2):
        assert all(a != b for a, b in zip(targets, targets[1:]))


def test_length_tracks_token_count():
    utts = generate_utterances(small_spec(max_tokens=4, max_len=60), 200, 2)
    lens = np.array([f.shape[0] for _, f, _ in utts])
    toks = np.array([len(t) for _, _, t in utts])
    assert np.corrcoef(lens, toks)[0, 1] > 0.5


def test_prototypes_are_separated():
    spec = small_spec()
    protos = token_prototypes(spec)
    assert protos.shape == (spec.vocab_size - 1, spec.feat_dim)
    for i in range(len(protos)):
        for j in range(i + 1, len(protos)):
            assert np.linalg.norm(protos[i] - protos[j]) > 1.0


def test_batchify_padding_and_order():
    utts = generate_utterances(small_spec(), 10, 2)
    batches = batchify(utts, 4)
    assert [len(b) for b in batches] == [4, 4, 2]
    first = batches[0]
    assert first.feats.shape[1] == max(first.lengths)
    for i, length in enumerate(first.lengths):
        np.testing.assert_array_equal(first.feats[i, length:], 0.0)
    with pytest.raises(ConfigError):
        batchify(utts, 0)


def test_dataset_round_trip(tmp_path):
    spec = small_spec()
    utts = generate_utterances(spec, 6, 2)
    path = tmp_path / "train.bin"
    save_dataset(path, spec, utts, "train")
    spec2, back = load_dataset(path)
    assert spec2 == spec
    assert len(back) == 6
    for (uid, feats, targets), (uid2, feats2, targets2) in zip(utts, back):
        assert uid == uid2 and targets == targets2
        np.testing.assert_array_equal(feats, feats2)


def test_dataset_rejects_wrong_kind(tmp_path):
    from dyndepth.container import write_container

    path = tmp_path / "other.bin"
    write_container(path, {"kind": "checkpoint"}, {})
    with pytest.raises(ConfigError):
        load_dataset(path)


def test_segment_floor_constant():
    assert MIN_SEGMENT_SUBFRAMES == 3
