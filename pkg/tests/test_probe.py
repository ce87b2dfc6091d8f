import logging

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from asit.config import ProbeConfig
from asit.errors import DegenerateSplitError
from asit.probe import (
    EvalReport,
    average_precision,
    extract_features,
    finetune,
    fit_linear,
    linear_probe,
    mean_average_precision,
    per_class_average_precision,
)
from asit.train import TwinModelState
from asit.vit import BackboneConfig, VisionTransformer

import oracles
from conftest import small_config


# -- mAP -----------------------------------------------------------------------------


def test_ap_examples():
    assert average_precision([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(0.8333333333333333, abs=1e-15)
    assert average_precision([0.9, 0.8, 0.7], [0, 0, 1]) == pytest.approx(1 / 3, abs=1e-15)
    scores = np.array([[0.9, 0.1], [0.8, 0.2], [0.1, 0.7]])
    targets = np.array([[1, 0], [1, 0], [0, 1]])
    assert mean_average_precision(scores, targets) == 1.0


def test_ties_break_by_index():
    assert average_precision([0.5, 0.5, 0.5], [0, 0, 1]) == pytest.approx(1 / 3)
    assert average_precision([0.5, 0.5, 0.5], [1, 0, 0]) == 1.0


@st.composite
def score_matrices(draw):
    n = draw(st.integers(1, 7))
    c = draw(st.integers(1, 4))
    scores = draw(st.lists(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0, 0.1, 0.9]), min_size=n * c, max_size=n * c))
    targets = draw(st.lists(st.booleans(), min_size=n * c, max_size=n * c))
    t = np.array(targets).reshape(n, c)
    t[0] = True  # at least one positive per class
    return np.array(scores).reshape(n, c), t


@settings(max_examples=80, deadline=None)
@given(score_matrices())
def test_map_matches_exhaustive_ranking(data):
    scores, targets = data
    assert abs(mean_average_precision(scores, targets) - oracles.mean_ap_exhaustive(scores, targets)) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(score_matrices())
def test_map_invariant_to_increasing_maps(data):
    scores, targets = data
    ref = mean_average_precision(scores, targets)
    for f in (np.exp, lambda s: s**3 + 2 * s, lambda s: 10 * s - 4):
        assert mean_average_precision(f(scores), targets) == pytest.approx(ref, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.booleans(), min_size=2, max_size=10), st.data())
def test_promoting_a_positive_never_hurts(targets, data):
    targets = np.array(targets)
    if not targets.any():
        targets[0] = True
    n = len(targets)
    scores = np.arange(n, 0, -1, dtype=float)  # rank order == index order
    pos = data.draw(st.sampled_from(np.flatnonzero(targets).tolist()))
    if pos == 0:
        return
    swapped = scores.copy()
    swapped[[pos - 1, pos]] = swapped[[pos, pos - 1]]
    assert average_precision(swapped, targets) >= average_precision(scores, targets)


def test_classes_without_positives_are_excluded(caplog):
    scores = np.array([[0.9, 0.2], [0.1, 0.8]])
    targets = np.array([[1, 0], [0, 0]])
    with caplog.at_level(logging.WARNING):
        assert mean_average_precision(scores, targets) == 1.0
    assert "excluded" in caplog.text
    assert np.isnan(per_class_average_precision(scores, targets)[1])


# -- linear probe ----------------------------------------------------------------------


def split(n_train, n_test):
    return np.array(["train"] * n_train + ["test"] * n_test)


def test_separable_toy_is_solved():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 200)
    x = rng.normal(size=(200, 5))
    x[:, 0] += 6 * y - 3
    rep = linear_probe(x, [(int(v),) for v in y], split(150, 50))
    assert rep.value == 1.0 and rep.metric == "accuracy" and len(rep.per_class) == 2


def test_shuffled_labels_sit_at_chance():
    accs = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(1200, 16))
        y = [(int(v),) for v in rng.permutation(np.repeat(np.arange(4), 300))]
        accs.append(linear_probe(x, y, split(800, 400)).value)
    assert abs(np.mean(accs) - 0.25) <= 0.05


def test_duplicated_training_points_leave_the_classifier_unchanged():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(60, 6))
    y = [(int(v),) for v in rng.integers(0, 3, 60)]
    # full batch: the mean loss and its gradient are identical, so the whole trajectory is
    full = ProbeConfig(batch_size=0)
    w1, b1 = fit_linear(x, y, 3, False, full)
    w2, b2 = fit_linear(np.concatenate([x, x]), y + y, 3, False, full)
    np.testing.assert_allclose(w1, w2, atol=1e-12)
    np.testing.assert_allclose(b1, b2, atol=1e-12)
    # minibatches: same minimiser, so both land near it up to SGD noise
    cfg = ProbeConfig(weight_decay=0.1)
    ref_w, ref_b = fit_linear(x, y, 3, False, ProbeConfig(weight_decay=0.1, batch_size=0, epochs=5000))
    q = rng.normal(size=(500, 6))
    ref = q @ ref_w + ref_b
    scale = np.abs(ref).max()
    for xs, ys in ((x, y), (np.concatenate([x, x]), y + y)):
        w, b = fit_linear(xs, ys, 3, False, cfg)
        assert np.abs(q @ w + b - ref).max() < 0.05 * scale
        assert ((q @ w + b).argmax(1) == ref.argmax(1)).mean() > 0.97


def test_missing_training_class_is_degenerate():
    x = np.random.default_rng(0).normal(size=(6, 3))
    y = [(0,), (0,), (1,), (0,), (2,), (1,)]
    with pytest.raises(DegenerateSplitError):
        linear_probe(x, y, split(4, 2))


def test_multilabel_probe_reports_map():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(300, 4))
    y = [tuple(c for c in range(3) if x[i, c] > 0) or (3,) for i in range(300)]
    rep = linear_probe(x, y, split(200, 100), num_classes=4, multilabel=True)
    assert rep.metric == "mAP" and 0.9 < rep.value <= 1.0 and len(rep.per_class) == 4


def test_probe_is_deterministic(tmp_path):
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(80, 5)), [(int(v),) for v in rng.integers(0, 4, 80)]
    y[:4] = [(0,), (1,), (2,), (3,)]
    a = linear_probe(x, y, split(60, 20))
    b = linear_probe(x, y, split(60, 20))
    assert a == b
    a.write(tmp_path / "r.txt")
    back = EvalReport.read(tmp_path / "r.txt")
    assert back.value == a.value and back.per_class == a.per_class and back.metric == a.metric


# -- features --------------------------------------------------------------------------


def test_features_are_deterministic_and_sized():
    cfg = small_config()
    st_ = TwinModelState.create(cfg)
    clips = np.random.default_rng(0).normal(size=(3, 48, 32)).astype(np.float32)
    f1 = extract_features(st_, clips)
    f2 = extract_features(st_, clips)
    assert f1.shape == (3, 16)
    np.testing.assert_array_equal(f1, f2)
    np.testing.assert_array_equal(extract_features(st_, clips[[0, 0]])[0], extract_features(st_, clips[[0, 0]])[1])
    assert extract_features(st_, clips, pooling="mean").shape == (3, 16)


def test_different_weights_give_different_features():
    clips = np.random.default_rng(0).normal(size=(2, 48, 32)).astype(np.float32)
    a = extract_features(TwinModelState.create(small_config(run__seed=0)), clips)
    b = extract_features(TwinModelState.create(small_config(run__seed=1)), clips)
    assert np.linalg.norm(a - b) > 0


def test_variable_length_clips(tmp_path):
    st_ = TwinModelState.create(small_config())
    clips = [np.zeros((40, 32), np.float32), np.ones((64, 32), np.float32)]
    fitted = extract_features(st_, clips, frames=48)
    interp = extract_features(st_, clips)
    assert fitted.shape == interp.shape == (2, 16)


def test_checkpoint_path_loads_teacher(tmp_path):
    st_ = TwinModelState.create(small_config())
    st_.save(tmp_path / "ck")
    clips = np.random.default_rng(0).normal(size=(2, 48, 32)).astype(np.float32)
    np.testing.assert_array_equal(extract_features(tmp_path / "ck", clips), extract_features(st_, clips))


# -- finetuning ------------------------------------------------------------------------


def toy_task(seed=0, n=48):
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], n // 2)
    x = rng.normal(size=(n, 8, 8)).astype(np.float32) * 0.3
    x[y == 1, :4] += 1.0
    x[y == 0, 4:] += 1.0
    order = rng.permutation(n)
    return x[order], [(int(v),) for v in y[order]], split(36, 12)


def toy_backbone():
    torch.manual_seed(0)
    return VisionTransformer(BackboneConfig(depth=1, embed_dim=8, n_heads=2, patch_size=4), (8, 8))


def test_zero_epochs_is_random_head_eval():
    x, y, sp = toy_task()
    cfg = ProbeConfig(finetune_epochs=0)
    a = finetune(toy_backbone(), x, y, sp, cfg, seed=3)
    b = finetune(toy_backbone(), x, y, sp, cfg, seed=3)
    assert a == b and a.extra["best_epoch"] == 0


def test_finetune_is_deterministic():
    x, y, sp = toy_task()
    cfg = ProbeConfig(finetune_epochs=2, finetune_batch_size=8)
    assert finetune(toy_backbone(), x, y, sp, cfg, seed=1) == finetune(toy_backbone(), x, y, sp, cfg, seed=1)


def test_finetune_keeps_up_with_the_probe():
    x, y, sp = toy_task(n=96)
    sp = split(72, 24)
    backbone = toy_backbone()
    probe = linear_probe(extract_features(backbone, x), y, sp)
    tuned = finetune(backbone, x, y, sp, ProbeConfig(finetune_epochs=15, finetune_lr=3e-3, finetune_batch_size=8))
    assert tuned.value >= probe.value - 0.1
    assert tuned.value >= 0.9
