import csv
import math

import numpy as np
import pytest
import torch

from asit.data import make_batch
from asit.errors import NumericFault
from asit.train import METRIC_FIELDS, MetricsWriter, TwinModelState, pretrain, steps_per_epoch, train_step

from conftest import small_config


def corpus(n=8, seed=0):
    return np.random.default_rng(seed).normal(size=(n, 48, 32)).astype(np.float32)


def batch_for(cfg, values, ids=(0, 1, 2, 3), epoch=0):
    return make_batch(values, ids, epoch, cfg.run.seed, cfg.corrupt, cfg.backbone.patch_size, cfg.dsp.target_frames)


def snapshot(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def test_teacher_starts_as_copy_and_never_gets_gradients():
    cfg = small_config()
    st = TwinModelState.create(cfg, total_steps=10)
    for a, b in zip(st.teacher.parameters(), st.student.parameters()):
        assert torch.equal(a, b)
        assert not a.requires_grad
    train_step(st, batch_for(cfg, corpus()))
    assert all(p.grad is None for p in st.teacher.parameters())


def test_frozen_lambda_keeps_teacher_bitwise():
    cfg = small_config(distill__ema_start=1.0, distill__ema_end=1.0)
    st = TwinModelState.create(cfg, total_steps=10)
    before = snapshot(st.teacher)
    for _ in range(2):
        train_step(st, batch_for(cfg, corpus()))
    after = snapshot(st.teacher)
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_recon_only_step_moves_teacher_by_one_ema():
    cfg = small_config(train__lcl=False, train__gcl=False)
    st = TwinModelState.create(cfg, total_steps=10)
    phi = snapshot(st.teacher)
    lam = st.schedules()["lambda"]
    row = train_step(st, batch_for(cfg, corpus()))
    assert math.isfinite(row["loss_total"]) and row["loss_total"] == row["loss_recons"]
    assert math.isnan(row["loss_lcl"]) and math.isnan(row["loss_gcl"])
    theta = dict(st.student.named_parameters())
    for name, value in st.teacher.named_parameters():
        expected = lam * phi[name] + (1 - lam) * theta[name].detach()
        torch.testing.assert_close(value, expected, rtol=0, atol=1e-7)


def test_lambda_reaches_one_at_the_last_step():
    cfg = small_config()
    st = TwinModelState.create(cfg, total_steps=20)
    assert st.schedules(0)["lambda"] == cfg.distill.ema_start
    assert st.schedules(19)["lambda"] == 1.0
    assert st.schedules(25)["lambda"] == 1.0
    assert st.schedules(0)["wd"] == 0.04 and st.schedules(19)["wd"] == 0.4


def test_weight_decay_skips_biases_and_norms():
    cfg = small_config()
    st = TwinModelState.create(cfg, total_steps=10)
    train_step(st, batch_for(cfg, corpus()))
    decay, no_decay = st.optimizer.param_groups
    assert all(p.ndim > 1 for p in decay["params"])
    assert all(p.ndim <= 1 for p in no_decay["params"])
    assert decay["weight_decay"] > 0 and no_decay["weight_decay"] == 0


def test_centers_move_toward_teacher_output():
    cfg = small_config()
    st = TwinModelState.create(cfg, total_steps=10)
    train_step(st, batch_for(cfg, corpus()))
    assert st.global_center.abs().sum() > 0 and st.local_center.abs().sum() > 0
    assert not st.global_center.requires_grad


def test_non_finite_loss_is_reported_with_context():
    # recon only, so the teacher (which would fault on its own) is not run
    cfg = small_config(train__lcl=False, train__gcl=False)
    st = TwinModelState.create(cfg, total_steps=10)
    batch = batch_for(cfg, corpus())
    r, c = np.argwhere(batch.pixel_mask[0].numpy())[0]
    batch.clean[0, r, c] = float("nan")
    with pytest.raises(NumericFault) as err:
        train_step(st, batch)
    ctx = err.value.context
    assert ctx["step"] == 0 and ctx["batch_ids"] == [0, 1, 2, 3]
    assert math.isnan(ctx["loss_parts"]["recons"])


def test_teacher_fault_names_block():
    cfg = small_config()
    st = TwinModelState.create(cfg, total_steps=10)
    batch = batch_for(cfg, corpus())
    batch.clean[0, 0, 0] = float("inf")
    with pytest.raises(NumericFault) as err:
        train_step(st, batch)
    assert err.value.context["block"] == 0


def test_checkpoint_resume_is_exact(tmp_path):
    cfg = small_config()
    values, idx = corpus(), np.arange(8)
    total = steps_per_epoch(8, 4) * 2

    straight = TwinModelState.create(cfg, total)
    history = pretrain(straight, values, idx, 2)

    first = TwinModelState.create(cfg, total)
    pretrain(first, values, idx, 1)
    first.save(tmp_path / "ck")
    resumed = TwinModelState.load(tmp_path / "ck")
    assert resumed.step == first.step and resumed.epoch == 1
    pretrain(resumed, values, idx, 2)

    for (k, a), b in zip(straight.student.state_dict().items(), resumed.student.state_dict().values()):
        assert torch.equal(a, b), k
    for a, b in zip(straight.teacher.parameters(), resumed.teacher.parameters()):
        assert torch.equal(a, b)
    assert torch.equal(straight.global_center, resumed.global_center)
    assert torch.equal(straight.local_center, resumed.local_center)
    assert [h["epoch"] for h in history] == [1, 2]


def test_metrics_csv(tmp_path):
    cfg = small_config(train__gcl=False)
    st = TwinModelState.create(cfg, 4)
    with MetricsWriter(tmp_path / "m.csv") as w:
        pretrain(st, corpus(), np.arange(8), 2, w)
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert tuple(rows[0]) == METRIC_FIELDS
    assert len(rows) == 5
    gcl = METRIC_FIELDS.index("loss_gcl")
    assert all(r[gcl] == "" for r in rows[1:])


def test_same_seed_same_trajectory():
    cfg = small_config()
    runs = []
    for _ in range(2):
        st = TwinModelState.create(cfg, 4)
        runs.append([])
        for b in (0, 1):
            runs[-1].append(train_step(st, batch_for(cfg, corpus(), ids=(4 * b, 4 * b + 1, 4 * b + 2, 4 * b + 3))))
    assert runs[0] == runs[1]


def test_double_precision_state():
    cfg = small_config()
    st = TwinModelState.create(cfg, 4, dtype=torch.float64)
    row = train_step(st, batch_for(cfg, corpus()))
    assert math.isfinite(row["loss_total"])
    assert next(st.student.parameters()).dtype == torch.float64


def test_reconstruction_alone_overfits_a_fixed_batch():
    # distillation terms are floored by the teacher's entropy; reconstruction has no such floor
    rng = np.random.default_rng(0)
    t, f = np.arange(48)[:, None], np.arange(32)[None, :]
    values = np.stack([np.sin(t * rng.uniform(0.1, 0.5) + f * rng.uniform(0.1, 0.5)) for _ in range(8)])
    cfg = small_config(train__lcl=False, train__gcl=False, train__base_lr=2e-3, backbone__embed_dim=32,
                       backbone__head_hidden_dim=64, backbone__head_bottleneck_dim=32, backbone__patch_size=8)
    st = TwinModelState.create(cfg, 150)
    batch = batch_for(cfg, values.astype(np.float32))
    losses = [train_step(st, batch)["loss_total"] for _ in range(150)]
    assert losses[-1] < 0.5 * losses[0]
