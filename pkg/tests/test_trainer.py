import dataclasses

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from vpseg import autodiff as ad
from vpseg.losses import LossWeights, supervised_loss
from vpseg.nets import bind, gradients, init_reg, init_seg, reg_forward, seg_forward, seg_forward_var
from vpseg.synthdata import SynthConfig, generate
from vpseg.trainer import (
    Adam,
    TrainConfig,
    TrainingError,
    TrainState,
    init_state,
    kr_estimate,
    pretrain_regression,
    split_dataset,
    train,
    train_step_critic,
    train_step_seg,
)
from vpseg.vpstd import VPSTDConfig
from vpseg.wasserstein import LinearCritic

SOLVER = VPSTDConfig(epsilon=0.5, lam=0.5, td_iters=2)


@pytest.fixture(scope="module")
def data():
    return generate(SynthConfig(size=16, count=16, seed=2))


def small_cfg(**kw):
    base = dict(epochs=2, batch_size=2, reg_epochs=20, solver=SOLVER, seg_hidden=(4,), seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(variant="vpnet_xx")
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    assert TrainConfig(variant="vpnet_rw").effective_weights.beta == 0.0
    assert not TrainConfig(variant="vpnet_rw").uses_critic
    assert [TrainConfig(variant=v).volume_source for v in ("vpnet", "vpnet_gt", "vpnet_rw", "vpnet_emp")] == [
        "reg", "gt", "reg", "emp"]


def test_split_contract(data):
    s = split_dataset(data, 4, seed=1, n_val=4)
    ids = [id(x) for x in s.labeled + s.validation] + [id(u._sample) for u in s.unlabeled]
    assert sorted(ids) == sorted(id(x) for x in data)
    assert len(s.labeled) == 4 and len(s.validation) == 4 and len(s.unlabeled) == 8
    t = split_dataset(data, 4, seed=1, n_val=4)
    assert [id(x) for x in s.labeled] == [id(x) for x in t.labeled]
    full = split_dataset(data, 12, seed=1, n_val=4)
    assert full.unlabeled == []
    with pytest.raises(ValueError):
        split_dataset(data, 13, seed=1, n_val=4)
    with pytest.raises(ValueError):
        split_dataset(data, 0, seed=1)


def test_hidden_labels_are_audited(data):
    s = split_dataset(data, 4, seed=1, n_val=4)
    assert s.audit.count == 0
    s.unlabeled[0].hidden_volumes()
    s.unlabeled[1].hidden_mask()
    assert s.audit.count == 2


def test_pretrain_contract(data):
    reg = init_reg(3, 0)
    with pytest.raises(ValueError):
        pretrain_regression(reg, [], 5, 1e-2)
    same, hist = pretrain_regression(reg, data[:3], 0, 1e-2)
    assert hist == [] and np.array_equal(same.vector(), reg.vector())
    _, hist = pretrain_regression(reg, data[:3], 60, 1e-3, optimizer="gd")
    assert np.all(np.diff(hist) <= 0)
    with pytest.raises(ValueError):
        pretrain_regression(reg, data[:3], 1, 1e-3, optimizer="lbfgs")


def test_pretrain_fits_identical_images(data):
    s = data[0]
    reg, _ = pretrain_regression(init_reg(3, 0), [s] * 3, 300, 3e-2)
    assert np.abs(reg_forward(reg, s.image) - s.volumes).max() <= 1.0


def make_state(cfg, split):
    return init_state(cfg, split, reg=init_reg(3, 7) if cfg.volume_source == "reg" else None)


def test_zero_weight_step_equals_supervised_step(data):
    split = split_dataset(data, 4, seed=0, n_val=4)
    cfg = small_cfg(weights=LossWeights(0.0, 0.0))
    state = make_state(cfg, split)
    new, loss = train_step_seg(state, split.labeled[:2], split.unlabeled[:2])
    tape = ad.Tape()
    p = bind(state.seg, tape)
    ce = [ad.cross_entropy(seg_forward_var(state.seg, p, s.image, s.volumes, SOLVER, tape), s.mask)
          for s in split.labeled[:2]]
    total = ad.mean(ce)
    tape.backward(total)
    manual = Adam(cfg.lr).step(state.seg, gradients(p))
    assert_array_equal(new.seg.vector(), manual.vector())
    expected = np.mean([supervised_loss(seg_forward(state.seg, s.image, s.volumes, SOLVER), s.mask)
                        for s in split.labeled[:2]])
    assert loss == pytest.approx(expected, abs=1e-14)


def test_rw_step_leaves_critic_alone(data):
    split = split_dataset(data, 4, seed=0, n_val=4)
    state = make_state(small_cfg(variant="vpnet_rw"), split)
    state = dataclasses.replace(state, critic=LinearCritic(np.array([0.01, 0.0, -0.01])))
    after, _ = train_step_seg(state, split.labeled[:2], split.unlabeled[:2])
    assert after.critic is state.critic
    gt = np.array([s.volumes for s in split.labeled])
    same, obj = train_step_critic(after, gt, split.unlabeled[:2])
    assert same is after and obj == 0.0


def test_critic_steps_keep_clip_and_improve_estimate(data):
    split = split_dataset(data, 4, seed=0, n_val=4)
    state = make_state(small_cfg(variant="vpnet_emp", critic_lr=1e-3), split)
    gt = np.array([s.volumes for s in split.labeled])
    estimates = []
    for _ in range(100):
        state, _ = train_step_critic(state, gt, split.unlabeled)
        assert np.abs(state.critic.weights).max() <= state.cfg.clip
        estimates.append(kr_estimate(state.critic, state, split))
    assert np.all(np.diff(estimates) >= -1e-15)
    assert estimates[-1] > 0


def test_gt_variant_reads_hidden_labels_other_variants_do_not(data):
    for variant, expect_reads in (("vpnet", False), ("vpnet_rw", False), ("vpnet_emp", False), ("vpnet_gt", True)):
        split = split_dataset(data, 4, seed=0, n_val=4)
        train(small_cfg(variant=variant, epochs=1), split, reg=init_reg(3, 7))
        assert (split.audit.count > 0) == expect_reads, variant


def test_train_is_deterministic(data):
    runs = []
    for _ in range(2):
        split = split_dataset(data, 4, seed=0, n_val=4)
        seg, reg, critic, hist = train(small_cfg(), split)
        runs.append((seg.vector(), reg.vector(), critic.weights.copy(), hist.records))
    assert_array_equal(runs[0][0], runs[1][0])
    assert_array_equal(runs[0][1], runs[1][1])
    assert_array_equal(runs[0][2], runs[1][2])
    assert runs[0][3] == runs[1][3]


def test_train_without_unlabeled_and_history_csv(data, tmp_path):
    split = split_dataset(data, 12, seed=0, n_val=4)
    _, _, critic, hist = train(small_cfg(epochs=3), split, reg=init_reg(3, 7))
    assert len(hist.records) == 3
    assert np.all(critic.weights == 0)
    hist.to_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,seg_loss,critic_obj,val_dice,lr" and len(lines) == 4


def test_lr_only_halves(data):
    split = split_dataset(data, 4, seed=0, n_val=4)
    _, _, _, hist = train(small_cfg(epochs=6, plateau_patience=1), split, reg=init_reg(3, 7))
    lrs = [r.lr for r in hist.records]
    assert lrs[0] == 1e-3
    for a, b in zip(lrs, lrs[1:]):
        assert b == a or b == a / 2


def test_solver_failure_carries_checkpoint(data):
    split = split_dataset(data, 4, seed=0, n_val=4)
    bad = SOLVER.replace(sinkhorn_max_iter=1, sinkhorn_tol=1e-14)
    with pytest.raises(TrainingError) as info:
        train(small_cfg(solver=bad), split, reg=init_reg(3, 7))
    state, best = info.value.checkpoint
    assert isinstance(state, TrainState)
    assert "epoch 0" in str(info.value)
    assert "batch image labeled[0]" in str(info.value)
