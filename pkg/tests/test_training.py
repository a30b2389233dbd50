import math

import numpy as np
import pytest

from gmelstm.data import SyntheticSpec, generate_synthetic, to_arrays
from gmelstm.gme import GateController, pass_probability
from gmelstm.model import ModelShape, SequenceModelParams
from gmelstm.training import (Adam, ReinforceConfig, ReinforceState, TrainConfig,
                              log_likelihood_weights, policy_gradient, reinforce_update,
                              reward_factors, surrogate_objective, train_gme, train_supervised,
                              update_baseline)

from conftest import make_arrays


# ------------------------------------------------------------------- Adam

def test_adam_zero_gradient_is_identity():
    opt = Adam()
    params = {"w": np.array([[1.0, -2.0]])}
    out = opt.step(params, {"w": np.zeros((1, 2))})
    assert np.array_equal(out["w"], params["w"]) and opt.t == 1
    opt.step(out, {"w": np.zeros((1, 2))})
    assert opt.t == 2


def test_adam_first_step_by_hand():
    out = Adam(lr=0.0005).step({"w": np.array([[1.0]])}, {"w": np.array([[2.0]])})
    # m_hat = g, v_hat = g^2 after bias correction
    expected = 1.0 - 0.0005 * 2.0 / (2.0 + 1e-8)
    assert out["w"][0, 0] == pytest.approx(expected, abs=1e-15)
    assert out["w"][0, 0] - 1.0 == pytest.approx(-0.0005, rel=1e-7)


def test_adam_constant_gradient_update_converges_to_lr():
    opt = Adam(lr=0.01)
    w = {"w": np.array([[0.0]])}
    for _ in range(200):
        prev = w["w"][0, 0]
        w = opt.step(w, {"w": np.array([[-3.0]])})
    assert w["w"][0, 0] - prev == pytest.approx(0.01, rel=1e-6)


def test_adam_ascend_flips_direction():
    up = Adam(lr=0.1).step({"w": np.zeros((1, 1))}, {"w": np.ones((1, 1))}, ascend=True)
    assert up["w"][0, 0] > 0


def test_adam_nan_gradient_names_tensor():
    with pytest.raises(FloatingPointError, match="head1"):
        Adam().step({"head1": np.zeros((1, 1))}, {"head1": np.array([[np.nan]])})


def test_adam_moments_shapes():
    opt = Adam()
    opt.step({"a": np.zeros((2, 3))}, {"a": np.ones((2, 3))})
    assert opt.m["a"].shape == (2, 3) and np.all(opt.v["a"] >= 0)


# ------------------------------------------------------------- supervised

def _task(seed=0):
    clips = generate_synthetic(SyntheticSpec("keyword", n_clips=60, length=6), seed)
    arr = to_arrays(clips, 6)
    return arr.take(range(40)), arr.take(range(40, 60))


def test_train_supervised_deterministic_and_checkpointed():
    train, val = _task()
    params = SequenceModelParams.init(ModelShape(d_in=13, hidden=6, head_units=5), 0)
    cfg = TrainConfig(lr=5e-3, batch_size=8, max_epochs=8, patience=3, seed=1)
    r1 = train_supervised(params, train, val, cfg)
    r2 = train_supervised(params, train, val, cfg)
    assert r1.history == r2.history
    for k in params.tensors:
        assert np.array_equal(r1.params.tensors[k], r2.params.tensors[k])
    assert r1.best_val_mae <= r1.history[0]["val_mae"]
    assert r1.best_val_mae == min(h["val_mae"] for h in r1.history)


def test_train_supervised_respects_max_steps():
    train, val = _task()
    params = SequenceModelParams.init(ModelShape(d_in=13, hidden=4, head_units=3), 0)
    r = train_supervised(params, train, val, TrainConfig(batch_size=8, max_steps=7))
    assert r.steps == 7


def test_train_supervised_empty_split():
    train, _ = _task()
    params = SequenceModelParams.init(ModelShape(d_in=13, hidden=4, head_units=3), 0)
    with pytest.raises(ValueError):
        train_supervised(params, train.take([]), None)
    with pytest.raises(ValueError):
        train_supervised(params, train, train.take([]))


def test_early_stopping():
    train, val = _task()
    params = SequenceModelParams.init(ModelShape(d_in=13, hidden=4, head_units=3), 0)
    r = train_supervised(params, train, val, TrainConfig(lr=0.05, max_epochs=200, patience=2))
    assert len(r.history) <= r.best_epoch + 2


# -------------------------------------------------------------- REINFORCE

def test_reward_factor_examples():
    assert reward_factors([1.3, 1.3], 1.3).tolist() == [1.0, 1.0]
    assert reward_factors([0.2 + math.log(2)], 0.2)[0] == pytest.approx(0.5, abs=1e-15)
    centered = reward_factors([0.5, 1.0], 0.5, "centered")
    assert centered[0] == 0.0 and centered[1] < 0


def test_update_baseline_examples():
    state = update_baseline(ReinforceState(decay=0.9), [1.0, 1.2])
    assert state.baseline == pytest.approx(1.1, abs=1e-15)
    state = ReinforceState(decay=0.9, baseline=1.0)
    assert update_baseline(state, [0.4, 0.6]).baseline == pytest.approx(0.95, abs=1e-15)
    state = ReinforceState()
    for _ in range(400):
        update_baseline(state, [0.3, 0.3])
    assert state.baseline == pytest.approx(0.3, abs=1e-12)


def test_log_likelihood_weights():
    on, off = log_likelihood_weights(np.array([[1, 0], [1, 1]]), np.array([2.0, 4.0]))
    assert on[:, 0].tolist() == [3.0, 2.0] and off[:, 0].tolist() == [0.0, 1.0]


@pytest.mark.parametrize("decision,direction", [(1, 1), (0, -1)])
def test_single_sample_update_is_monotone(decision, direction):
    ctrl = GateController.init("visual", 1, hidden=4, seed=0)
    x = np.array([[0.8]])
    p0 = pass_probability(ctrl, x)[0]
    state = ReinforceState(baseline=0.5)
    new = reinforce_update(ctrl, x, np.array([[decision]]), [0.9], state, lr=1e-2)
    assert np.sign(pass_probability(new, x)[0] - p0) == direction


def test_probability_clamp_keeps_gradient_finite():
    ctrl = GateController.constant("visual", 1, 1e3)
    grads = policy_gradient(ctrl, np.array([[1.0]]), np.array([[0]]), np.array([1.0]))
    assert all(np.all(np.isfinite(g)) for g in grads.values())
    obj = surrogate_objective(ctrl, np.array([[1.0]]), np.array([[0]]), np.array([1.0]))
    assert obj.item() == pytest.approx(math.log(1e-6), rel=1e-6)


def test_reinforce_update_checks_lengths():
    ctrl = GateController.init("visual", 1, hidden=2)
    with pytest.raises(ValueError):
        reinforce_update(ctrl, np.ones((3, 1)), np.ones((2, 3)), [0.1], ReinforceState())


def test_reinforce_config_validation():
    with pytest.raises(ValueError):
        ReinforceConfig(advantage_mode="bogus")
    with pytest.raises(ValueError):
        ReinforceConfig(decay=1.0)


def test_train_gme_records_rewards_and_is_deterministic():
    train, val = _task(3)
    template = SequenceModelParams.init(ModelShape(d_in=13, hidden=4, head_units=3), 0)
    ctrls = {m: GateController.init(m, d, hidden=4, seed=i)
             for i, (m, d) in enumerate((("acoustic", 3), ("visual", 4)))}
    tc = TrainConfig(lr=5e-3, batch_size=16, max_epochs=3, patience=2)
    rc = ReinforceConfig(lr=1e-2, n_samples=2, epoch_num=2, seed=5)
    r1 = train_gme(ctrls, template, train, val, tc, rc)
    r2 = train_gme(ctrls, template, train, val, tc, rc)
    assert len(r1.rewards) == 4 and r1.rewards == r2.rewards
    assert r1.best_val_mae == min(r["loss"] for r in r1.rewards)
    for m in ctrls:
        assert np.array_equal(r1.controllers[m].tensors["layer1"],
                              r2.controllers[m].tensors["layer1"])
        assert not np.array_equal(r1.controllers[m].tensors["b2"], ctrls[m].tensors["b2"])
    # first epoch's baseline is that epoch's mean loss
    first = [r["loss"] for r in r1.rewards[:2]]
    assert r1.rewards[0]["baseline"] == pytest.approx(np.mean(first))


def test_train_gme_frozen_controllers_unchanged():
    train, val = _task(4)
    template = SequenceModelParams.init(ModelShape(d_in=13, hidden=4, head_units=3), 0)
    ctrls = {"visual": GateController.init("visual", 4, hidden=4, seed=1)}
    r = train_gme(ctrls, template, train, val, TrainConfig(max_epochs=1),
                  ReinforceConfig(n_samples=1, epoch_num=2), update_controllers=False)
    assert np.array_equal(r.controllers["visual"].tensors["layer2"],
                          ctrls["visual"].tensors["layer2"])


def test_train_gme_needs_validation():
    data = make_arrays(n=4, T=3, dims=(13 - 7, 3, 4))
    template = SequenceModelParams.init(ModelShape(d_in=13, hidden=2, head_units=2), 0)
    with pytest.raises(ValueError):
        train_gme({}, template, data, data.take([]))
