import dataclasses

import numpy as np
import pytest

from beaconopt import evaluation as ev
from beaconopt.beacon_layer import Placement, RegSchedule, TemperatureSchedule
from beaconopt.environment import PropagationParams
from beaconopt.geometry import MapSpec, candidate_locations
from beaconopt.net import NetConfig, init_net
from beaconopt.training import (TrainConfig, TrainingDiverged, load_checkpoint, loss_batch, run, save_checkpoint,
                                init_state, train_inference_only, train_joint)

SPEC = MapSpec("tiny", 1.0, 0.7, [[[0.5, 0.0], [0.5, 0.4]]], 3, 3)
PROP = PropagationParams()
NET = NetConfig(input_dim=2, blocks=1, layers_per_block=2, hidden_width=16)


def cfg(iters=60, switch=40, lam=0.01, seed=0, **kw):
    return TrainConfig(total_iters=iters, batch_size=32, lr_schedule=((0, 0.01),),
                       seed=seed, temperature=TemperatureSchedule(1.0, 1e-3, switch),
                       reg=RegSchedule("fixed", lam), snapshot_period=20, log_period=10, **kw)


def test_loss_batch_examples():
    v = np.zeros((1, 2))
    terms = loss_batch(v, np.array([[0.3, 0.4]]))
    assert terms.loss == pytest.approx(0.25, rel=1e-15)
    assert loss_batch(v, v).loss == 0.0


def test_loss_batch_gradient_fd():
    rng = np.random.default_rng(0)
    v, pred = rng.random((5, 2)), rng.random((5, 2))
    d = loss_batch(v, pred).dpred
    h = 1e-6
    num = np.zeros_like(pred)
    for idx in np.ndindex(pred.shape):
        pp, pm = pred.copy(), pred.copy()
        pp[idx] += h
        pm[idx] -= h
        num[idx] = (loss_batch(v, pp).loss - loss_batch(v, pm).loss) / (2 * h)
    assert np.abs(num - d).max() / np.abs(num).max() < 1e-8


def test_loss_is_mse_plus_reg():
    soft = np.full((4, 3), 1 / 3)
    terms = loss_batch(np.zeros((2, 2)), np.ones((2, 2)), soft, 0.5)
    assert terms.mse == 2.0
    assert terms.reg == pytest.approx(0.5 * 4 * 2 / 3)
    assert terms.loss == terms.mse + terms.reg


def test_joint_training_is_deterministic():
    a = train_joint(SPEC, PROP, NET, cfg())
    b = train_joint(SPEC, PROP, NET, cfg())
    assert [r.to_dict() for r in a.log] == [r.to_dict() for r in b.log]
    np.testing.assert_array_equal(a.placement.slots, b.placement.slots)
    for k in a.net.params:
        assert a.net.params[k].tobytes() == b.net.params[k].tobytes()


def test_different_seed_differs():
    a = train_joint(SPEC, PROP, NET, cfg(seed=0))
    b = train_joint(SPEC, PROP, NET, cfg(seed=1))
    assert a.log[-1].loss != b.log[-1].loss


def test_log_records_and_invariants():
    res = train_joint(SPEC, PROP, NET, cfg())
    assert [r.iter for r in res.log] == [0, 10, 20, 30, 40, 50, 59]
    for r in res.log:
        assert r.mse >= 0
        assert abs(r.loss - (r.mse + r.reg)) < 1e-9
    after = [r.beacon_count for r in res.log if r.iter >= 40]
    assert len(set(after)) == 1
    assert after[0] == res.placement.beacon_count
    assert [it for it, _ in res.snapshots] == [20, 40, 60]


def test_huge_lambda_removes_all_beacons():
    res = train_joint(SPEC, PROP, NET, cfg(iters=200, switch=150, lam=1e3))
    assert res.placement.beacon_count == 0


def test_inference_only_equals_joint_with_switch_at_zero():
    joint = train_joint(SPEC, PROP, NET, cfg(switch=0))
    fixed = train_inference_only(SPEC, PROP, joint.placement, NET, cfg(switch=0))
    # joint mode keeps reporting the (now constant) regularizer; the network path is identical
    assert [r.mse for r in joint.log] == [r.mse for r in fixed.log]
    assert all(r.reg == 0.0 for r in fixed.log)
    for k in joint.net.params:
        assert joint.net.params[k].tobytes() == fixed.net.params[k].tobytes()


def test_zero_iterations_returns_initial_net():
    c = cfg(iters=0, switch=0)
    pl = ev.random_placement(SPEC, 2, 3, np.random.default_rng(0))
    res = train_inference_only(SPEC, PROP, pl, NET, c)
    ref = init_net(NET, np.random.default_rng(np.random.SeedSequence(0).spawn(3)[0]))
    for k in ref.params:
        assert res.net.params[k].tobytes() == ref.params[k].tobytes()
    assert res.log == []


def test_inference_only_rejects_channel_mismatch():
    pl = ev.random_placement(SPEC, 3, 2, np.random.default_rng(0))
    with pytest.raises(ValueError, match="C=3"):
        train_inference_only(SPEC, PROP, pl, NET, cfg())


def test_training_reduces_error_on_single_site():
    spec = MapSpec("one", 1.0, 0.7, [], 1, 1, extent=((0.5, 0.35), (0.5, 0.35)))
    net = NetConfig(input_dim=1, blocks=1, layers_per_block=1, hidden_width=16)
    pl = Placement(candidate_locations(spec), [1], 1, "one")
    c = TrainConfig(total_iters=400, batch_size=64, lr_schedule=((0, 0.01),), seed=3,
                    temperature=TemperatureSchedule(1.0, 0.0, 0), reg=RegSchedule("fixed", 0.0),
                    log_period=50)
    ecfg = ev.EvalConfig(grid_rows=7, grid_cols=10, samples_per_location=5)
    untrained = ev.evaluate(pl, ev.NetPredictor(train_inference_only(
        spec, PROP, pl, net, dataclasses.replace(c, total_iters=0)).net), spec, PROP, ecfg)
    trained = ev.evaluate(pl, ev.NetPredictor(train_inference_only(spec, PROP, pl, net, c).net),
                          spec, PROP, ecfg)
    assert trained.rmse < untrained.rmse


def test_checkpoint_resume_is_bitwise(tmp_path):
    full = train_joint(SPEC, PROP, NET, cfg())
    sites = candidate_locations(SPEC)
    state = init_state(SPEC, NET, cfg())
    state = run(state, SPEC, PROP, cfg(), sites, until=30)
    save_checkpoint(state, tmp_path / "ck", SPEC)
    assert (tmp_path / "ck" / "placement.json").exists()
    resumed = train_joint(SPEC, PROP, NET, cfg(), resume=load_checkpoint(tmp_path / "ck"))
    np.testing.assert_array_equal(resumed.losses, full.losses)
    np.testing.assert_array_equal(resumed.placement.slots, full.placement.slots)
    for k in full.net.params:
        assert resumed.net.params[k].tobytes() == full.net.params[k].tobytes()


def test_config_round_trip_and_validation():
    c = cfg()
    assert TrainConfig.from_dict(c.to_dict()) == c
    assert c.post_switch_iters == 20
    assert c.lr_at(0) == 0.01
    paper = TrainConfig()
    assert paper.lr_at(999_999) == 0.01 and paper.lr_at(1_000_000) == 0.001
    assert paper.post_switch_iters == 200_000
    with pytest.raises(ValueError):
        cfg(iters=10, switch=20)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_record():
    bad = dataclasses.replace(cfg(), lr_schedule=((0, 1e12),))
    with pytest.raises(TrainingDiverged) as exc:
        train_joint(SPEC, PROP, NET, bad)
    rec = exc.value.record
    # the step that produced non-finite values is reported and never applied
    assert exc.value.state.iteration == rec.iter
    assert rec.iter > 0
