import numpy as np
import pytest

from bridgekit.model import (PARAM_ORDER, TrainConfig, TrainingDivergedError, VelocityNet, eval_cfg,
                             gradient_check, load_checkpoint, save_checkpoint, time_features, train)
from bridgekit.schedule import Schedule


def gaussian_pairs(rng, n):
    return rng.standard_normal((n, 1)), np.zeros((n, 1))


def small_batch(net, n=16, seed=0, cond=False):
    rng = np.random.default_rng(seed)
    z0 = rng.standard_normal((n, net.dim))
    zT = rng.standard_normal((n, net.dim))
    c = rng.standard_normal((n, net.cond_dim)) if cond else None
    keep = (rng.uniform(size=n) > 0.3).astype(float)
    return net.make_batch(rng.uniform(0.01, 0.99, n), z0, zT, rng.standard_normal((n, net.dim)), c, keep)


def test_time_features_shape_and_values():
    f = time_features(0.5, 3)
    assert f.shape == (3, 8)
    assert f[0, 0] == pytest.approx(1.0) and f[0, 4] == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("param", ["velocity", "posterior_mean"])
def test_gradient_check_all_tensors(param):
    net = VelocityNet(2, Schedule.linear(0.5), cond_dim=3, width=8, parameterization=param, seed=1)
    net.params["cond_scale"] = np.asarray(0.7)
    report = gradient_check(net, small_batch(net, cond=True))
    assert set(report) == set(PARAM_ORDER)
    assert max(report.values()) <= 1e-4


def test_zero_initialised_conditioning_is_bitwise_neutral():
    net = VelocityNet(2, Schedule.linear(0.1), cond_dim=4, width=16)
    z, zT = np.ones((5, 2)), np.zeros((5, 2))
    with_c = net(0.3, z, zT, condition=np.arange(4.0))
    without = net(0.3, z, zT, condition=None)
    assert np.array_equal(with_c, without)


def test_guidance_scale_one_equals_conditional():
    net = VelocityNet(1, Schedule.linear(0.1), cond_dim=2, width=8)
    net.params["cond_scale"] = np.asarray(1.0)
    z, zT, c = np.ones((3, 1)), np.zeros((3, 1)), np.array([1.0, -1.0])
    assert np.array_equal(eval_cfg(net, 0.5, z, zT, c, 1.0, (0, 1)), net(0.5, z, zT, c))
    guided = eval_cfg(net, 0.5, z, zT, c, 3.0, (0, 1))
    assert not np.array_equal(guided, net(0.5, z, zT, c))
    with pytest.raises(ValueError):
        eval_cfg(net, 0.5, z, zT, c, -1.0, (0, 1))


def test_posterior_mean_parameterization_exposes_score():
    net = VelocityNet(1, Schedule.linear(0.5), parameterization="posterior_mean", width=8)
    out = net.evaluate(0.5, np.ones((2, 1)), np.zeros((2, 1)))
    assert net.has_score and out.score is not None and out.posterior_mean is not None
    assert not VelocityNet(1, Schedule.rectified(), parameterization="posterior_mean").has_score
    assert not VelocityNet(1, Schedule.linear(0.5)).has_score


def test_single_vector_evaluation():
    net = VelocityNet(2, Schedule.linear(0.1), width=8)
    assert net(0.5, np.zeros(2), np.zeros(2)).shape == (2,)


def test_training_is_seeded_and_reduces_loss():
    cfg = TrainConfig(batch=64, steps=150, learn_rate=3e-3, eval_every=50, val_size=256)
    sched = Schedule.linear(0.1)
    net_a, trace_a = train(VelocityNet(1, sched, width=16), gaussian_pairs, sched, cfg)
    net_b, trace_b = train(VelocityNet(1, sched, width=16), gaussian_pairs, sched, cfg)
    assert trace_a.train == trace_b.train
    assert all(np.array_equal(net_a.params[k], net_b.params[k]) for k in PARAM_ORDER)
    assert trace_a.val_steps == [50, 100, 150]
    assert trace_a.val[-1] < trace_a.val[0]
    assert len(trace_a.moving_average(100)) == 51


def test_training_divergence_is_reported():
    sched = Schedule.linear(0.1)
    cfg = TrainConfig(batch=8, steps=5)
    with pytest.raises(TrainingDivergedError, match="step 1"):
        train(VelocityNet(1, sched, width=4), lambda rng, n: (np.full((n, 1), np.nan), np.zeros((n, 1))),
              sched, cfg)


def test_training_rejects_schedule_mismatch():
    with pytest.raises(ValueError):
        train(VelocityNet(1, Schedule.linear(0.1)), gaussian_pairs, Schedule.snr(), TrainConfig(steps=1))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(cond_dropout=1.5)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"lr": 1.0})
    cfg = TrainConfig(batch=3, betas=(0.8, 0.9))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_checkpoint_round_trip(tmp_path):
    net = VelocityNet(2, Schedule.snr(), cond_dim=1, width=8, parameterization="posterior_mean", seed=5)
    save_checkpoint(net, tmp_path / "m.bkt")
    back = load_checkpoint(tmp_path / "m.bkt")
    assert back.architecture() == net.architecture() and back.schedule == net.schedule
    for k in PARAM_ORDER:
        assert np.array_equal(back.params[k], net.params[k].astype(np.float32).astype(float))
    save_checkpoint(back, tmp_path / "m2.bkt")
    assert (tmp_path / "m.bkt").read_bytes() == (tmp_path / "m2.bkt").read_bytes()


def test_constant_data_learns_constant_velocity():
    sched = Schedule.rectified()
    net = VelocityNet(1, sched, width=32, seed=2)
    net, _ = train(net, lambda rng, n: (np.full((n, 1), 0.7), np.full((n, 1), -0.4)), sched,
                   TrainConfig(batch=128, steps=2000, learn_rate=3e-3, eval_every=500, val_size=64))
    # with constant endpoints every interpolant state lies on the segment z_t = 0.7 - 1.1 t
    t = np.linspace(0.01, 0.99, 200)
    v = np.concatenate([net(ti, np.array([[0.7 - 1.1 * ti]]), np.array([[-0.4]])) for ti in t])
    assert np.max(np.abs(v - (-0.4 - 0.7))) <= 1e-2


def test_full_condition_dropout_leaves_condition_unused():
    sched = Schedule.linear(0.1)
    net = VelocityNet(1, sched, cond_dim=2, width=16)

    def sampler(rng, n):
        return rng.standard_normal((n, 1)), rng.standard_normal((n, 1)), rng.standard_normal((n, 2))

    net, _ = train(net, sampler, sched, TrainConfig(batch=32, steps=50, cond_dropout=1.0, eval_every=25))
    rng = np.random.default_rng(0)
    z, zT = rng.standard_normal((2, 20, 1))
    base = net(0.4, z, zT, np.zeros(2))
    for c in rng.standard_normal((10, 2)) * 5:
        assert np.max(np.abs(net(0.4, z, zT, c) - base)) <= 1e-6


def test_ema_weights_are_returned():
    sched = Schedule.linear(0.1)
    cfg = TrainConfig(batch=16, steps=20, eval_every=10, ema=0.9)
    net, trace = train(VelocityNet(1, sched, width=8), gaussian_pairs, sched, cfg)
    raw, _ = train(VelocityNet(1, sched, width=8), gaussian_pairs, sched, TrainConfig(batch=16, steps=20,
                                                                                         eval_every=10, ema=0.0))
    assert not np.array_equal(net.params["W1"], raw.params["W1"])
    assert len(trace.val) == 2
    with pytest.raises(ValueError):
        TrainConfig(ema=1.0)


def test_parameterizations_induce_the_same_velocity(trained_1d):
    from bridgekit.oracle import GaussianDomain
    sched = Schedule.linear(0.1)
    dom = GaussianDomain([0.0], [1.0])
    vel, post = trained_1d["velocity"][0], trained_1d["posterior_mean"][0]
    errs = []
    for zT in (-1.0, 0.0, 1.0):
        zT = np.array([zT])
        for t in np.linspace(0.05, 0.95, 19):
            mean, var = dom.marginal(t, zT, sched)
            z = (mean + np.sqrt(var) * np.linspace(-2, 2, 9))[:, None]
            errs.append(vel(t, z, zT) - post(t, z, zT))
    assert np.sqrt(np.mean(np.concatenate(errs) ** 2)) <= 0.1
