import numpy as np
from hypothesis import assume, given, strategies as st
from hypothesis.extra.numpy import arrays

from bridgekit import config as cfgmod
from bridgekit.analysis import cknna
from bridgekit.bridge import score_to_velocity
from bridgekit.domains import AffineMap, EncoderHandle, ToyWorld, WarpedAffineMap, encode
from bridgekit.encoder import RetinaFilter, pca_fit
from bridgekit.io import fmt, pack_tensors, unpack_tensors
from bridgekit.oracle import GaussianDomain, oracle_field
from bridgekit.sampler import SamplerConfig, mix_drifts, mixing_weight
from bridgekit.schedule import EPS, Schedule

finite = st.floats(-5, 5, allow_nan=False)
times = st.floats(EPS, 1 - EPS)
schedules = st.one_of(
    st.builds(Schedule.linear, st.floats(0.01, 2.0)),
    st.builds(Schedule.snr, st.floats(0.05, 1.0), st.floats(2.0, 30.0)),
    st.just(Schedule.rectified()),
)


@given(schedules)
def test_schedule_boundaries(sched):
    for t, expected in ((0.0, (1, 0, 0)), (1.0, (0, 1, 0))):
        assert np.allclose(sched.eval(t), expected, atol=1e-12, rtol=0)


@given(schedules, st.floats(0, 1))
def test_schedule_noise_nonnegative_and_weights_finite(sched, t):
    a, b, g = sched.eval(t)
    assert g >= 0 and np.isfinite(a) and np.isfinite(b)


@given(st.builds(Schedule.snr, st.floats(0.05, 1.0), st.floats(2.0, 30.0)), st.floats(0.01, 0.98), st.floats(1e-3, 0.01))
def test_snr_decreasing(sched, t, dt):
    assert sched.snr_value(t + dt) < sched.snr_value(t)


@given(st.builds(Schedule.linear, st.floats(0.05, 2.0)) | st.builds(Schedule.snr), times,
       arrays(float, 3, elements=finite), arrays(float, 3, elements=finite),
       arrays(float, 3, elements=st.floats(0.01, 3.0)))
def test_score_velocity_round_trip(sched, t, z, zT, var):
    dom = GaussianDomain(np.zeros(3), var)
    out = oracle_field(dom, z, zT, t, sched)
    v = score_to_velocity(out.posterior_mean, zT, t, sched, score=out.score)
    assert np.max(np.abs(v - out.velocity)) <= 1e-10 * max(1.0, np.max(np.abs(out.velocity)))


@given(st.builds(Schedule.linear, st.floats(0.05, 2.0)), times, arrays(float, 2, elements=finite),
       arrays(float, 2, elements=finite))
def test_field_output_score_is_tweedie(sched, t, z, zT):
    out = oracle_field(GaussianDomain(np.zeros(2), [1.0, 0.5]), z, zT, t, sched)
    gamma = sched.eval(t)[2]
    assert np.array_equal(out.score, -out.noise_mean / gamma)


@given(st.floats(0, 1), st.floats(0, 1), finite, finite)
def test_mixed_drift_is_convex_combination(t, t_end, a, b):
    eta = mixing_weight(t, t_end)
    assert 0.0 <= eta <= 1.0
    d = mix_drifts(np.array([a]), np.array([b]), t, t_end)[0]
    assert min(a, b) - 1e-12 <= d <= max(a, b) + 1e-12


@given(st.integers(1, 500), st.floats(0, 0.4), st.floats(0.5, 1.0))
def test_grid_invariants(n, eps, t_start):
    assume(min(t_start, 1 - eps) > eps)
    g = SamplerConfig(n_steps=n, eps=eps, t_start=t_start).grid()
    assert len(g) == n + 1 and np.all(np.diff(g) < 0) and g[-1] == eps


@given(arrays(float, (30, 4), elements=finite), st.integers(0, 2 ** 31))
def test_cknna_bounded(a, seed):
    b = np.random.default_rng(seed).standard_normal((30, 4))
    try:
        value = cknna(a, b, 5)
    except ValueError:
        return
    assert -1 - 1e-9 <= value <= 1 + 1e-9


@given(st.integers(0, 2 ** 31), st.floats(0.1, 10.0))
def test_cknna_rotation_and_scale_invariant(seed, scale):
    # continuous data keeps neighbour rankings free of ties, which a top-k mask needs
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 30, 4))
    q = np.linalg.qr(rng.standard_normal((4, 4)))[0]
    assert abs(cknna(scale * a @ q, b, 5) - cknna(a, b, 5)) <= 1e-8


@given(st.integers(0, 2 ** 31), st.integers(1, 4))
def test_pca_idempotent(seed, n_comp):
    x = np.random.default_rng(seed).standard_normal((60, 5)) * [3, 2, 1.5, 1, 0.5]
    proj = pca_fit(x, n_comp)
    p = proj.project(x)
    assert np.max(np.abs(proj.project(proj.reconstruct(p)) - p)) <= 1e-10
    assert np.max(np.abs(proj.components @ proj.components.T - np.eye(n_comp))) <= 1e-10


@given(st.floats(-100, 100), st.integers(0, 2 ** 31))
def test_retina_offset_invariance(offset, seed):
    img = np.random.default_rng(seed).standard_normal((32, 32))
    f = RetinaFilter(1.0, 1.0, 1)
    assert np.max(np.abs(f.apply(img + offset) - f.apply(img))) <= 1e-10


@given(st.floats(-3, 3), arrays(float, 2, elements=st.floats(0.2, 3.0)), arrays(float, 2, elements=finite),
       st.floats(-0.9, 0.9), arrays(float, (5, 2), elements=finite))
def test_map_inverse(angle, scale, shift, warp, y):
    for m in (AffineMap(2, angle, scale, shift), WarpedAffineMap(2, angle, scale, shift, warp)):
        assert np.allclose(m.inverse(m.forward(y)), y, atol=1e-8)


@given(st.floats(0, 2), st.integers(0, 2 ** 31))
def test_perturbed_encoder_norm(scale, seed):
    w = ToyWorld.from_dict({"dim": 3})
    x = np.random.default_rng(seed).standard_normal((4, 3))
    off = encode(EncoderHandle("perturbed", scale), w, x, 1, np.random.default_rng(seed))
    assert np.allclose(np.linalg.norm(off - x, axis=1), scale, atol=1e-12)


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_float_text_round_trip(x):
    assert float(fmt(x)) == x


@given(arrays(np.float32, st.tuples(st.integers(0, 4), st.integers(1, 3)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_tensor_round_trip(a):
    _, back = unpack_tensors(pack_tensors({}, {"a": a}))
    assert np.array_equal(back["a"], a.astype(float))


@given(st.integers(0, 2 ** 31), st.floats(0.001, 0.999), st.floats(0.0, 5.0), st.integers(1, 5000))
def test_config_round_trip(seed, delta, gamma_max, n):
    cfg = cfgmod.ExperimentConfig(seed=seed, schedule=Schedule.linear(gamma_max),
                                  sampler=SamplerConfig(n_steps=n, finalize="none", seed=seed))
    cfg.analysis["delta"] = delta
    back = cfgmod.loads(cfg.dumps())
    assert back.analysis["delta"] == delta and back.schedule == cfg.schedule and back.sampler == cfg.sampler
    assert back.dumps() == cfg.dumps()
