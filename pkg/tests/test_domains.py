import numpy as np
import pytest

from bridgekit.domains import (AffineMap, EncoderHandle, IdentityDecoder, TanhDecoder, ToyWorld, WarpedAffineMap,
                               decoder_from_dict, encode, map_from_dict, rotation, sample_pair, translate_pipeline)
from bridgekit.sampler import SamplerConfig
from bridgekit.schedule import Schedule


def world_2d(**kw):
    return ToyWorld(2, AffineMap(2, 0.3, [1.0, 2.0], [0.5, -0.5]), AffineMap(2, np.pi / 2, 1.0, 0.0), **kw)


def test_quarter_turn():
    m = AffineMap(2, np.pi / 2)
    assert np.allclose(m.forward(np.array([1.0, 0.0])), [0.0, 1.0])
    assert np.allclose(rotation(0.0, 1), np.eye(1))


def test_identity_world_pairs_equal_latent():
    w = ToyWorld.from_dict({"dim": 2})
    p = sample_pair(w, 5, 0)
    assert np.array_equal(p.x1, p.y) and np.array_equal(p.x2, p.y)


@pytest.mark.parametrize("m", [AffineMap(2, 0.7, [0.5, 3.0], [1.0, 2.0]),
                               WarpedAffineMap(2, 0.7, [0.5, 3.0], [1.0, 2.0], warp=0.4),
                               WarpedAffineMap(2, -0.2, [1.5, 0.8], 0.0, warp=-0.5)])
def test_maps_invertible_and_lipschitz(m):
    rng = np.random.default_rng(0)
    y1, y2 = rng.standard_normal((2, 10_000, 2)) * 2
    assert np.max(np.abs(m.inverse(m.forward(y1)) - y1)) < 1e-10
    stretch = np.linalg.norm(m.forward(y1) - m.forward(y2), axis=1) / np.linalg.norm(y1 - y2, axis=1)
    assert stretch.max() <= m.lipschitz * (1 + 1e-12)
    x1, x2 = m.forward(y1), m.forward(y2)
    back = np.linalg.norm(m.inverse(x1) - m.inverse(x2), axis=1) / np.linalg.norm(x1 - x2, axis=1)
    assert back.max() <= m.inverse_lipschitz * (1 + 1e-12)


def test_warped_jacobian_matches_finite_differences():
    m = WarpedAffineMap(2, 0.4, [1.0, 2.0], 0.1, warp=0.3)
    y, h = np.array([[0.3, -0.7]]), 1e-6
    fd = np.stack([(m.forward(y + h * e) - m.forward(y - h * e))[0] / (2 * h) for e in np.eye(2)], axis=1)
    assert np.allclose(m.jacobian(y)[0], fd, atol=1e-8)


def test_map_validation():
    with pytest.raises(ValueError):
        AffineMap(2, 0.0, [1.0, 0.0])
    with pytest.raises(ValueError):
        WarpedAffineMap(1, warp=1.0)
    with pytest.raises(ValueError):
        map_from_dict(1, {"type": "spline"})


def test_world_round_trip_and_validation():
    w = ToyWorld(2, AffineMap(2), WarpedAffineMap(2, 0.1, 2.0, 1.0, warp=0.2), prior="mixture", noise2=0.1)
    assert ToyWorld.from_dict(w.to_dict()).to_dict() == w.to_dict()
    with pytest.raises(ValueError):
        ToyWorld.from_dict({"dim": 1, "colour": 3})
    with pytest.raises(ValueError):
        ToyWorld(2, AffineMap(1), AffineMap(2))


def test_pairs_reproducible_and_shared_latent_exact():
    w = world_2d()
    a, b = sample_pair(w, 50, 3), sample_pair(w, 50, 3)
    assert np.array_equal(a.x1, b.x1) and np.array_equal(a.x2, b.x2)
    h = EncoderHandle()
    assert np.allclose(encode(h, w, a.x1, 1), encode(h, w, a.x2, 2), atol=1e-12)


def test_mixture_prior_centers():
    w = ToyWorld.from_dict({"dim": 2, "prior": "mixture"})
    y = w.sample_latent(np.random.default_rng(0), 20000)
    assert np.allclose(np.sort([y[y[:, 0] > 0, 0].mean(), y[y[:, 0] < 0, 0].mean()]), [-2, 2], atol=0.05)


def test_perturbed_encoder_offset_norm_exact():
    w = world_2d()
    p = sample_pair(w, 100, 0)
    exact = encode(EncoderHandle(), w, p.x1, 1)
    off = encode(EncoderHandle("perturbed", 0.1), w, p.x1, 1, np.random.default_rng(0))
    assert np.allclose(np.linalg.norm(off - exact, axis=1), 0.1, atol=1e-12)
    zero = encode(EncoderHandle("perturbed", 0.0), w, p.x1, 1, np.random.default_rng(0))
    assert np.array_equal(zero, exact)
    with pytest.raises(ValueError):
        encode(EncoderHandle("perturbed", 0.1), w, p.x1, 1)


def test_decoders():
    z = np.array([0.5, -2.0])
    assert np.array_equal(IdentityDecoder()(z), z)
    t = TanhDecoder(0.2)
    assert t.lipschitz == pytest.approx(1.2)
    assert decoder_from_dict(t.to_dict())(z) == pytest.approx(z + 0.2 * np.tanh(z))
    assert isinstance(decoder_from_dict(None), IdentityDecoder)
    with pytest.raises(ValueError):
        decoder_from_dict({"type": "mlp"})


def test_oracle_translation_on_noiseless_1d_world():
    w = ToyWorld.from_dict({"dim": 1, "map2": {"scale": [2.0], "shift": [0.5]}})
    pairs = sample_pair(w, 64, 0)
    res = translate_pipeline(w, w.oracle_field(Schedule.linear(0.1)), EncoderHandle(), pairs,
                             SamplerConfig(n_steps=4096))
    assert res.errors.max() <= 5e-3


def test_identical_domains_translation_is_reconstruction():
    w = ToyWorld.from_dict({"dim": 2, "map1": {"angle": 0.3, "scale": [1.0, 2.0]},
                            "map2": {"angle": 0.3, "scale": [1.0, 2.0]}})
    pairs = sample_pair(w, 16, 1)
    res = translate_pipeline(w, w.oracle_field(Schedule.linear(0.1)), EncoderHandle(), pairs,
                             SamplerConfig(n_steps=256))
    assert np.allclose(res.x_hat, pairs.x1, atol=1e-10)


def test_encoder_error_grows_translation_error_within_amplification():
    w = ToyWorld.from_dict({"dim": 2, "map2": {"angle": 0.5, "scale": [1.5, 0.7]}})
    pairs = sample_pair(w, 200, 2)
    f = w.oracle_field(Schedule.linear(0.1))
    cfg = SamplerConfig(n_steps=512)
    small = translate_pipeline(w, f, EncoderHandle("perturbed", 0.1), pairs, cfg, rng=np.random.default_rng(0))
    large = translate_pipeline(w, f, EncoderHandle("perturbed", 0.5), pairs, cfg, rng=np.random.default_rng(0))
    ratio = large.errors.mean() / small.errors.mean()
    # the map of the endpoint to the output is the linear map2, so the ratio is exactly 5 here
    assert 1.0 <= ratio <= 5.0 * 1.01
