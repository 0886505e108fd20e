import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noisegen import numerics as nx
from noisegen.model import (
    MODULATED_BLOCKS,
    CameraSettings,
    ModelConfig,
    VocabularyError,
    _encode,
    apply_affine,
    camera_features,
    check_params,
    condition_vector,
    eps_theta,
    init_params,
    mcam_features,
    parameter_count,
    parameter_manifest,
    sinusoidal_embed,
    tccam,
)
from gradcheck import check

CFG = ModelConfig()
CS = CameraSettings(800, 0.01, "sensorA")


def test_camera_settings_validation():
    with pytest.raises(ValueError):
        CameraSettings(0, 0.01, "sensorA")
    with pytest.raises(ValueError):
        CameraSettings(100, -1, "sensorA")
    with pytest.raises(ValueError):
        CameraSettings(100, 0.01, "sensorA", brightness_mode="dim")
    assert CameraSettings(100, 0.01, "sensorA", color_temp=50_000).color_temp == 10_000
    assert CameraSettings(100, 0.01, "sensorA", color_temp=10).color_temp == 2_000


def test_camera_settings_roundtrip():
    cs = CameraSettings(3200, 0.004, "sensorB", 3000, "low")
    assert CameraSettings.from_dict(cs.to_dict()) == cs


# --- embeddings --------------------------------------------------------------


def test_sinusoidal_zero_phase():
    e = sinusoidal_embed(0, 32)
    assert e.shape == (32,)
    np.testing.assert_array_equal(e[0::2], 0.0)
    np.testing.assert_array_equal(e[1::2], 1.0)


def test_sinusoidal_first_component():
    assert sinusoidal_embed(1, 32)[0] == pytest.approx(0.841471, abs=1e-6)


def test_sinusoidal_frequency_ladder():
    e = sinusoidal_embed(np.array([1.0]), 8)[0]
    freqs = np.arctan2(e[0::2], e[1::2])
    np.testing.assert_allclose(freqs, [1.0, 10000 ** (-1 / 3), 10000 ** (-2 / 3), 1e-4], rtol=1e-9)


def test_sinusoidal_rejects_odd():
    with pytest.raises(ValueError):
        sinusoidal_embed(3, 7)


def test_camera_feature_anchors():
    f = camera_features(CameraSettings(100, 0.001, "sensorB", 10_000, "high"), CFG)
    assert f[0] == 0.0 and f[1] == 0.0
    np.testing.assert_array_equal(f[2:4], [0, 1])
    assert f[4] == 1.0
    np.testing.assert_array_equal(f[5:], [0, 0, 1])
    assert camera_features(CameraSettings(100, 0.01, "sensorA", 2000), CFG)[4] == 0.0


def test_camera_feature_length():
    cfg = ModelConfig(sensor_vocab=("a", "b", "c", "d", "e"))
    assert cfg.camera_feature_dim == 11
    assert camera_features(CameraSettings(100, 0.01, "c"), cfg).shape == (11,)


def test_unknown_sensor_lists_vocab():
    with pytest.raises(VocabularyError, match="sensorA"):
        camera_features(CameraSettings(100, 0.01, "sensorZ"), CFG)


# --- parameters --------------------------------------------------------------


def test_parameter_count_locked():
    assert parameter_count(CFG) == 520_243


def test_manifest_names():
    names = set(parameter_manifest(CFG))
    for block in ("enc1", "enc2", "enc3", "clean1", "clean2", "clean3", "mid", "dec1", "dec2", "dec3"):
        assert f"{block}.conv1.weight" in names
    for block in MODULATED_BLOCKS:
        assert f"film.{block}.l3.weight" in names
    assert not any(n.startswith("film.clean") for n in names)


def test_check_params_detects_drift():
    p = init_params(CFG, 0)
    check_params(p, CFG)
    extra = dict(p, bogus=np.zeros(1))
    with pytest.raises(KeyError):
        check_params(extra, CFG)
    missing = dict(p)
    del missing["out.bias"]
    with pytest.raises(KeyError):
        check_params(missing, CFG)
    bad = dict(p, **{"out.bias": np.zeros(4, np.float32)})
    with pytest.raises(nx.DimensionError):
        check_params(bad, CFG)


# --- TCCAM -------------------------------------------------------------------


def test_fresh_heads_are_identity():
    p = init_params(CFG, 0)
    cond = condition_vector(np.array([5, 150]), [CS, CameraSettings(3200, 0.002, "sensorB")], p, CFG)
    for block, (cin, cout) in [("enc1", (3, 16)), ("enc3", (32, 64)), ("dec2", (96, 32))]:
        g, b = tccam(cond, p, block)
        assert g.shape == (2, cout) and b.shape == (2, cout)
        np.testing.assert_array_equal(g, 1.0)
        np.testing.assert_array_equal(b, 0.0)


def test_tccam_unknown_layer():
    p = init_params(CFG, 0)
    with pytest.raises(KeyError):
        tccam(np.zeros((1, 32), np.float32), p, "clean1")


def test_apply_affine_examples():
    f = np.full((1, 2, 3, 3), 0.5)
    np.testing.assert_array_equal(apply_affine(f, np.ones(2), np.zeros(2)), f)
    np.testing.assert_array_equal(apply_affine(f, np.full(2, 2.0), np.full(2, -1.0)), 0.0)
    with pytest.raises(nx.DimensionError):
        apply_affine(f, np.ones(3), np.zeros(3))


def _small_cfg():
    return ModelConfig(base_channels=4, time_embed_dim=8, cs_embed_dim=6, mlp_hidden=5)


def _random_params(cfg, seed):
    """Init plus nonzero heads and biases so every path carries gradient."""
    rng = np.random.default_rng(seed)
    p = init_params(cfg, rng, dtype=np.float64)
    for k in p:
        if k.endswith(".bias") or (k.startswith("film.") and ".l3." in k):
            p[k] = 0.3 * rng.standard_normal(p[k].shape)
    return p


@pytest.mark.parametrize("seed", range(20))
def test_tccam_affine_gradcheck(seed):
    cfg = _small_cfg()
    p = _random_params(cfg, seed)
    rng = np.random.default_rng(seed)
    feats = rng.standard_normal((2, cfg.base_channels, 4, 4))
    names = ["film.enc1.l1.weight", "film.enc1.l3.weight", "film.enc1.l3.bias"]

    def fn(f, w1, w3, b3):
        q = dict(p, **{names[0]: w1, names[1]: w3, names[2]: b3})
        cond = condition_vector(np.array([3, 17]), [CS, CS], q, cfg)
        g, b = tccam(cond, q, "enc1")
        return apply_affine(f, g, b)

    assert check(fn, [feats] + [p[n] for n in names], rng) < 1e-4


# --- MCAM / network ----------------------------------------------------------


def test_mcam_shapes():
    p = init_params(CFG, 0)
    feats = mcam_features(np.zeros((1, 3, 16, 16), np.float32), p)
    assert [f.shape[1:] for f in feats] == [(16, 16, 16), (32, 8, 8), (64, 4, 4)]


def test_mcam_zero_image_zero_features():
    p = init_params(CFG, 0)
    for f in mcam_features(np.zeros((2, 3, 8, 8), np.float32), p):
        np.testing.assert_array_equal(f, 0.0)


def test_clean_encoder_not_shared():
    p = init_params(CFG, 0)
    x = np.random.default_rng(0).standard_normal((1, 3, 8, 8)).astype(np.float32)
    clean = mcam_features(x, p)
    noisy = _encode(x, p, "enc")
    assert not np.allclose(clean[0], noisy[0])


def test_mcam_rejects_bad_extent():
    p = init_params(CFG, 0)
    with pytest.raises(nx.DimensionError):
        mcam_features(np.zeros((1, 3, 10, 8), np.float32), p)


def test_eps_theta_shape_and_determinism():
    p = init_params(CFG, 1)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 3, 16, 16)).astype(np.float32)
    s = rng.uniform(-1, 1, (1, 3, 16, 16)).astype(np.float32)
    a = eps_theta(x, 10, s, CS, p, CFG)
    b = eps_theta(x, 10, s, CS, p, CFG)
    assert a.shape == x.shape and a.dtype == np.float32
    np.testing.assert_array_equal(a, b)


def test_eps_theta_invariant_to_conditioning_at_init():
    p = init_params(CFG, 2)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    s = rng.uniform(-1, 1, (2, 3, 8, 8)).astype(np.float32)
    a = eps_theta(x, np.array([1, 2]), s, [CS, CS], p, CFG)
    b = eps_theta(x, np.array([199, 50]), s, [CameraSettings(100, 0.1, "sensorB", 2500, "low")] * 2, p, CFG)
    np.testing.assert_array_equal(a, b)


def test_eps_theta_depends_on_iso_once_heads_are_nonzero():
    p = _random_params(ModelConfig(), 3)
    p = {k: v.astype(np.float32) for k, v in p.items()}
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 3, 8, 8)).astype(np.float32)
    s = rng.uniform(-1, 1, (1, 3, 8, 8)).astype(np.float32)
    a = eps_theta(x, 5, s, CameraSettings(100, 0.01, "sensorA"), p, CFG)
    b = eps_theta(x, 5, s, CameraSettings(3200, 0.01, "sensorA"), p, CFG)
    assert not np.allclose(a, b)


def test_eps_theta_shape_errors():
    p = init_params(CFG, 0)
    with pytest.raises(nx.DimensionError):
        eps_theta(np.zeros((1, 3, 8, 8)), 1, np.zeros((1, 3, 16, 16)), CS, p, CFG)
    with pytest.raises(nx.DimensionError):
        eps_theta(np.zeros((1, 3, 6, 8)), 1, np.zeros((1, 3, 6, 8)), CS, p, CFG)


def test_full_model_gradcheck():
    """Every parameter tensor and both image inputs, sampled coordinates, 1x3x8x8."""
    cfg = CFG
    rng = np.random.default_rng(7)
    p = _random_params(cfg, 7)
    names = list(p)
    x = rng.standard_normal((1, 3, 8, 8))
    s = rng.uniform(-1, 1, (1, 3, 8, 8))

    def fn(x, s, *vals):
        return eps_theta(x, 37, s, CS, dict(zip(names, vals)), cfg)

    err = check(fn, [x, s] + [p[n] for n in names], rng, coords=3)
    assert err < 1e-3


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([2, 4, 8, 32, 64]))
def test_sinusoidal_bounded(t, dim):
    e = sinusoidal_embed(t, dim)
    assert e.shape == (dim,)
    np.testing.assert_allclose(e[0::2] ** 2 + e[1::2] ** 2, 1.0, rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(1, 1e6), st.floats(1e-5, 10), st.floats(0, 20_000), st.sampled_from(["low", "normal", "high"]))
def test_camera_features_finite_and_one_hot(iso, ss, ct, mode):
    f = camera_features(CameraSettings(iso, ss, "sensorB", ct, mode), CFG)
    assert np.all(np.isfinite(f))
    assert f[2:4].sum() == 1 and f[5:].sum() == 1
    assert 0.0 <= f[4] <= 1.0
    assert f[0] == pytest.approx(math.log2(iso / 100))
