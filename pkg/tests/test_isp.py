import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noisegen.isp import (
    BOX_KERNEL,
    BUILTIN_PROFILES,
    ProfileError,
    SensorProfile,
    get_profile,
    isp_pipeline,
    load_profile,
    make_noisy_pair,
    raw_noise,
    save_profile,
)
from noisegen.fixtures import synthetic_clean_patches
from noisegen.metrics import noise_std_curve, spatial_autocorr, white_gaussian_like
from noisegen.model import CameraSettings

CS100 = CameraSettings(100, 0.01, "sensorA")


def identity_profile(**kw):
    return SensorProfile(name="id", read_sigma=kw.pop("read_sigma", 0.0), shot_k=kw.pop("shot_k", 0.0), **kw)


# --- profile validation ------------------------------------------------------


@pytest.mark.parametrize(
    "bad",
    [
        dict(ccm=((1.0, 0.1, 0.0), (0, 1, 0), (0, 0, 1))),
        dict(awb=(1.0, 0.0, 1.0)),
        dict(gamma=0.0),
        dict(read_sigma=-0.1),
        dict(sharpen_amount=-1.0),
        dict(blur_kernel=((0, 0, 0), (0, 2, 0), (0, 0, 0))),
    ],
)
def test_profile_invariants(bad):
    args = dict(name="x", read_sigma=0.01, shot_k=0.0) | bad
    with pytest.raises(ProfileError):
        SensorProfile(**args)


def test_noise_free_profile_rejected_from_file(tmp_path):
    p = tmp_path / "p.json"
    p.write_text(json.dumps({"name": "q", "read_sigma": 0.0, "shot_k": 0.0}))
    with pytest.raises(ProfileError, match="both be 0"):
        load_profile(p)


def test_profile_file_roundtrip(tmp_path):
    for prof in BUILTIN_PROFILES.values():
        save_profile(prof, tmp_path / "p.json")
        assert load_profile(tmp_path / "p.json") == prof


def test_profile_file_errors(tmp_path):
    p = tmp_path / "p.json"
    p.write_text("{not json")
    with pytest.raises(ProfileError):
        load_profile(p)
    p.write_text(json.dumps({"name": "q", "read_sigma": 0.01, "shot_k": 0, "lens": 3}))
    with pytest.raises(ProfileError, match="lens"):
        load_profile(p)
    p.write_text(json.dumps({"name": "q", "shot_k": 0.1}))
    with pytest.raises(ProfileError, match="read_sigma"):
        load_profile(p)


def test_unknown_profile():
    with pytest.raises(ProfileError, match="sensorA"):
        get_profile("sensorQ")
    with pytest.raises(ProfileError):
        make_noisy_pair(np.zeros((3, 4, 4)), CS100, "sensorQ", 0)


# --- raw noise ---------------------------------------------------------------


def test_zero_signal_no_shot_noise():
    prof = identity_profile(shot_k=0.01)
    x = np.zeros((3, 8, 8))
    x[:, 0, 0] = 0.0
    x[:, 4, 4] = 0.5
    out = raw_noise(x, CS100, prof, np.random.default_rng(0))
    assert np.all(out[:, 0, 0] == 0.0)
    assert np.all(out[:, 4, 4] != 0.5)


def test_raw_variance_closed_form():
    prof = identity_profile(shot_k=0.01, read_sigma=0.01)
    x = np.full(100_000, 0.25)
    n = raw_noise(x, CS100, prof, np.random.default_rng(1)) - x
    assert n.var() == pytest.approx(0.01 * 0.25 + 0.0001, rel=0.05)


def test_doubling_iso_quadruples_variance():
    prof = identity_profile(shot_k=0.01, read_sigma=0.01)
    x = np.full(100_000, 0.25)
    v1 = (raw_noise(x, CS100, prof, np.random.default_rng(2)) - x).var()
    v2 = (raw_noise(x, CameraSettings(200, 0.01, "sensorA"), prof, np.random.default_rng(3)) - x).var()
    assert v2 / v1 == pytest.approx(4.0, rel=0.1)


def test_shutter_scales_variance():
    prof = identity_profile(read_sigma=0.01)
    x = np.full(100_000, 0.25)
    v_ref = (raw_noise(x, CS100, prof, np.random.default_rng(4)) - x).var()
    v_short = (raw_noise(x, CameraSettings(100, 0.0025, "sensorA"), prof, np.random.default_rng(5)) - x).var()
    assert v_short / v_ref == pytest.approx(2.0, rel=0.1)


def test_raw_noise_range_and_determinism():
    prof = identity_profile(read_sigma=0.01)
    with pytest.raises(ValueError):
        raw_noise(np.full(3, 1.5), CS100, prof, np.random.default_rng(0))
    a = raw_noise(np.full(9, 0.4), CS100, prof, np.random.default_rng(8))
    b = raw_noise(np.full(9, 0.4), CS100, prof, np.random.default_rng(8))
    np.testing.assert_array_equal(a, b)


# --- ISP ---------------------------------------------------------------------


def test_identity_isp_clamps_only():
    x = np.random.default_rng(0).uniform(-0.5, 1.5, (2, 3, 6, 6))
    np.testing.assert_array_equal(isp_pipeline(x, identity_profile()), np.clip(x, 0, 1))


def test_gamma_constant():
    out = isp_pipeline(np.full((3, 4, 4), 0.5), identity_profile(gamma=2.2))
    np.testing.assert_allclose(out, 0.72974, atol=1e-4)


def test_box_blur_lag1_autocorr():
    x = 0.5 + 0.05 * np.random.default_rng(1).standard_normal((1, 3, 256, 256))
    out = isp_pipeline(x, identity_profile(blur_kernel=BOX_KERNEL))
    assert spatial_autocorr(out - 0.5)[0] == pytest.approx(2 / 3, abs=0.03)


def test_isp_shape_errors():
    with pytest.raises(ValueError):
        isp_pipeline(np.zeros((2, 4, 4, 4)), identity_profile())


def test_isp_channel_order():
    prof = identity_profile(awb=(2.0, 1.0, 0.5))
    out = isp_pipeline(np.full((3, 2, 2), 0.25), prof)
    np.testing.assert_allclose(out[:, 0, 0], [0.5, 0.25, 0.125])


# --- noisy pairs -------------------------------------------------------------


CLEAN = synthetic_clean_patches(4, 32, 0)


def test_zero_noise_pair_matches_clean():
    prof = identity_profile(gamma=2.2, awb=(1.5, 1.0, 1.2))
    pair = make_noisy_pair(CLEAN, CS100, prof, 0)
    np.testing.assert_allclose(pair.noisy, pair.clean, atol=1e-5)
    identity = make_noisy_pair(CLEAN, CS100, identity_profile(gamma=2.2), 0)
    np.testing.assert_allclose(identity.clean, CLEAN, atol=1e-5)


def test_pair_determinism_and_range():
    a = make_noisy_pair(CLEAN, CS100, "sensorB", np.random.default_rng(3))
    b = make_noisy_pair(CLEAN, CS100, "sensorB", np.random.default_rng(3))
    np.testing.assert_array_equal(a.noisy, b.noisy)
    assert a.noisy.shape == a.clean.shape == CLEAN.shape
    assert a.noisy.min() >= 0 and a.noisy.max() <= 1
    assert not np.array_equal(a.noisy, a.clean)
    assert a.profile_name == "sensorB"


@pytest.mark.parametrize("name", ["sensorA", "sensorB"])
def test_iso_raises_noise(name):
    lo = make_noisy_pair(CLEAN, CameraSettings(100, 0.01, name), name, np.random.default_rng(0))
    hi = make_noisy_pair(CLEAN, CameraSettings(3200, 0.01, name), name, np.random.default_rng(0))
    assert (hi.noisy - hi.clean).std() > (lo.noisy - lo.clean).std()


def test_std_increases_with_intensity_under_identity_isp():
    prof = identity_profile(shot_k=0.002, read_sigma=0.005)
    # kept clear of 1 so clamping does not shrink the top bins
    clean = np.linspace(0.02, 0.6, 400)[None, None, :].repeat(3, 0).repeat(100, 1)  # 1.2e5 pixels
    pair = make_noisy_pair(clean, CS100, prof, np.random.default_rng(0))
    stds = [s for _, s in noise_std_curve(pair.clean, pair.noisy, bins=8, value_range=(0.0, 0.6))]
    assert len(stds) == 8
    assert all(b >= a for a, b in zip(stds, stds[1:]))


@pytest.mark.parametrize("name", ["sensorA", "sensorB"])
def test_builtin_noise_is_correlated(name):
    rng = np.random.default_rng(1)
    pair = make_noisy_pair(CLEAN, CameraSettings(800, 0.01, name), name, rng)
    assert spatial_autocorr(pair.noisy - pair.clean)[0] > 0.2
    white = white_gaussian_like(pair.clean, pair.noisy, rng) - pair.clean
    assert abs(spatial_autocorr(white)[0]) < 0.05


def test_profiles_are_distinguishable():
    cs = CameraSettings(800, 0.01, "sensorA")
    a = make_noisy_pair(CLEAN, cs, "sensorA", np.random.default_rng(0))
    b = make_noisy_pair(CLEAN, cs, "sensorB", np.random.default_rng(0))
    va = (a.noisy - a.clean).var(axis=(0, 2, 3))
    vb = (b.noisy - b.clean).var(axis=(0, 2, 3))
    assert np.all(np.abs(va - vb) / np.minimum(va, vb) > 0.2)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([100, 400, 1600, 6400]), st.sampled_from(["sensorA", "sensorB"]))
def test_pair_always_in_range(seed, iso, name):
    pair = make_noisy_pair(CLEAN[:1], CameraSettings(iso, 0.01, name), name, np.random.default_rng(seed))
    assert pair.noisy.dtype == np.float32
    assert 0 <= pair.noisy.min() and pair.noisy.max() <= 1
    assert np.all(np.isfinite(pair.noisy))
