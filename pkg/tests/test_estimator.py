import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from noisegen import NoiseSynthesizer
from noisegen.estimator import check_images, check_pair, check_settings
from noisegen.fixtures import synthetic_clean_patches
from noisegen.isp import make_noisy_pair
from noisegen.model import CameraSettings, VocabularyError

CS = CameraSettings(800, 0.01, "sensorA")


@pytest.fixture(scope="module")
def pairs():
    clean = synthetic_clean_patches(4, 8, 0)
    pair = make_noisy_pair(clean, CS, "sensorA", np.random.default_rng(0))
    return pair.clean, pair.noisy


def small(**kw):
    base = dict(n_steps=2, base_channels=4, batch_size=2, crop=8, sampler_steps=3, random_state=0)
    return NoiseSynthesizer(**(base | kw))


def test_check_images():
    assert check_images(np.zeros((3, 4, 4))).shape == (1, 3, 4, 4)
    for bad in (np.zeros((1, 1, 4, 4)), np.zeros((1, 3, 6, 4)), np.full((1, 3, 4, 4), 2.0),
                np.full((1, 3, 4, 4), np.nan), np.zeros((0, 3, 4, 4))):
        with pytest.raises(ValueError):
            check_images(bad)


def test_check_settings():
    assert check_settings(CS, 3) == [CS] * 3
    assert check_settings(CS.to_dict(), 1) == [CS]
    with pytest.raises(ValueError):
        check_settings([CS, CS], 3)
    with pytest.raises(VocabularyError, match="sensorA"):
        check_settings(CameraSettings(100, 0.01, "other"), 1, ("sensorA",))


def test_check_pair():
    with pytest.raises(ValueError):
        check_pair(np.zeros((1, 3, 4, 4)), np.zeros((2, 3, 4, 4)))


def test_params_roundtrip():
    est = small(lr=1e-3)
    assert est.get_params()["lr"] == 1e-3
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    est.set_params(sampler="uniform")
    assert est.sampler == "uniform"


def test_unfitted_errors(pairs):
    with pytest.raises(NotFittedError):
        small().transform(pairs[0], CS)


def test_fit_transform_predict(pairs):
    clean, noisy = pairs
    est = small().fit(clean, noisy, CS)
    assert est.n_iter_ == 2 and est.psi_ is None
    out = est.transform(clean, CS, seed=5)
    assert out.shape == clean.shape and out.dtype == np.float32
    assert 0 <= out.min() and out.max() <= 1
    np.testing.assert_array_equal(out, est.transform(clean, CS, seed=5))
    np.testing.assert_allclose(est.predict(clean, CS, seed=5), out - clean)
    np.testing.assert_array_equal(small().fit_transform(clean, noisy, CS, seed=5), out)
    assert est.score(clean, noisy, CS) <= 0


def test_fit_is_deterministic(pairs):
    clean, noisy = pairs
    a, b = small().fit(clean, noisy, CS), small().fit(clean, noisy, CS)
    assert all(np.array_equal(a.params_[k], b.params_[k]) for k in a.params_)


def test_partial_fit_matches_single_run(pairs):
    clean, noisy = pairs
    whole = small(n_steps=3).fit(clean, noisy, CS)
    split = small(n_steps=2).fit(clean, noisy, CS).partial_fit(clean, noisy, CS, n_steps=1)
    assert split.n_iter_ == 3
    assert all(np.array_equal(whole.ema_[k], split.ema_[k]) for k in whole.ema_)


def test_bad_arguments(pairs):
    clean, noisy = pairs
    with pytest.raises(ValueError):
        small(sampler="euler").fit(clean, noisy, CS)
    with pytest.raises(ValueError):
        small().fit(clean, noisy)
    with pytest.raises(ValueError):
        small(n_steps=-1).fit(clean, noisy, CS)
    with pytest.raises(ValueError):
        small(target="median").fit(clean, noisy, CS)


def test_advanced_needs_distillation(pairs):
    clean, noisy = pairs
    est = small(sampler="dips-advanced").fit(clean, noisy, CS)
    with pytest.raises(ValueError, match="distill"):
        est.transform(clean, CS)
    est.distill(clean, noisy, CS, iters=1)
    assert est.transform(clean, CS).shape == clean.shape


def test_save_load(pairs, tmp_path):
    clean, noisy = pairs
    est = small(distill_iters=1, target="residual", residual_scale=10.0).fit(clean, noisy, CS)
    est.save(tmp_path / "m.ckpt")
    back = NoiseSynthesizer.load(tmp_path / "m.ckpt", sampler_steps=3)
    assert back.n_iter_ == 2 and back.target == "residual" and back.residual_scale == 10.0
    assert all(np.array_equal(est.psi_[k], back.psi_[k]) for k in est.psi_)
    np.testing.assert_array_equal(est.transform(clean, CS, seed=1), back.transform(clean, CS, seed=1))


def test_raw_weights_selectable(pairs):
    clean, noisy = pairs
    est = small().fit(clean, noisy, CS)
    ema = est.transform(clean, CS, seed=2)
    est.set_params(use_ema=False)
    assert not np.array_equal(ema, est.transform(clean, CS, seed=2))
