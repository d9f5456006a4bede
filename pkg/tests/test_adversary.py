import math

import numpy as np
import pytest

from signfed import adversary as adv
from signfed import dp
from signfed import model as mc
from signfed.data import Dataset
from signfed.errors import ConfigError
from signfed.protocols import sign

SPEC = mc.ModelSpec("logistic-regression", 4, 3)


def blob_data(seed=0, m=60):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 3, m)
    x = 2.0 * np.eye(3, 4)[y] + rng.standard_normal((m, 4))
    return x, y


def test_config_validation():
    with pytest.raises(ConfigError, match="adversary.kind"):
        adv.AdversaryConfig(kind="label-flip")
    with pytest.raises(ConfigError, match="adversary.fraction"):
        adv.AdversaryConfig(kind="random-update", fraction=1.0)
    with pytest.raises(ConfigError, match="adversary.eta_adv"):
        adv.AdversaryConfig(kind="in-backdoor", eta_adv=0)
    assert not adv.AdversaryConfig(kind="random-update", fraction=0.0).active
    assert adv.AdversaryConfig(kind="none", fraction=0.1, omit_dp_noise=True).active


def test_choose_malicious_size():
    s = adv.choose_malicious(100, 0.2, np.random.default_rng(0))
    assert len(s) == 20 and all(0 <= k < 100 for k in s)
    assert len(adv.choose_malicious(10, 0.04, np.random.default_rng(0))) == 0


def test_random_update_statistics():
    v = adv.random_update(10**6, 200.0, np.random.default_rng(1))
    assert abs(v.std() / 200.0 - 1) < 0.01
    assert abs(v.mean()) < 3 * 200.0 / math.sqrt(v.size)
    w = adv.random_update(10, 200.0, np.random.default_rng(2))
    assert np.any(w != adv.random_update(10, 200.0, np.random.default_rng(3)))
    with pytest.raises(ConfigError):
        adv.random_update(3, 0.0, np.random.default_rng(0))


def test_gradient_ascent_increases_loss_and_boosts():
    x, y = blob_data()
    w = mc.init_params(SPEC, np.random.default_rng(0))
    d1 = adv.gradient_ascent_update(SPEC, w, x, y, 5, 10, 0.1, 1.0, np.random.default_rng(4))
    d10 = adv.gradient_ascent_update(SPEC, w, x, y, 5, 10, 0.1, 10.0, np.random.default_rng(4))
    np.testing.assert_allclose(d10, 10 * d1, rtol=1e-14)
    batch = mc.Batch(x, y)
    assert mc.forward_loss(SPEC, w + d1, batch) > mc.forward_loss(SPEC, w, batch)
    with pytest.raises(ConfigError):
        adv.gradient_ascent_update(SPEC, w, x[:0], y[:0], 1, 10, 0.1, 1.0, np.random.default_rng(0))


def test_sign_inversion():
    s = np.array([1, -1])
    assert adv.sign_inversion(s).tolist() == [-1, 1]
    assert adv.sign_inversion(adv.sign_inversion(s)).tolist() == [1, -1]


def test_sign_inversion_equals_one_step_ascent():
    x, y = blob_data(1, m=10)
    w = mc.init_params(SPEC, np.random.default_rng(5))
    descent = mc.local_sgd(SPEC, w, x, y, 1, 10, 0.1, np.random.default_rng(6)) - w
    ascent = adv.gradient_ascent_update(SPEC, w, x, y, 1, 10, 0.1, 1.0, np.random.default_rng(6))
    assert np.all(descent != 0)
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(adv.sign_inversion(sign(descent, rng)), sign(ascent, rng))


def test_backdoor_boost_is_sign_neutral():
    x, y = blob_data(2)
    shard = Dataset(x, y, num_classes=3)
    w = mc.init_params(SPEC, np.random.default_rng(7))
    d1 = adv.backdoor_update(SPEC, w, shard, 3, 10, 0.1, 1.0, np.random.default_rng(8))
    d7 = adv.backdoor_update(SPEC, w, shard, 3, 10, 0.1, 7.0, np.random.default_rng(8))
    np.testing.assert_allclose(d7, 7 * d1, rtol=1e-14)
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(sign(d7, rng), sign(d1, rng))


def test_boosted_message_dominates_honest_sum():
    s = np.array([1, -1, 1])
    z = adv.boosted_sign_message(s, 5000)
    assert z.tolist() == [5000, -5000, 5000]
    assert np.all(np.abs(z) > 100)


def test_residual_noise_with_omitters():
    # f of K clients skip their noise share; the rest add DG shares of scale sqrt(n) sigma / sqrt(K)
    n, sigma, K, f = 9, 0.8, 10, 3
    share = dp.share_scale(n, sigma, K)
    rng = np.random.default_rng(9)
    total = sum(dp.sample_discrete_gaussian(0, share, rng, size=300_000) for _ in range(K - f))
    expect = (K - f) / K * n * sigma ** 2
    se = expect * math.sqrt(2 / total.size)
    assert abs(total.var() - expect) < 4 * se


def test_attack_accuracy():
    w = np.zeros(SPEC.num_params)
    W, b = mc.unpack(SPEC, w)
    b[2] = 1.0
    assert adv.attack_accuracy(SPEC, w, np.ones((4, 4)), np.zeros(4), 2) == 1.0
    assert math.isnan(adv.attack_accuracy(SPEC, w, np.ones((0, 4)), np.zeros(0), 2))
