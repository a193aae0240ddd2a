"""Ancestral sampling, guidance and the MMD sample-quality statistics."""

import logging

import numpy as np
import pytest

from switchdit.datasets import gen_dataset
from switchdit.errors import ConfigError, DistributionError
from switchdit.network import SwitchDiT
from switchdit.sampling import eval_mmd, guided_noise, median_bandwidth, mmd_permutation_threshold, sample
from switchdit.schedule import cosine_alphabar

from .conftest import randomize, tiny_model_config


@pytest.fixture
def schedule():
    return cosine_alphabar(10)


@pytest.fixture
def conditional(rng):
    model = SwitchDiT(tiny_model_config(num_classes=3), timesteps=10, seed=1)
    return randomize(model, rng)


class TestSample:
    def test_shape_range_and_determinism(self, tiny_model, schedule, rng):
        randomize(tiny_model, rng, std=0.5)
        a = sample(tiny_model, schedule, 6, steps=10, seed=3)
        b = sample(tiny_model, schedule, 6, steps=10, seed=3)
        assert a.shape == (6, 1, 8, 8)
        np.testing.assert_array_equal(a, b)
        assert a.min() >= -1.0 and a.max() <= 1.0
        assert not np.array_equal(a, sample(tiny_model, schedule, 6, steps=10, seed=4))

    def test_respaced(self, tiny_model, schedule, rng):
        randomize(tiny_model, rng)
        out = sample(tiny_model, schedule, 2, steps=4, seed=0)
        assert out.shape == (2, 1, 8, 8)
        assert np.all(np.isfinite(out))

    def test_guidance_one_skips_null_branch(self, conditional, schedule):
        plain = sample(conditional, schedule, 4, steps=10, guidance=1.0, seed=0)
        forced = sample(conditional, schedule, 4, steps=10, guidance=1.0, seed=0, force_cfg=True)
        np.testing.assert_allclose(plain, forced, atol=1e-10)

    def test_guided_noise_combination(self, conditional, rng):
        x = rng.normal(size=(2, 1, 8, 8))
        labels = np.array([0, 2])
        cond, _ = conditional(x, 4, labels)
        uncond, _ = conditional(x, 4, np.array([3, 3]))
        guided = guided_noise(conditional, x, 4, labels, 2.5)
        np.testing.assert_allclose(guided, uncond.data + 2.5 * (cond.data - uncond.data), atol=1e-12)

    def test_label_checks(self, tiny_model, conditional, schedule):
        with pytest.raises(ConfigError):
            sample(tiny_model, schedule, 2, steps=10, y=0)
        with pytest.raises(ConfigError):
            sample(conditional, schedule, 2, steps=10, y=3)
        with pytest.raises(ConfigError):
            sample(conditional, schedule, 2, steps=10, guidance=0.5)
        assert sample(conditional, schedule, 2, steps=10, y=1, guidance=2.0).shape == (2, 1, 8, 8)

    def test_guidance_ignored_without_labels(self, tiny_model, schedule, caplog):
        with caplog.at_level(logging.WARNING, logger="switchdit.sampling"):
            guided = sample(tiny_model, schedule, 2, steps=10, guidance=3.0, seed=1)
        assert "unconditional" in caplog.text
        np.testing.assert_array_equal(guided, sample(tiny_model, schedule, 2, steps=10, seed=1))

    def test_state_is_swapped_back(self, tiny_model, schedule, rng):
        before = tiny_model.state_dict()
        other = {name: rng.normal(scale=0.1, size=a.shape) for name, a in before.items()}
        with_state = sample(tiny_model, schedule, 2, steps=10, seed=0, state=other)
        for name, array in tiny_model.state_dict().items():
            np.testing.assert_array_equal(array, before[name])
        randomize(tiny_model, np.random.default_rng(0))
        tiny_model.load_state_dict(other)
        np.testing.assert_array_equal(with_state, sample(tiny_model, schedule, 2, steps=10, seed=0))


class TestMMD:
    def test_identical_sets(self, rng):
        x = rng.normal(size=(64, 16))
        assert eval_mmd(x, x) < 1e-6

    def test_disjoint_constants(self):
        value = eval_mmd(np.zeros((64, 1, 2, 2)), np.ones((64, 1, 2, 2)))
        assert value == pytest.approx(2.0 - 2.0 * np.exp(-0.5), abs=1e-12)

    def test_same_generator_beats_other_generator(self):
        a = gen_dataset("blobs", 128, seed=0, image_size=8).images
        b = gen_dataset("blobs", 128, seed=1, image_size=8).images
        c = gen_dataset("rings", 128, seed=2, image_size=8).images
        assert eval_mmd(a, b) < eval_mmd(a, c)

    def test_threshold_separates_different_sets(self):
        zeros, ones = np.zeros((64, 4)), np.ones((64, 4))
        threshold = mmd_permutation_threshold(zeros, ones, n_perm=50, seed=0)
        assert eval_mmd(zeros, ones) > threshold
        assert threshold == mmd_permutation_threshold(zeros, ones, n_perm=50, seed=0)

    def test_matches_pairwise_loop(self, rng):
        a, b = rng.normal(size=(64, 3)), rng.normal(0.5, 1.0, size=(64, 3))
        pooled = np.concatenate([a, b])
        n = len(pooled)
        dist = np.array([[np.linalg.norm(pooled[i] - pooled[j]) for j in range(n)] for i in range(n)])
        bw = np.median(dist[np.triu_indices(n, k=1)])
        K = np.exp(-(dist**2) / (2.0 * bw * bw))
        expected = K[:64, :64].mean() + K[64:, 64:].mean() - 2.0 * K[:64, 64:].mean()
        assert median_bandwidth(pooled) == pytest.approx(bw, rel=1e-12)
        assert eval_mmd(a, b) == pytest.approx(expected, rel=1e-9)

    def test_bandwidth_fallback(self):
        assert median_bandwidth(np.zeros((5, 3))) == 1.0
        assert median_bandwidth(np.array([[0.0], [3.0]])) == pytest.approx(3.0)

    def test_errors_and_warnings(self, rng, caplog):
        with pytest.raises(DistributionError):
            eval_mmd(np.zeros((0, 4)), np.zeros((3, 4)))
        with pytest.raises(DistributionError):
            eval_mmd(np.zeros((8, 4)), np.zeros((8, 5)))
        with caplog.at_level(logging.WARNING, logger="switchdit.sampling"):
            eval_mmd(rng.normal(size=(8, 4)), rng.normal(size=(8, 4)))
        assert "only 8" in caplog.text
