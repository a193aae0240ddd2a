"""Timestep embeddings, gate probabilities, TopK selection and activation maps."""

import numpy as np
import pytest

from switchdit.errors import AblationDisabledError, ConfigError, RoutingError
from switchdit.gating import (
    GatingNetwork,
    activation_map,
    noisy_logits,
    renormalize,
    stacked_routing,
    timestep_embedding,
    topk_mask,
    topk_select,
)
from switchdit.network import SwitchDiT
from switchdit.tensor import Tensor, backward

from .conftest import tiny_model_config


class TestTimestepEmbedding:
    def test_deterministic(self):
        np.testing.assert_array_equal(timestep_embedding(7, 64), timestep_embedding(7, 64))

    @pytest.mark.parametrize("t", [1, 50, 999])
    def test_norm(self, t):
        assert np.linalg.norm(timestep_embedding(t, 64)) == pytest.approx(np.sqrt(32), abs=1e-12)

    def test_first_and_last_differ(self):
        assert np.max(np.abs(timestep_embedding(1, 64) - timestep_embedding(100, 64))) > 0.1

    def test_distinct_timesteps(self):
        raw = timestep_embedding(np.arange(1, 200), 64)
        assert len({row.tobytes() for row in raw}) == 199

    def test_odd_dimension(self):
        with pytest.raises(ConfigError):
            timestep_embedding(1, 63)


class TestGateProbs:
    def test_zero_init_is_uniform(self):
        net = GatingNetwork(2, 8, 3, 2)
        p = net.gate_probs(Tensor(np.ones((1, 8))), 1)
        np.testing.assert_allclose(p.data, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)

    def test_closed_form(self):
        net = GatingNetwork(1, 1, 3, 2)
        net.gates[0].bias.data[...] = [0.3, 0.3, 0.3 + np.log(2.0)]
        p = net.gate_probs(Tensor(np.zeros((1, 1))), 0)
        np.testing.assert_allclose(p.data, [[0.25, 0.25, 0.5]], atol=1e-12)

    def test_sums_to_one(self, rng):
        net = GatingNetwork(3, 8, 4, 2)
        for gate in net.gates:
            gate.weight.data[...] = rng.normal(size=gate.weight.shape)
        e = Tensor(rng.normal(size=(5, 8)))
        for block in range(3):
            np.testing.assert_allclose(net.gate_probs(e, block).data.sum(axis=-1), 1.0, atol=1e-12)


class TestTopK:
    def test_tie_break_lowest_index(self):
        np.testing.assert_allclose(topk_select(np.array([1 / 3] * 3), 2).data, [1 / 3, 1 / 3, 0.0])

    def test_sort_oracle(self):
        np.testing.assert_allclose(topk_select(np.array([0.5, 0.2, 0.3]), 2).data, [0.5, 0.0, 0.3])

    def test_k_equals_m(self):
        p = np.array([0.1, 0.6, 0.3])
        np.testing.assert_array_equal(topk_select(p, 3).data, p)

    def test_gradient_only_through_retained(self):
        p = Tensor(np.array([0.5, 0.2, 0.3]), requires_grad=True)
        backward(topk_select(p, 2).sum())
        np.testing.assert_array_equal(p.grad, [1.0, 0.0, 1.0])

    def test_idempotent_support(self, rng):
        for _ in range(50):
            p = rng.dirichlet(np.ones(5))
            g = topk_select(p, 3).data
            again = topk_select(g / g.sum(), 3).data
            np.testing.assert_array_equal(again > 0, g > 0)

    def test_shift_invariant_selection(self, rng):
        logits = rng.normal(size=(20, 4))
        p = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
        shifted = np.exp(logits + 3.0) / np.exp(logits + 3.0).sum(-1, keepdims=True)
        np.testing.assert_array_equal(topk_mask(p, 2), topk_mask(shifted, 2))

    def test_bad_k(self):
        with pytest.raises(ConfigError):
            topk_mask(np.ones(3) / 3, 4)

    def test_renormalize(self):
        g = renormalize(Tensor([[0.5, 0.0, 0.3]]))
        np.testing.assert_allclose(g.data, [[0.625, 0.0, 0.375]])


class TestActivationMap:
    def test_tie_break_layout(self):
        g_tot = np.tile([1 / 3, 1 / 3, 0.0], 4)
        assert activation_map(g_tot, 4, 2).tolist() == [1, 1, 0] * 4

    def test_popcount(self, rng):
        net = GatingNetwork(3, 6, 4, 2)
        for gate in net.gates:
            gate.weight.data[...] = rng.normal(size=gate.weight.shape)
        out = net(Tensor(rng.normal(size=(7, 6))))
        w = activation_map(out.g_tot.data, 3, 2)
        assert np.all(w.sum(axis=-1) == 6)
        np.testing.assert_array_equal(w, out.w_gate)
        np.testing.assert_allclose(out.p_tot.data.sum(axis=-1), 3.0, atol=1e-9)

    def test_wrong_nonzero_count(self):
        with pytest.raises(RoutingError):
            activation_map(np.array([0.5, 0.5, 0.1, 1.0, 0.0, 0.0]), 2, 2)


class TestNoisyGating:
    def test_disabled(self, rng):
        with pytest.raises(AblationDisabledError):
            noisy_logits(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 3))), rng, enabled=False)

    def test_vanishing_noise_recovers_clean_selection(self, rng):
        net = GatingNetwork(1, 4, 3, 2, noisy=True)
        net.gates[0].weight.data[...] = rng.normal(size=(3, 4))
        net.noise[0].bias.data[...] = -60.0
        e = Tensor(rng.normal(size=(10, 4)))
        clean = net(e)
        noisy = net(e, rng=np.random.default_rng(0))
        np.testing.assert_array_equal(clean.mask, noisy.mask)
        np.testing.assert_allclose(clean.g.data, noisy.g.data, atol=1e-12)

    def test_seeded_reproducible(self, rng):
        net = GatingNetwork(2, 4, 3, 2, noisy=True)
        e = Tensor(rng.normal(size=(16, 4)))
        a = net(e, rng=np.random.default_rng(5))
        b = net(e, rng=np.random.default_rng(5))
        np.testing.assert_array_equal(a.mask, b.mask)

    def test_large_noise_selects_uniformly(self):
        net = GatingNetwork(1, 2, 3, 2, noisy=True)
        net.noise[0].bias.data[...] = 50.0
        out = net(Tensor(np.zeros((10_000, 2))), rng=np.random.default_rng(1))
        freq = out.mask[:, 0, :].mean(axis=0)
        assert np.all(np.abs(freq - 2 / 3) <= 0.05)


class TestStackedRouting:
    def test_untrained_map_is_degenerate(self):
        model = SwitchDiT(tiny_model_config(), timesteps=10)
        P, W = stacked_routing(model)
        assert P.shape == W.shape == (10, 6)
        assert np.all(W == np.tile([1, 1, 0], 2))
        np.testing.assert_allclose(P, 1 / 3, atol=1e-15)

    def test_state_swap_restores_parameters(self, rng):
        model = SwitchDiT(tiny_model_config(), timesteps=10)
        original = model.state_dict()
        other = {k: rng.normal(size=v.shape) for k, v in original.items()}
        _, W = stacked_routing(model, other)
        assert W.shape == (10, 6)
        for name, value in model.state_dict().items():
            np.testing.assert_array_equal(value, original[name])
