"""Patch layout, adaLN-Zero identity, SMoE identity at init, EMA and end-to-end gradients."""

import numpy as np
import pytest

from switchdit.config import IntegrationMode
from switchdit.errors import ConfigError, ShapeError, TimestepError
from switchdit.gating import stacked_routing
from switchdit.losses import noise_loss, total_loss
from switchdit.network import EMA, DiTBlock, SwitchDiT, patchify, unpatchify
from switchdit.tensor import Tensor, check_parameter_gradients
from switchdit.trainer import Trainer

from .conftest import randomize, tiny_model_config, tiny_train_config


class TestPatches:
    @pytest.mark.parametrize("patch,tokens", [(4, 16), (2, 64), (16, 1)])
    def test_token_count(self, patch, tokens, rng):
        out = patchify(rng.normal(size=(2, 1, 16, 16)), patch)
        assert out.shape == (2, tokens, patch * patch)

    def test_roundtrip(self, rng):
        img = rng.normal(size=(3, 2, 8, 8))
        back = unpatchify(patchify(img, 4), 4, channels=2, height=8, width=8)
        np.testing.assert_array_equal(back.data, img)

    def test_row_major_patches(self):
        img = np.arange(16.0).reshape(4, 4)
        tokens = patchify(img, 2).data[0]
        np.testing.assert_array_equal(tokens[0], [0, 1, 4, 5])
        np.testing.assert_array_equal(tokens[1], [2, 3, 6, 7])
        np.testing.assert_array_equal(tokens[2], [8, 9, 12, 13])

    def test_indivisible(self, rng):
        with pytest.raises(ShapeError):
            patchify(rng.normal(size=(1, 1, 10, 10)), 4)


class TestForward:
    def test_zero_head_at_init(self, tiny_model, rng):
        eps_hat, gates = tiny_model.predict_noise(rng.normal(size=(3, 1, 8, 8)), [1, 5, 10])
        assert eps_hat.shape == (3, 1, 8, 8)
        np.testing.assert_array_equal(eps_hat.data, 0.0)
        assert gates.p.shape == (3, 2, 3)
        assert gates.w_gate.shape == (3, 6)

    def test_finite_on_random_inputs(self, tiny_model, rng):
        randomize(tiny_model, rng)
        for _ in range(20):
            x = rng.normal(scale=rng.uniform(0.1, 10.0), size=(2, 1, 8, 8))
            t = rng.integers(1, 11, size=2)
            eps_hat, _ = tiny_model(x, t)
            assert eps_hat.is_finite()

    def test_dit_baseline_has_no_gates(self, rng):
        model = SwitchDiT(tiny_model_config(integration=IntegrationMode.NONE), timesteps=10)
        eps_hat, gates = model(rng.normal(size=(2, 1, 8, 8)), 3)
        assert gates is None
        assert model.gating is None
        assert not any(".smoe." in name for name, _ in model.named_parameters())
        assert model.expert_evaluations().shape == (2, 0)

    def test_parameter_names(self, tiny_model):
        names = {name for name, _ in tiny_model.named_parameters()}
        assert "blocks.0.smoe.experts.0.fc1.weight" in names
        assert "blocks.1.block.attn.qkv.weight" in names
        assert "gating.gates.1.weight" in names
        assert "final_layer.linear.weight" in names

    def test_sparse_evaluation_count(self, tiny_model, rng):
        tiny_model.reset_counters()
        tiny_model(rng.normal(size=(5, 1, 8, 8)), rng.integers(1, 11, size=5))
        evals = tiny_model.expert_evaluations()
        assert evals.shape == (2, 3)
        assert evals.sum() == 2 * 2 * 5
        np.testing.assert_array_equal(evals.sum(axis=1), [10, 10])

    def test_timestep_range(self, tiny_model, rng):
        x = rng.normal(size=(1, 1, 8, 8))
        with pytest.raises(TimestepError):
            tiny_model(x, 0)
        with pytest.raises(TimestepError):
            tiny_model(x, 11)

    def test_input_shape(self, tiny_model, rng):
        with pytest.raises(ShapeError):
            tiny_model(rng.normal(size=(1, 1, 16, 16)), 1)

    def test_labels(self, rng):
        x = rng.normal(size=(2, 1, 8, 8))
        with pytest.raises(ConfigError):
            SwitchDiT(tiny_model_config(), timesteps=10)(x, 1, y=np.array([0, 1]))
        conditional = SwitchDiT(tiny_model_config(num_classes=3), timesteps=10)
        eps_hat, _ = conditional(x, 1, y=np.array([0, 3]))
        assert eps_hat.shape == x.shape
        with pytest.raises(ConfigError):
            conditional(x, 1, y=np.array([0, 4]))


class TestIdentityAtInit:
    def test_dit_block_is_identity(self, rng):
        block = DiTBlock(16, 2, 2.0, 1e-12, rng)
        x = Tensor(rng.normal(size=(2, 4, 16)))
        c = Tensor(rng.normal(size=(2, 16)))
        np.testing.assert_array_equal(block(x, c).data, x.data)

    def test_smoe_layers_vanish(self, rng):
        model = SwitchDiT(tiny_model_config(depth=4), timesteps=10, seed=3)
        randomize(model, rng, skip=(".smoe.", "gating"))
        for _ in range(100):
            x = rng.normal(size=(1, 1, 8, 8))
            t = int(rng.integers(1, 11))
            with_smoe, _ = model(x, t)
            without, _ = model(x, t, bypass_smoe=True)
            np.testing.assert_allclose(with_smoe.data, without.data, atol=1e-9)

    def test_independent_of_routing(self, rng):
        model = SwitchDiT(tiny_model_config(depth=4), timesteps=10, seed=3)
        randomize(model, rng, skip=(".smoe.",), std=0.5)
        x = rng.normal(size=(10, 1, 8, 8))
        t = np.arange(1, 11)
        with_smoe, gates = model(x, t)
        without, _ = model(x, t, bypass_smoe=True)
        assert len({tuple(row) for row in gates.w_gate}) > 1
        np.testing.assert_allclose(with_smoe.data, without.data, atol=1e-9)

    def test_plain_mask_mode_is_not_identity(self, rng):
        model = SwitchDiT(tiny_model_config(integration=IntegrationMode.MASK_SKIP), timesteps=10)
        randomize(model, rng, skip=(".smoe.", "gating"))
        x = rng.normal(size=(2, 1, 8, 8))
        with_smoe, _ = model(x, 5)
        without, _ = model(x, 5, bypass_smoe=True)
        assert np.max(np.abs(with_smoe.data - without.data)) > 1e-6


class TestEMA:
    def test_zero_decay_copies(self, tiny_model, rng):
        ema = EMA(tiny_model, 0.0)
        randomize(tiny_model, rng)
        ema.update(tiny_model)
        for name, p in tiny_model.named_parameters():
            np.testing.assert_array_equal(ema.shadow[name], p.data)

    def test_geometric_approach(self, tiny_model):
        for p in tiny_model.parameters():
            p.data[...] = 0.0
        ema = EMA(tiny_model, 0.9999)
        for p in tiny_model.parameters():
            p.data[...] = 1.0
        for _ in range(10):
            ema.update(tiny_model)
        for array in ema.shadow.values():
            np.testing.assert_allclose(array, 1.0 - 0.9999**10, rtol=1e-10)

    @pytest.mark.parametrize("decay", [-0.1, 1.0, 1.5])
    def test_decay_range(self, tiny_model, decay):
        with pytest.raises(ConfigError):
            EMA(tiny_model, decay)

    def test_shadow_routing(self, tiny_model, rng):
        ema = EMA(tiny_model, 0.5)
        randomize(tiny_model, rng, std=1.0)
        _, online = stacked_routing(tiny_model)
        _, shadow = stacked_routing(tiny_model, ema.shadow)
        np.testing.assert_array_equal(shadow, np.tile([1, 1, 0], (10, 2)))
        _, again = stacked_routing(tiny_model)
        np.testing.assert_array_equal(again, online)


@pytest.mark.parametrize("max_per_tensor", [3, pytest.param(None, marks=pytest.mark.slow, id="every-coordinate")])
def test_end_to_end_gradients(rng, max_per_tensor):
    trainer = Trainer(tiny_train_config(model=tiny_model_config(depth=2, hidden_size=16)))
    model = trainer.model
    randomize(model, rng, std=0.3)
    _, gate_map = stacked_routing(model)
    trainer.refresh_matching(gate_map)
    x_t = rng.normal(size=(4, 1, 8, 8))
    eps = rng.normal(size=(4, 1, 8, 8))
    t = np.array([2, 2, 6, 9])

    def loss_fn():
        eps_hat, gates = model(x_t, t)
        return total_loss(noise_loss(eps_hat, eps), trainer.prior_loss(gates, t), 1.0)

    errors = check_parameter_gradients(
        loss_fn, list(model.named_parameters()), eps=1e-6, max_per_tensor=max_per_tensor, rng=rng
    )
    assert max(errors.values()) <= 1e-4
    assert any(name.startswith("gating.") for name in errors)
