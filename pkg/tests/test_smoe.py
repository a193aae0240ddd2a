"""Sparse expert dispatch, integration modes and identity initialization."""

import numpy as np
import pytest

from switchdit.config import IntegrationMode
from switchdit.errors import ShapeError
from switchdit.optim import AdamW
from switchdit.smoe import SMoELayer, init_experts_identity, integrate, smoe_forward
from switchdit.tensor import Tensor, backward, mul


@pytest.fixture
def bank(rng):
    return SMoELayer(dim=4, num_experts=3, hidden=8, rng=rng)


def dense_reference(z, g, bank):
    return sum(g[j] * bank.experts[j](Tensor(z)).data for j in range(bank.num_experts))


class TestSMoEForward:
    def test_single_expert(self, bank, rng):
        z = Tensor(rng.normal(size=(5, 4)))
        out = smoe_forward(z, Tensor([1.0, 0.0, 0.0]), bank)
        np.testing.assert_allclose(out.data, bank.experts[0](z).data, atol=1e-12)
        assert bank.evaluations.tolist() == [1, 0, 0]

    def test_equal_experts_convexity(self, bank, rng):
        bank.experts[1].load_state_dict(bank.experts[0].state_dict())
        z = Tensor(rng.normal(size=(5, 4)))
        out = smoe_forward(z, Tensor([0.5, 0.5, 0.0]), bank)
        np.testing.assert_allclose(out.data, bank.experts[0](z).data, atol=1e-12)

    def test_dense_oracle(self, bank, rng):
        for _ in range(10):
            z = rng.normal(size=(6, 4))
            g = rng.random(3) * (rng.random(3) < 0.7)
            out = smoe_forward(Tensor(z), Tensor(g), bank)
            np.testing.assert_allclose(out.data, dense_reference(z, g, bank), atol=1e-12)

    def test_batched_sparsity_counter(self, bank, rng):
        z = Tensor(rng.normal(size=(4, 5, 4)))
        g = Tensor([[0.5, 0.5, 0.0], [0.0, 0.3, 0.7], [0.2, 0.0, 0.8], [0.5, 0.5, 0.0]])
        out = smoe_forward(z, g, bank)
        assert out.shape == (4, 5, 4)
        assert bank.evaluations.tolist() == [3, 3, 2]
        assert bank.evaluations.sum() == 2 * 4
        for b in range(4):
            np.testing.assert_allclose(out.data[b], dense_reference(z.data[b], g.data[b], bank), atol=1e-12)

    def test_linear_in_gates(self, bank, rng):
        z = Tensor(rng.normal(size=(3, 4)))
        g1, g2 = rng.random(3), rng.random(3)
        combined = smoe_forward(z, Tensor(2.0 * g1 + 3.0 * g2), bank).data
        separate = 2.0 * smoe_forward(z, Tensor(g1), bank).data + 3.0 * smoe_forward(z, Tensor(g2), bank).data
        np.testing.assert_allclose(combined, separate, atol=1e-12)

    def test_dimension_mismatch(self, bank, rng):
        with pytest.raises(ShapeError):
            smoe_forward(Tensor(rng.normal(size=(5, 3))), Tensor([1.0, 0.0, 0.0]), bank)
        with pytest.raises(ShapeError):
            smoe_forward(Tensor(rng.normal(size=(5, 4))), Tensor([1.0, 0.0]), bank)

    def test_gradient_reaches_selected_experts_only(self, bank, rng):
        z = Tensor(rng.normal(size=(2, 4)))
        backward(smoe_forward(z, Tensor([0.6, 0.0, 0.4]), bank).sum(), inputs=bank.parameters())
        assert np.any(bank.experts[0].fc2.weight.grad != 0)
        assert np.all(bank.experts[1].fc2.weight.grad == 0)


class TestIntegrate:
    def test_all_ones_mask_skip(self, rng):
        z = Tensor(rng.normal(size=(3, 4)))
        block_input, residual = integrate(z, Tensor(np.ones((3, 4))), IntegrationMode.MASK_SKIP)
        np.testing.assert_array_equal(block_input.data, z.data)
        np.testing.assert_array_equal(residual.data, 0.0)

    def test_all_zeros_mask_skip(self, rng):
        z = Tensor(rng.normal(size=(3, 4)))
        block_input, residual = integrate(z, Tensor(np.zeros((3, 4))), "mask_skip")
        np.testing.assert_array_equal(block_input.data, 0.0)
        np.testing.assert_array_equal(residual.data, z.data)

    def test_decomposition(self, rng):
        z = Tensor(rng.normal(size=(3, 4)))
        m = Tensor(rng.normal(size=(3, 4)))
        block_input, residual = integrate(z, m, IntegrationMode.MASK_SKIP_INIT)
        np.testing.assert_allclose(block_input.data + residual.data, z.data, atol=1e-12)

    def test_direct_and_mask(self, rng):
        z = Tensor(rng.normal(size=(3, 4)))
        m = Tensor(rng.normal(size=(3, 4)))
        direct, none = integrate(z, m, IntegrationMode.DIRECT)
        assert none is None and direct is m
        masked, none = integrate(z, m, IntegrationMode.MASK)
        assert none is None
        np.testing.assert_array_equal(masked.data, z.data * m.data)
        masked_init, none = integrate(z, m, IntegrationMode.MASK_INIT)
        assert none is None
        np.testing.assert_array_equal(masked_init.data, masked.data)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            integrate(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))), IntegrationMode.MASK)


class TestIdentityInit:
    def test_outputs_ones(self, bank, rng):
        init_experts_identity(bank)
        for _ in range(5):
            z = Tensor(rng.normal(size=(7, 4)))
            g = rng.dirichlet(np.ones(2))
            out = smoe_forward(z, Tensor([g[0], 0.0, g[1]]), bank)
            np.testing.assert_allclose(out.data, 1.0, atol=1e-12)

    def test_one_step_moves_away_from_ones(self, bank, rng):
        init_experts_identity(bank)
        z = Tensor(rng.normal(size=(7, 4)))
        target = rng.normal(size=(7, 4))
        g = Tensor([0.5, 0.5, 0.0])
        opt = AdamW(list(bank.named_parameters()), lr=1e-2)
        diff = smoe_forward(z, g, bank) - Tensor(target)
        backward(mul(diff, diff).mean(), inputs=opt.params)
        opt.step()
        assert np.max(np.abs(smoe_forward(z, g, bank).data - 1.0)) > 1e-6
