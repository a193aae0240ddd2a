"""Gate-to-prior column matching."""

import numpy as np
import pytest

from switchdit.errors import NumericalError, RoutingError, ShapeError
from switchdit.matching import (
    Assignment,
    assignment_cost,
    brute_force_assignment,
    cdist,
    hungarian,
    permute_probs,
)
from switchdit.tensor import Tensor, backward


def loop_cost(W_gate, W_prior):
    n = W_gate.shape[1]
    C = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            C[i, j] = np.abs(W_gate[:, i] - W_prior[:, j]).sum()
    return C


class TestCost:
    def test_cdist(self):
        np.testing.assert_array_equal(cdist([0, 1], [1, 1]), [[1, 1], [0, 0]])
        np.testing.assert_array_equal(cdist([0.5, 2.0], [0.0, 3.0]), [[0.5, 2.5], [2.0, 1.0]])

    def test_cdist_lengths(self):
        with pytest.raises(ShapeError):
            cdist([0, 1], [1, 1, 0])

    def test_binary_maps(self, rng):
        for _ in range(100):
            W_gate = (rng.random((50, 12)) < 0.5).astype(int)
            W_prior = (rng.random((50, 12)) < 0.5).astype(int)
            expected = loop_cost(W_gate, W_prior)
            np.testing.assert_array_equal(assignment_cost(W_gate, W_prior), expected)
            np.testing.assert_array_equal(assignment_cost(W_gate, W_prior, literal=True), expected)

    def test_single_row(self):
        C = assignment_cost([1, 1, 0], [0, 1, 1])
        np.testing.assert_array_equal(C, [[1, 0, 0], [1, 0, 0], [0, 1, 1]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            assignment_cost(np.ones((4, 6)), np.ones((5, 6)))


class TestHungarian:
    def test_two_by_two(self):
        a = hungarian([[1, 2], [3, 0]])
        assert a.perm.tolist() == [0, 1]
        assert a.cost == 1.0

    def test_empty(self):
        assert len(hungarian(np.zeros((0, 0)))) == 0

    def test_recovers_column_permutation(self, rng):
        for _ in range(20):
            W_prior = (rng.random((60, 6)) < 0.5).astype(int)
            if len({tuple(col) for col in W_prior.T}) < 6:
                continue
            sigma = rng.permutation(6)
            W_gate = W_prior[:, sigma]
            a = hungarian(assignment_cost(W_gate, W_prior))
            assert a.perm.tolist() == sigma.tolist()
            assert a.cost == 0.0

    def test_agrees_with_brute_force(self, rng):
        for _ in range(200):
            C = rng.random((7, 7))
            a, b = hungarian(C), brute_force_assignment(C)
            assert a.perm.tolist() == b.perm.tolist()
            assert a.cost == pytest.approx(b.cost, abs=1e-12)

    def test_ties_pick_smallest_permutation(self, rng):
        for _ in range(100):
            C = rng.integers(0, 3, size=(6, 6)).astype(float)
            a, b = hungarian(C), brute_force_assignment(C)
            assert a.cost == b.cost
            assert a.perm.tolist() == b.perm.tolist()
        assert hungarian(np.zeros((4, 4))).is_identity()

    def test_invalid_matrices(self):
        with pytest.raises(ShapeError):
            hungarian(np.zeros((2, 3)))
        with pytest.raises(NumericalError):
            hungarian([[0.0, np.inf], [1.0, 0.0]])


class TestAssignment:
    def test_not_a_permutation(self):
        with pytest.raises(RoutingError):
            Assignment(np.array([0, 0, 1]))

    def test_inverse(self):
        a = Assignment(np.array([2, 0, 1]), 3.0)
        inv = a.inverse()
        assert inv.perm.tolist() == [1, 2, 0]
        assert inv.cost == 3.0
        assert a.to_json() == {"perm": [2, 0, 1], "cost": 3.0}


class TestPermuteProbs:
    def test_moves_entries(self):
        a = Assignment(np.array([2, 0, 1]))
        np.testing.assert_array_equal(permute_probs(np.array([10.0, 20.0, 30.0]), a), [20.0, 30.0, 10.0])

    def test_identity_and_inverse(self, rng):
        p = rng.random((4, 6))
        np.testing.assert_array_equal(permute_probs(p, Assignment.identity(6)), p)
        a = Assignment(rng.permutation(6))
        np.testing.assert_array_equal(permute_probs(permute_probs(p, a), a.inverse()), p)
        np.testing.assert_allclose(permute_probs(p, a).sum(axis=-1), p.sum(axis=-1))

    def test_tensor_gradient(self):
        p = Tensor(np.array([[1.0, 2.0, 3.0]]), requires_grad=True)
        out = permute_probs(p, Assignment(np.array([1, 2, 0])))
        np.testing.assert_array_equal(out.data, [[3.0, 1.0, 2.0]])
        backward((out * Tensor(np.array([[1.0, 10.0, 100.0]]))).sum())
        np.testing.assert_array_equal(p.grad, [[10.0, 100.0, 1.0]])

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            permute_probs(np.ones(4), Assignment.identity(3))
