"""
Sparse mixture-of-experts layer for one transformer block.

m(z) = sum over selected experts j of g_j E_j(z). Experts whose gate is zero
are never evaluated; each layer counts how many samples every expert saw.
"""

import logging
from typing import List, Optional, Tuple

import numpy as np

from .config import IntegrationMode
from .errors import ShapeError
from .layers import Linear, Module
from .tensor import Tensor, add, expand, gelu, mul, scatter, sub

logger = logging.getLogger(__name__)


class Expert(Module):
    """fc2(gelu(fc1(z))) + offset, token dim -> token dim."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)
        self.offset = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, z: Tensor) -> Tensor:
        out = self.fc2(gelu(self.fc1(z)))
        return add(out, expand(self.offset, out.shape))


class SMoELayer(Module):
    """The M experts of one block plus an evaluation counter."""

    def __init__(self, dim: int, num_experts: int, hidden: int, rng: np.random.Generator):
        self.dim = dim
        self.experts: List[Expert] = [Expert(dim, hidden, rng) for _ in range(num_experts)]
        self._evaluations = np.zeros(num_experts, dtype=np.int64)

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    @property
    def evaluations(self) -> np.ndarray:
        return self._evaluations.copy()

    def reset_counters(self) -> None:
        self._evaluations[:] = 0

    def __call__(self, z: Tensor, g: Tensor) -> Tensor:
        return smoe_forward(z, g, self)


def smoe_forward(z: Tensor, g: Tensor, bank: SMoELayer) -> Tensor:
    """Sparse dispatch of a batch of token sets.

    Args:
        z: (B, L, d) tokens, or (L, d) for a single sample.
        g: (B, M) gate vectors, or (M,) for a single sample.
        bank: the block's experts.

    Returns:
        m(z) with the shape of z.
    """
    single = z.ndim == 2
    if single:
        z = z.reshape(1, *z.shape)
        g = g.reshape(1, -1)
    if z.ndim != 3 or z.shape[-1] != bank.dim:
        raise ShapeError(f"smoe: tokens {z.shape} do not match expert dim {bank.dim}")
    if g.shape != (z.shape[0], bank.num_experts):
        raise ShapeError(f"smoe: gates {g.shape} vs tokens {z.shape} with {bank.num_experts} experts")
    batch = z.shape[0]
    out: Optional[Tensor] = None
    for j, expert in enumerate(bank.experts):
        rows = np.flatnonzero(g.data[:, j] > 0)
        if rows.size == 0:
            continue
        bank._evaluations[j] += rows.size
        y = expert(z[rows])
        weight = expand(g[rows, j].reshape(rows.size, 1, 1), y.shape)
        part = scatter(mul(weight, y), rows, batch)
        out = part if out is None else add(out, part)
    if out is None:
        out = Tensor(np.zeros(z.shape))
    return out.reshape(out.shape[1:]) if single else out


def integrate(z: Tensor, m: Tensor, mode: IntegrationMode) -> Tuple[Tensor, Optional[Tensor]]:
    """Combine tokens with the SMoE output.

    Returns:
        (block_input, residual): residual is added to the block output in the
        skip modes and is None otherwise.
    """
    if z.shape != m.shape:
        raise ShapeError(f"integrate: tokens {z.shape} vs smoe output {m.shape}")
    mode = IntegrationMode(mode)
    if mode is IntegrationMode.NONE:
        return z, None
    if mode is IntegrationMode.DIRECT:
        return m, None
    block_input = mul(z, m)
    if mode.skip:
        return block_input, mul(z, sub(1.0, m))
    return block_input, None


def init_experts_identity(bank: SMoELayer) -> None:
    """Make every expert output the all-ones vector: zero output layer, unit offset."""
    for expert in bank.experts:
        expert.fc2.weight.data[...] = 0.0
        expert.fc2.bias.data[...] = 0.0
        expert.offset.data[...] = 1.0
