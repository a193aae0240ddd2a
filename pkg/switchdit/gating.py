"""
Timestep-driven expert gating.

Each block i owns a linear map h_i from the timestep embedding e_t to M
logits. p_i = softmax(h_i(e_t)); g_i keeps the k largest entries of p_i
(ties go to the lowest expert index) and zeroes the rest. Routing depends
on t only, never on the tokens.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import AblationDisabledError, ConfigError, RoutingError
from .layers import Linear, Module
from .tensor import Tensor, add, concat, div, expand, mul, no_grad, silu, softmax, softplus

logger = logging.getLogger(__name__)

MAX_PERIOD = 10000.0


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Raw sinusoidal embedding, shape (len(t), dim): [cos(t w_j), sin(t w_j)].

    Frequencies w_j are geometrically spaced from 1 down to 1/MAX_PERIOD.
    """
    if dim % 2:
        raise ConfigError(f"timestep embedding size must be even, got {dim}")
    steps = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(MAX_PERIOD) * np.arange(half, dtype=np.float64) / half)
    args = steps[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


class TimestepEmbedder(Module):
    """Sinusoidal features followed by a two-layer SiLU MLP."""

    def __init__(self, hidden_size: int, frequency_dim: int, rng: np.random.Generator):
        self.frequency_dim = frequency_dim
        self.fc1 = Linear(frequency_dim, hidden_size, rng)
        self.fc2 = Linear(hidden_size, hidden_size, rng)

    def __call__(self, t) -> Tensor:
        raw = Tensor(timestep_embedding(t, self.frequency_dim))
        return self.fc2(silu(self.fc1(raw)))


def topk_mask(p: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest entries along the last axis, lowest index wins ties."""
    p = np.asarray(p)
    M = p.shape[-1]
    if not 1 <= k <= M:
        raise ConfigError(f"top_k={k} outside [1, {M}]")
    order = np.argsort(-p, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(p.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def topk_select(p, k: int) -> Tensor:
    """Zero all but the k largest probabilities; gradients reach only retained entries."""
    p = p if isinstance(p, Tensor) else Tensor(p)
    return mul(p, Tensor(topk_mask(p.data, k).astype(np.float64)))


def renormalize(g: Tensor) -> Tensor:
    """Rescale each gate vector so its retained entries sum to 1."""
    total = g.sum(axis=-1, keepdims=True)
    return div(g, expand(total, g.shape))


def activation_map(g_tot: np.ndarray, N: int, k: int) -> np.ndarray:
    """w = 1[g_tot > 0] for concatenated gate outputs, checking k non-zeros per block."""
    g_tot = g_tot.data if isinstance(g_tot, Tensor) else np.asarray(g_tot)
    if g_tot.shape[-1] % N:
        raise RoutingError(f"gate vector of length {g_tot.shape[-1]} does not split into {N} blocks")
    w = (g_tot > 0).astype(np.int64)
    per_block = w.reshape(w.shape[:-1] + (N, -1)).sum(axis=-1)
    if np.any(per_block != k):
        bad = np.argwhere(per_block != k)[0]
        raise RoutingError(
            f"block {int(bad[-1])} selected {int(per_block[tuple(bad)])} experts, expected {k}"
        )
    return w


def noisy_logits(
    logits: Tensor, noise_std: Tensor, rng: np.random.Generator, enabled: bool
) -> Tensor:
    """h(x) + softplus(raw std) * N(0, 1); only valid with noisy gating switched on."""
    if not enabled:
        raise AblationDisabledError("noisy gating is disabled for this model")
    draws = Tensor(rng.standard_normal(logits.shape))
    return add(logits, mul(softplus(noise_std), draws))


@dataclass
class GateOutput:
    """Gating byproducts for a batch: arrays are (batch, N, M)."""

    p: Tensor
    g: Tensor
    mask: np.ndarray

    @property
    def num_blocks(self) -> int:
        return self.p.shape[1]

    @property
    def p_tot(self) -> Tensor:
        return self.p.reshape(self.p.shape[0], -1)

    @property
    def g_tot(self) -> Tensor:
        return self.g.reshape(self.g.shape[0], -1)

    @property
    def w_gate(self) -> np.ndarray:
        return self.mask.reshape(self.mask.shape[0], -1).astype(np.int64)


class GatingNetwork(Module):
    """Per-block gates h_i: R^D -> R^M, zero-initialized so p_i starts uniform."""

    def __init__(
        self,
        num_blocks: int,
        embed_dim: int,
        num_experts: int,
        top_k: int,
        renormalize_gates: bool = True,
        noisy: bool = False,
    ):
        if not 1 <= top_k <= num_experts:
            raise ConfigError(f"top_k={top_k} outside [1, {num_experts}]")
        self.num_experts = num_experts
        self.top_k = top_k
        self.renormalize_gates = renormalize_gates
        self.noisy = noisy
        self.gates = [Linear(embed_dim, num_experts, zero=True) for _ in range(num_blocks)]
        self.noise = (
            [Linear(embed_dim, num_experts, zero=True) for _ in range(num_blocks)] if noisy else []
        )

    @property
    def num_blocks(self) -> int:
        return len(self.gates)

    def logits(self, e: Tensor, block: int) -> Tensor:
        return self.gates[block](e)

    def gate_probs(self, e: Tensor, block: int) -> Tensor:
        return softmax(self.logits(e, block), axis=-1)

    def block_gates(
        self, e: Tensor, block: int, rng: Optional[np.random.Generator] = None
    ) -> Tuple[Tensor, Tensor, np.ndarray]:
        logits = self.logits(e, block)
        if rng is not None and self.noisy:
            logits = noisy_logits(logits, self.noise[block](e), rng, self.noisy)
        p = softmax(logits, axis=-1)
        mask = topk_mask(p.data, self.top_k)
        g = mul(p, Tensor(mask.astype(np.float64)))
        if self.renormalize_gates:
            g = renormalize(g)
        return p, g, mask

    def __call__(self, e: Tensor, rng: Optional[np.random.Generator] = None) -> GateOutput:
        """Gate all blocks for a batch of embeddings (B, D).

        Passing `rng` draws gating noise when the model uses noisy gating;
        without it the clean gates are used (evaluation, routing maps).
        """
        ps, gs, masks = [], [], []
        for block in range(self.num_blocks):
            p, g, mask = self.block_gates(e, block, rng)
            ps.append(p.reshape(p.shape[0], 1, -1))
            gs.append(g.reshape(g.shape[0], 1, -1))
            masks.append(mask[:, None, :])
        return GateOutput(p=concat(ps, axis=1), g=concat(gs, axis=1), mask=np.concatenate(masks, axis=1))


def stacked_routing(model, state: Optional[dict] = None) -> Tuple[np.ndarray, np.ndarray]:
    """P_tot and W_gate over t = 1..T, each (T, NM), from clean gates without a graph.

    With `state` the map is computed for those parameters (e.g. the EMA shadow).
    """
    if state is not None:
        with model.swapped_state(state):
            return stacked_routing(model)
    timesteps = np.arange(1, model.timesteps + 1)
    with no_grad():
        gates = model.gating(model.t_embedder(timesteps))
    return gates.p_tot.numpy(), gates.w_gate
