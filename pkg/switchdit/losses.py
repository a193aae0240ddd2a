"""
Training objectives: noise regression, the diffusion prior loss and the
load-balancing ablation.
"""

from typing import Optional

import numpy as np

from .errors import AblationDisabledError, DistributionError, ShapeError
from .matching import Assignment, permute_probs
from .tensor import Tensor, add, as_tensor, div, expand, mean, mul, scale, sub, xlogy

LN2 = float(np.log(2.0))


def _normalized(x: Tensor, what: str) -> Tensor:
    sums = x.data.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise DistributionError(f"{what} sums to {np.round(sums, 8).tolist()}, not 1")
    return div(x, expand(x.sum(axis=-1, keepdims=True), x.shape))


def jsd(P, Q, normalize: bool = True) -> Tensor:
    """Jensen-Shannon divergence in nats along the last axis.

    JSD = KL(P || A) / 2 + KL(Q || A) / 2 with A = (P + Q) / 2 and 0 log 0 = 0.
    With `normalize` both arguments must sum to 1 within 1e-6 and are
    rescaled to sum to exactly 1; otherwise they are used as given.
    """
    P, Q = as_tensor(P), as_tensor(Q)
    if P.shape != Q.shape:
        raise ShapeError(f"jsd: shapes {P.shape} and {Q.shape} differ")
    if np.any(P.data < 0) or np.any(Q.data < 0):
        raise DistributionError("jsd: negative probability")
    if normalize:
        P, Q = _normalized(P, "P"), _normalized(Q, "Q")
    A = scale(add(P, Q), 0.5)
    kl_p = sub(xlogy(P, P), xlogy(P, A)).sum(axis=-1)
    kl_q = sub(xlogy(Q, Q), xlogy(Q, A)).sum(axis=-1)
    return scale(add(kl_p, kl_q), 0.5)


def prior_distribution(w_prior, N: int, k: int, normalize: bool = True) -> np.ndarray:
    """w_prior / (kN), or w_prior / rowcount when `normalize`."""
    w = np.asarray(w_prior, dtype=np.float64)
    counts = w.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise DistributionError("prior row with no active column")
    return w / counts if normalize else w / (k * N)


def feasible_prior(w_prior_t, a: Assignment, selected, N: int, k: int) -> np.ndarray:
    """Prior rows cut down or topped up to exactly k active experts per gate block.

    Blocks are taken in gate order (prior column perm[i] sits in gate block
    i // M). A block with more than k active prior columns keeps the ones the
    gates currently select, then the lowest gate index; a block with fewer
    adds currently selected experts. Rows come back in prior column order.

    Args:
        w_prior_t: (..., NM) binary prior rows.
        selected: (..., N, M) boolean TopK masks of the same rows.
    """
    w = np.asarray(w_prior_t)
    selected = np.asarray(selected, dtype=bool)
    width = w.shape[-1]
    if width != len(a) or width % N:
        raise ShapeError(f"feasible_prior: rows of length {width} vs {len(a)} columns in {N} blocks")
    gate_frame = w[..., a.perm].reshape(w.shape[:-1] + (N, width // N)).astype(bool)
    if selected.shape != gate_frame.shape:
        raise ShapeError(f"feasible_prior: selection {selected.shape} vs prior blocks {gate_frame.shape}")
    priority = 2 * gate_frame.astype(np.int64) + selected
    keep = np.argsort(-priority, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(gate_frame.shape, dtype=np.int64)
    np.put_along_axis(mask, keep, 1, axis=-1)
    out = np.empty(w.shape, dtype=np.int64)
    out[..., a.perm] = mask.reshape(w.shape)
    return out


def diffusion_prior_loss(
    p_tot: Tensor,
    a: Assignment,
    w_prior_t,
    N: int,
    k: int,
    normalize: bool = True,
    selected: Optional[np.ndarray] = None,
) -> Tensor:
    """JSD(permuted p_tot / N || w_prior_t / (kN)) per row of p_tot.

    The permutation and the prior row are constants; gradients reach the
    gating parameters through p_tot only. Passing the current TopK masks as
    `selected` regresses onto `feasible_prior` rows instead, which have
    exactly kN active columns.
    """
    if selected is not None:
        w_prior_t = feasible_prior(w_prior_t, a, selected, N, k)
    permuted = permute_probs(p_tot, a)
    gate_dist = scale(permuted, 1.0 / N)
    prior = prior_distribution(w_prior_t, N, k, normalize)
    if prior.shape != permuted.shape:
        raise ShapeError(f"diffusion_prior_loss: prior {prior.shape} vs gates {permuted.shape}")
    return jsd(gate_dist, Tensor(prior), normalize=normalize)


def noise_loss(eps_hat: Tensor, eps) -> Tensor:
    """Mean over the batch of ||eps - eps_hat||^2 / dim."""
    diff = sub(eps_hat, as_tensor(eps))
    return mean(mul(diff, diff))


def total_loss(l_noise, l_dp, lambda_dp: float) -> Tensor:
    """L = L_noise + lambda_dp * L_dp."""
    return add(as_tensor(l_noise), scale(as_tensor(l_dp), lambda_dp))


def load_balance_loss(probs: Tensor, enabled: bool = True) -> Tensor:
    """Squared coefficient of variation of per-expert importance, summed over blocks.

    Args:
        probs: (B, N, M) gate probabilities for a batch.
        enabled: the load-balancing ablation flag.
    """
    if not enabled:
        raise AblationDisabledError("load-balancing loss is disabled for this run")
    probs = as_tensor(probs)
    if probs.ndim == 2:
        probs = probs.reshape(1, *probs.shape)
    importance = probs.sum(axis=0)
    N, M = importance.shape
    mu = importance.mean(axis=-1, keepdims=True)
    centered = sub(importance, expand(mu, importance.shape))
    variance = mul(centered, centered).mean(axis=-1)
    mu = mu.reshape(N)
    return div(variance, mul(mu, mu)).sum()


def routing_hamming(W_a: np.ndarray, W_b: np.ndarray, assignment: Optional[Assignment] = None) -> int:
    """Number of differing entries between two stacked maps, optionally aligning W_a first."""
    W_a = np.asarray(W_a)
    if assignment is not None:
        W_a = permute_probs(W_a, assignment)
    return int(np.sum(W_a != np.asarray(W_b)))
