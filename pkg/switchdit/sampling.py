"""
Ancestral DDPM sampling with classifier-free guidance, and sample quality
measured by kernel two-sample statistics.
"""

import logging
from typing import Dict, Optional

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import ConfigError, DistributionError
from .network import SwitchDiT
from .schedule import NoiseSchedule, ddpm_step, respace
from .tensor import no_grad

logger = logging.getLogger(__name__)


def guided_noise(
    model: SwitchDiT,
    x: np.ndarray,
    t: int,
    labels: Optional[np.ndarray],
    guidance: float,
    force_cfg: bool = False,
) -> np.ndarray:
    """eps_null + s (eps_y - eps_null), or the plain prediction when guidance is off."""
    if labels is None or (guidance == 1.0 and not force_cfg):
        eps, _ = model(x, t, labels)
        return eps.data
    null = np.full(len(labels), model.y_embedder.null_class)
    eps, _ = model(np.concatenate([x, x]), t, np.concatenate([labels, null]))
    cond, uncond = np.split(eps.data, 2)
    return uncond + guidance * (cond - uncond)


def sample(
    model: SwitchDiT,
    schedule: NoiseSchedule,
    n: int,
    steps: int,
    guidance: float = 1.0,
    y: Optional[int] = None,
    seed: int = 0,
    state: Optional[Dict[str, np.ndarray]] = None,
    force_cfg: bool = False,
) -> np.ndarray:
    """Generate `n` images in [-1, 1].

    Args:
        model: the denoiser.
        schedule: the training schedule; `steps` < T samples on a uniform subsequence.
        n: number of images.
        steps: sampling steps, clipped to T.
        guidance: classifier-free guidance scale, 1 disables it.
        y: class for every image; conditional models default to labels 0, 1, 2, ... cycling.
        seed: noise seed.
        state: parameters to sample with (the EMA shadow); defaults to the online ones.
        force_cfg: batch the null branch even when guidance is 1.
    """
    if guidance < 1.0:
        raise ConfigError(f"guidance must be >= 1, got {guidance}")
    if not model.conditional:
        if y is not None:
            raise ConfigError("a class label was given to an unconditional model")
        if guidance != 1.0:
            logger.warning(f"Ignoring guidance {guidance} for an unconditional model")
            guidance = 1.0
        labels = None
    elif y is not None:
        if not 0 <= y < model.cfg.num_classes:
            raise ConfigError(f"label {y} outside [0, {model.cfg.num_classes})")
        labels = np.full(n, y, dtype=np.int64)
    else:
        labels = np.arange(n) % model.cfg.num_classes

    if state is not None:
        with model.swapped_state(state):
            return sample(model, schedule, n, steps, guidance, y, seed, None, force_cfg)

    timesteps, sub = respace(schedule, steps)
    rng = np.random.default_rng(seed)
    cfg = model.cfg
    x = rng.standard_normal((n, cfg.channels, cfg.image_size, cfg.image_size))
    with no_grad():
        for i in range(len(timesteps) - 1, -1, -1):
            eps = guided_noise(model, x, int(timesteps[i]), labels, guidance, force_cfg)
            noise = rng.standard_normal(x.shape) if i > 0 else np.zeros_like(x)
            x = ddpm_step(x, i + 1, eps, sub, noise)
    return np.clip(x, -1.0, 1.0)


def _flatten(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[0] == 0:
        raise DistributionError("MMD needs non-empty sample sets")
    return x.reshape(x.shape[0], -1)


def median_bandwidth(pooled: np.ndarray) -> float:
    """Median pairwise distance of the pooled set; 1.0 when that median is 0."""
    upper = pdist(pooled)
    bw = float(np.median(upper)) if upper.size else 0.0
    return bw if bw > 0 else 1.0


def _mmd2(K: np.ndarray, n: int) -> float:
    k_xx = K[:n, :n].mean()
    k_yy = K[n:, n:].mean()
    k_xy = K[:n, n:].mean()
    return float(k_xx + k_yy - 2.0 * k_xy)


def _pooled_kernel(samples, heldout):
    a, b = _flatten(samples), _flatten(heldout)
    if a.shape[1] != b.shape[1]:
        raise DistributionError(f"MMD sets differ in dimension: {a.shape[1]} vs {b.shape[1]}")
    for name, s in (("samples", a), ("heldout", b)):
        if len(s) < 64:
            logger.warning(f"MMD with only {len(s)} {name}; estimates will be noisy")
    pooled = np.concatenate([a, b])
    bw = median_bandwidth(pooled)
    return np.exp(-cdist(pooled, pooled, "sqeuclidean") / (2.0 * bw * bw)), len(a)


def eval_mmd(samples, heldout) -> float:
    """Biased MMD^2 estimate with an RBF kernel at the median-distance bandwidth."""
    K, n = _pooled_kernel(samples, heldout)
    return max(_mmd2(K, n), 0.0)


def mmd_permutation_threshold(
    samples, heldout, n_perm: int = 200, q: float = 0.95, seed: int = 0
) -> float:
    """q-quantile of MMD^2 over random relabelings of the pooled sets."""
    K, n = _pooled_kernel(samples, heldout)
    rng = np.random.default_rng(seed)
    stats = np.empty(n_perm)
    for i in range(n_perm):
        order = rng.permutation(K.shape[0])
        stats[i] = _mmd2(K[np.ix_(order, order)], n)
    return float(np.quantile(stats, q))
