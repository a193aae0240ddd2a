"""
Discrete-time DDPM forward process and ancestral sampling with the cosine
noise schedule.

Timesteps are 1-based: t = 1..T, with the virtual alphabar_0 = 1.
"""

from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from .errors import TimestepError
from .tensor import Tensor

ArrayLike = Union[np.ndarray, Tensor]

MAX_BETA = 0.999


def _array(x: ArrayLike) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep tables; entry i describes timestep t = i + 1."""

    alphabar: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    s: float = 0.008

    def __post_init__(self):
        for name in ("alphabar", "alpha", "beta"):
            array = np.array(getattr(self, name), dtype=np.float64)
            array.setflags(write=False)
            object.__setattr__(self, name, array)

    @property
    def T(self) -> int:
        return int(self.alphabar.shape[0])

    def check_t(self, t) -> np.ndarray:
        steps = np.asarray(t)
        if steps.size == 0 or np.any(steps < 1) or np.any(steps > self.T):
            raise TimestepError(f"timestep {t} outside [1, {self.T}]")
        return steps.astype(np.int64)

    def alphabar_at(self, t) -> np.ndarray:
        return self.alphabar[self.check_t(t) - 1]

    def alphabar_prev(self, t) -> np.ndarray:
        steps = self.check_t(t)
        padded = np.concatenate([[1.0], self.alphabar])
        return padded[steps - 1]

    def posterior_variance(self, t: int) -> float:
        """sigma_t^2 = beta_t (1 - alphabar_{t-1}) / (1 - alphabar_t); zero at t = 1."""
        i = int(self.check_t(t)) - 1
        prev = self.alphabar[i - 1] if i > 0 else 1.0
        return float(self.beta[i] * (1.0 - prev) / (1.0 - self.alphabar[i]))

    @classmethod
    def from_alphabar(cls, alphabar: np.ndarray, s: float = 0.008) -> "NoiseSchedule":
        alphabar = np.asarray(alphabar, dtype=np.float64)
        alpha = alphabar / np.concatenate([[1.0], alphabar[:-1]])
        return cls(alphabar=alphabar, alpha=alpha, beta=1.0 - alpha, s=s)


def cosine_alphabar(T: int, s: float = 0.008) -> NoiseSchedule:
    """Cosine schedule: alphabar_t = f(t) / f(0), f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2).

    betas are clipped to MAX_BETA and alphabar recomputed as their running
    product, so the final step is never singular.
    """
    if T < 2:
        raise ValueError(f"cosine schedule needs T >= 2, got {T}")
    if s <= 0:
        raise ValueError(f"cosine offset s must be positive, got {s}")
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((steps / T + s) / (1.0 + s)) * np.pi / 2.0) ** 2
    raw = f / f[0]
    beta = np.clip(1.0 - raw[1:] / raw[:-1], 0.0, MAX_BETA)
    alpha = 1.0 - beta
    return NoiseSchedule(alphabar=np.cumprod(alpha), alpha=alpha, beta=beta, s=s)


def respace(schedule: NoiseSchedule, steps: int) -> Tuple[np.ndarray, NoiseSchedule]:
    """Uniform-stride subsequence of `steps` timesteps with alphabar re-indexed onto it.

    Returns:
        (timesteps, schedule): ascending original timesteps used, and the
        schedule whose entry i belongs to timesteps[i].
    """
    steps = min(int(steps), schedule.T)
    if steps < 1:
        raise ValueError(f"need at least one sampling step, got {steps}")
    if steps == schedule.T:
        return np.arange(1, schedule.T + 1), schedule
    picked = np.floor(np.linspace(schedule.T, 1, steps) + 0.5).astype(np.int64)
    timesteps = np.unique(picked)
    return timesteps, NoiseSchedule.from_alphabar(schedule.alphabar[timesteps - 1], s=schedule.s)


def _per_sample(values: np.ndarray, like: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return values
    return values.reshape(values.shape + (1,) * (like.ndim - values.ndim))


def q_sample(x0: ArrayLike, t, eps: ArrayLike, sched: NoiseSchedule) -> np.ndarray:
    """sqrt(alphabar_t) x0 + sqrt(1 - alphabar_t) eps.

    `t` is an int or one timestep per leading-axis entry of x0.
    """
    x0, eps = _array(x0), _array(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"q_sample: x0 shape {x0.shape} vs noise shape {eps.shape}")
    ab = _per_sample(sched.alphabar_at(t), x0)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def predict_x0(x_t: ArrayLike, t, eps: ArrayLike, sched: NoiseSchedule) -> np.ndarray:
    """Invert q_sample given the noise: (x_t - sqrt(1 - alphabar_t) eps) / sqrt(alphabar_t)."""
    x_t, eps = _array(x_t), _array(eps)
    ab = _per_sample(sched.alphabar_at(t), x_t)
    return (x_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


def ddpm_step(
    x_t: ArrayLike, t: int, eps_hat: ArrayLike, sched: NoiseSchedule, noise: ArrayLike
) -> np.ndarray:
    """One ancestral step x_t -> x_{t-1}; `noise` is ignored at t = 1."""
    x_t, eps_hat = _array(x_t), _array(eps_hat)
    if x_t.shape != eps_hat.shape:
        raise ValueError(f"ddpm_step: x_t shape {x_t.shape} vs prediction {eps_hat.shape}")
    i = int(sched.check_t(t)) - 1
    beta, alpha, ab = sched.beta[i], sched.alpha[i], sched.alphabar[i]
    mean = (x_t - (beta / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(alpha)
    if i == 0:
        return mean
    noise = _array(noise)
    if noise.shape != x_t.shape:
        raise ValueError(f"ddpm_step: noise shape {noise.shape} vs x_t {x_t.shape}")
    return mean + np.sqrt(sched.posterior_variance(t)) * noise
