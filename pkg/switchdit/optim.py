"""
AdamW with decoupled weight decay.
"""

import logging
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import ShapeError
from .tensor import Tensor

logger = logging.getLogger(__name__)


class AdamW:
    """Adam with decoupled weight decay over a fixed, ordered parameter list.

    Parameters without a gradient after backward are skipped for that step
    (their moments are left untouched).
    """

    def __init__(
        self,
        named_params: Sequence[Tuple[str, Tensor]],
        lr: float = 1e-4,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.names: List[str] = [name for name, _ in named_params]
        self.params: List[Tensor] = [p for _, p in named_params]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: Dict[str, np.ndarray] = {n: np.zeros_like(p.data) for n, p in named_params}
        self.v: Dict[str, np.ndarray] = {n: np.zeros_like(p.data) for n, p in named_params}

    def step(self) -> None:
        self.t += 1
        bias1 = 1.0 - self.beta1**self.t
        bias2 = 1.0 - self.beta2**self.t
        for name, p in zip(self.names, self.params):
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {n: a.copy() for n, a in self.m.items()},
            "v": {n: a.copy() for n, a in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        for key in ("m", "v"):
            for name, array in state[key].items():
                if name not in self.m:
                    raise ShapeError(f"optimizer state names unknown parameter {name}")
                if np.shape(array) != self.m[name].shape:
                    raise ShapeError(
                        f"optimizer {key}[{name}] has shape {np.shape(array)}, "
                        f"expected {self.m[name].shape}"
                    )
                getattr(self, key)[name] = np.array(array, dtype=np.float64)
        self.t = int(state["t"])
        logger.debug(f"Restored optimizer state at t={self.t}")
