"""
Parameter containers built on the tensor engine.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, linear


def xavier_uniform(shape: Tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    fan_out, fan_in = shape
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Base class: parameters are Tensor attributes with requires_grad set.

    Sub-modules may be attributes or lists of modules. Parameter names are
    dotted attribute paths in definition order, e.g. ``blocks.0.attn.qkv.weight``.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        """Copy arrays into the parameters in place; shapes must match exactly."""
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise ShapeError(
                    f"load_state_dict: missing {missing[:5]}, unexpected {unexpected[:5]}"
                )
        for name, array in state.items():
            if name not in own:
                continue
            array = np.asarray(array, dtype=np.float64)
            if array.shape != own[name].shape:
                raise ShapeError(
                    f"load_state_dict: {name} has shape {array.shape}, expected {own[name].shape}"
                )
            own[name].data[...] = array

    @contextmanager
    def swapped_state(self, state: Dict[str, np.ndarray]) -> Iterator["Module"]:
        """Temporarily run with other parameter values (e.g. the EMA shadow)."""
        saved = self.state_dict()
        self.load_state_dict(state)
        try:
            yield self
        finally:
            self.load_state_dict(saved)


class Linear(Module):
    """y = x W^T + b with W stored as (out_features, in_features)."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: Optional[np.random.Generator] = None,
        bias: bool = True,
        zero: bool = False,
    ):
        self.in_features = in_features
        self.out_features = out_features
        if zero or rng is None:
            weight = np.zeros((out_features, in_features))
        else:
            weight = xavier_uniform((out_features, in_features), rng)
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def __repr__(self) -> str:
        return f"Linear({self.in_features}, {self.out_features})"
