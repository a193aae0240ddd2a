"""
Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation stores a Node on its output naming the op,
its input tensors and a vector-Jacobian product. backward() collects the
nodes reachable from a scalar loss into a Graph, walks it in reverse
topological order and deposits dLoss/dLeaf on every leaf that requires grad.

Elementwise operations accept equal shapes or a scalar operand only. Any
other broadcast has to be spelled out with Tensor.expand().
"""

from __future__ import annotations

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import NumericalError, ShapeError

logger = logging.getLogger(__name__)

Number = Union[int, float, np.integer, np.floating]

_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (evaluation, sampling, probing)."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


@dataclass(eq=False)
class Node:
    """One recorded primitive: op name, inputs and its vector-Jacobian product."""

    op: str
    parents: Tuple["Tensor", ...]
    vjp: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """Dense n-dimensional float64 array participating in a computation graph."""

    # Lets `np.float64(2) * tensor` dispatch to Tensor.__rmul__.
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(array, dtype=np.float64)
        out.requires_grad = False
        out.grad = None
        out._node = None
        return out

    @classmethod
    def zeros(cls, shape, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape), requires_grad=requires_grad)

    @classmethod
    def ones(cls, shape, requires_grad: bool = False) -> "Tensor":
        return cls(np.ones(shape), requires_grad=requires_grad)

    # ------------------------------------------------------------------ info

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def op(self) -> Optional[str]:
        return self._node.op if self._node is not None else None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not self.is_finite():
            bad = int(np.size(self.data) - np.count_nonzero(np.isfinite(self.data)))
            raise NumericalError(f"{what} holds {bad} non-finite value(s)")
        return self

    # ------------------------------------------------------------ arithmetic

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(other, self)

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return take(self, index)

    # ---------------------------------------------------------------- shape

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Optional[Sequence[int]] = None) -> "Tensor":
        return transpose(self, axes)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def expand(self, shape: Sequence[int]) -> "Tensor":
        return expand(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def scale(self, factor: float) -> "Tensor":
        return scale(self, factor)

    def scatter(self, index, n: int) -> "Tensor":
        return scatter(self, index, n)


TensorLike = Union[Tensor, np.ndarray, Number]


def as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.array(value, dtype=np.float64))


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor._wrap(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(op, tuple(parents), vjp)
    return out


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape of a broadcast operand."""
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum())
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, size in enumerate(shape) if size == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_elementwise(a: Tensor, b: Tensor, kind: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")


# ------------------------------------------------------------ elementwise ops


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "add")

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _result(a.data + b.data, "add", (a, b), vjp)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "sub")

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _result(a.data - b.data, "sub", (a, b), vjp)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "mul")

    def vjp(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _result(a.data * b.data, "mul", (a, b), vjp)


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "div")

    def vjp(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _reduce_to(ga, a.shape), _reduce_to(gb, b.shape)

    return _result(a.data / b.data, "div", (a, b), vjp)


def scale(a: TensorLike, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)

    def vjp(g):
        return (g * factor,)

    return _result(a.data * factor, "scale", (a,), vjp)


def xlogy(x: TensorLike, y: TensorLike) -> Tensor:
    """x * log(y) with the convention 0 * log(anything) = 0.

    The derivative with respect to x is taken as 0 where x == 0.
    """
    x, y = as_tensor(x), as_tensor(y)
    _check_elementwise(x, y, "xlogy")
    positive = x.data != 0
    with np.errstate(divide="ignore", invalid="ignore"):
        logy = np.where(positive, np.log(np.where(positive, y.data, 1.0)), 0.0)
    out = np.where(positive, x.data * logy, 0.0)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            gy = np.where(positive, x.data / np.where(positive, y.data, 1.0), 0.0)
        return _reduce_to(g * logy, x.shape), _reduce_to(g * gy, y.shape)

    return _result(out, "xlogy", (x, y), vjp)


# ------------------------------------------------------------ linear algebra


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """Matrix product over the last two axes.

    The right operand is either a plain matrix shared by every leading index
    of the left operand, or has exactly the same leading (batch) axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if shared:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _result(np.matmul(a.data, b.data), "matmul", (a, b), vjp)


def transpose(a: TensorLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose: need at least 2 axes, got shape {a.shape}")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(int(i) for i in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} do not permute shape {a.shape}")
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inverse),)

    return _result(np.transpose(a.data, axes).copy(), "transpose", (a,), vjp)


def reshape(a: TensorLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None

    def vjp(g):
        return (g.reshape(a.shape),)

    return _result(data, "reshape", (a,), vjp)


def concat(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat: no tensors given")
    ndim = parts[0].ndim
    axis = axis % ndim if ndim else 0
    for part in parts[1:]:
        same_rank = part.ndim == ndim
        others_match = same_rank and all(
            part.shape[i] == parts[0].shape[i] for i in range(ndim) if i != axis
        )
        if not others_match:
            raise ShapeError(
                f"concat: incompatible shapes {parts[0].shape} and {part.shape}"
            )
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([p.data for p in parts], axis=axis), "concat", parts, vjp)


def take(a: TensorLike, index) -> Tensor:
    """Basic or integer-array indexing (the `slice` op); gradients scatter back."""
    a = as_tensor(a)
    try:
        data = np.array(a.data[index], dtype=np.float64)
    except IndexError as exc:
        raise ShapeError(f"slice: index {index!r} invalid for shape {a.shape}: {exc}") from None

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(data, "slice", (a,), vjp)


def scatter(a: TensorLike, index, n: int) -> Tensor:
    """Place the rows of `a` at positions `index` of an all-zero (n, ...) tensor."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1 or a.ndim == 0 or index.shape[0] != a.shape[0]:
        raise ShapeError(f"scatter: {index.shape[0] if index.ndim else 0} indices for shape {a.shape}")
    out = np.zeros((int(n),) + a.shape[1:])
    np.add.at(out, index, a.data)

    def vjp(g):
        return (g[index],)

    return _result(out, "scatter", (a,), vjp)


def expand(a: TensorLike, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast to `shape`; gradients are summed back."""
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        data = np.array(np.broadcast_to(a.data, shape))
    except ValueError:
        raise ShapeError(f"expand: cannot broadcast {a.shape} to {shape}") from None

    def vjp(g):
        return (_reduce_to(g, a.shape),)

    return _result(data, "expand", (a,), vjp)


# ------------------------------------------------------------ reductions


def _normalize_axis(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(int(ax) % ndim for ax in axis)


def tsum(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axis(axis, a.ndim) if a.ndim else None

    def vjp(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.array(np.broadcast_to(g, a.shape)),)

    return _result(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), "sum", (a,), vjp)


def mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axis(axis, a.ndim) if a.ndim else None
    count = a.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))

    def vjp(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.array(np.broadcast_to(g, a.shape)) / count,)

    return _result(np.asarray(a.data.mean(axis=axes, keepdims=keepdims)), "mean", (a,), vjp)


# ------------------------------------------------------------ nn primitives


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    sig = _sigmoid(x.data)

    def vjp(g):
        return (g * sig * (1.0 + x.data * (1.0 - sig)),)

    return _result(x.data * sig, "silu", (x,), vjp)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: TensorLike) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    th = np.tanh(u)

    def vjp(g):
        du = _GELU_C * (1.0 + 3.0 * 0.044715 * x.data**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x.data * (1.0 - th * th) * du),)

    return _result(0.5 * x.data * (1.0 + th), "gelu", (x,), vjp)


def softplus(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    sig = _sigmoid(x.data)

    def vjp(g):
        return (g * sig,)

    return _result(out, "softplus", (x,), vjp)


def softmax(x: TensorLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    y = ex / ex.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, "softmax", (x,), vjp)


def layer_norm(
    x: TensorLike,
    weight: Optional[Tensor] = None,
    bias: Optional[Tensor] = None,
    eps: float = 1e-12,
) -> Tensor:
    """Normalize over the last axis, then apply the optional affine map."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"layer_norm: empty last dimension in shape {x.shape}")
    width = x.shape[-1]
    for name, param in (("weight", weight), ("bias", bias)):
        if param is not None and param.shape != (width,):
            raise ShapeError(f"layer_norm: {name} shape {param.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    w = weight.data if weight is not None else 1.0
    b = bias.data if bias is not None else 0.0
    out = xhat * w + b
    parents = [x] + [p for p in (weight, bias) if p is not None]

    def vjp(g):
        dxhat = g * w
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        grads = [dx]
        if weight is not None:
            grads.append((g * xhat).reshape(-1, width).sum(axis=0))
        if bias is not None:
            grads.append(g.reshape(-1, width).sum(axis=0))
        return tuple(grads)

    return _result(out, "layer_norm", parents, vjp)


def linear(x: TensorLike, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight.T + bias, with weight laid out as (out_features, in_features)."""
    x = as_tensor(x)
    if weight.ndim != 2 or x.ndim == 0 or weight.shape[1] != x.shape[-1]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = [x, weight] + ([bias] if bias is not None else [])

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        grads = [g @ weight.data, g2.T @ x.data.reshape(-1, x.shape[-1])]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _result(out, "linear", parents, vjp)


# ------------------------------------------------------------ graph + backward


class Graph:
    """Topologically ordered record of the operations that produced a tensor.

    Built fresh from an output after each forward pass (define-by-run).
    """

    def __init__(self, output: Tensor, order: List[Tensor]):
        self.output = output
        self.order = order

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            tensor, finished = stack.pop()
            if finished:
                order.append(tensor)
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            if tensor._node is not None:
                for parent in tensor._node.parents:
                    if id(parent) not in visited:
                        stack.append((parent, False))
        return cls(output, order)

    @property
    def nodes(self) -> List[Node]:
        return [t._node for t in self.order if t._node is not None]

    @property
    def leaves(self) -> List[Tensor]:
        return [t for t in self.order if t._node is None and t.requires_grad]

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, accumulate: bool = False, inputs: Optional[Sequence[Tensor]] = None) -> int:
        """Propagate d(output)/d(.) to the leaves; returns the number of nodes visited."""
        grads = {id(self.output): np.ones_like(self.output.data)}
        reached = set()
        visited = 0
        for tensor in reversed(self.order):
            g = grads.pop(id(tensor), None)
            if g is None:
                continue
            node = tensor._node
            if node is None:
                if tensor.requires_grad:
                    reached.add(id(tensor))
                    g = np.array(g, dtype=np.float64).reshape(tensor.shape)
                    if accumulate and tensor.grad is not None:
                        tensor.grad = tensor.grad + g
                    else:
                        tensor.grad = g
                continue
            visited += 1
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                previous = grads.get(id(parent))
                grads[id(parent)] = pg if previous is None else previous + pg
        for leaf in inputs or ():
            if id(leaf) not in reached and (leaf.grad is None or not accumulate):
                leaf.grad = np.zeros_like(leaf.data)
        return visited


def backward(
    loss: Tensor, accumulate: bool = False, inputs: Optional[Sequence[Tensor]] = None
) -> Graph:
    """Fill `.grad` on every requires-grad leaf reachable from a scalar loss.

    Args:
        loss: Scalar tensor.
        accumulate: Add into existing leaf gradients instead of overwriting them.
        inputs: Leaves that should end up with a gradient even when the loss
            does not depend on them (they receive zeros).

    Returns:
        The Graph that was traversed.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    graph = Graph.from_output(loss)
    graph.backward(accumulate=accumulate, inputs=inputs)
    return graph


# ------------------------------------------------------------ gradient checks


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def _scalar(f: Callable[[], Tensor]) -> float:
    with no_grad():
        value = f()
    value = value.item() if isinstance(value, Tensor) else float(value)
    if not np.isfinite(value):
        raise NumericalError("non-finite value encountered while probing gradients")
    return value


def grad_check(f: Callable[[Tensor], Tensor], x: TensorLike, eps: float = 1e-6) -> float:
    """Compare backward() against central finite differences.

    Returns:
        max over coordinates of |analytic - numeric| / max(1, |numeric|).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"grad_check: eps={eps} outside [1e-7, 1e-3]")
    base = as_tensor(x).data.copy()
    point = Tensor(base, requires_grad=True)
    out = as_tensor(f(point))
    if out.size != 1:
        raise ShapeError(f"grad_check: f must return a scalar, got shape {out.shape}")
    out.check_finite("grad_check output")
    if out.requires_grad:
        backward(out, inputs=[point])
    analytic = point.grad if point.grad is not None else np.zeros_like(base)

    numeric = np.zeros(base.size)
    flat = base.reshape(-1)
    for i in range(flat.size):
        shifted = flat.copy()
        shifted[i] += eps
        f_plus = _scalar(lambda: f(Tensor(shifted.reshape(base.shape))))
        shifted[i] -= 2 * eps
        f_minus = _scalar(lambda: f(Tensor(shifted.reshape(base.shape))))
        numeric[i] = (f_plus - f_minus) / (2 * eps)
    return _relative_error(analytic.reshape(-1), numeric)


def check_parameter_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tuple[str, Tensor]],
    eps: float = 1e-6,
    max_per_tensor: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> dict:
    """Finite-difference check of a loss against every parameter tensor.

    Parameters are perturbed in place and restored. With `max_per_tensor`
    only that many randomly chosen coordinates of each tensor are perturbed.

    Returns:
        Mapping of parameter name to its max relative error.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"check_parameter_gradients: eps={eps} outside [1e-7, 1e-3]")
    rng = rng if rng is not None else np.random.default_rng(0)
    tensors = [p for _, p in params]
    loss = loss_fn()
    loss.check_finite("loss")
    backward(loss, inputs=tensors)
    analytic = {name: p.grad.copy() for name, p in params}

    errors = {}
    for name, param in params:
        flat = param.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            coords = np.sort(rng.choice(flat.size, size=max_per_tensor, replace=False))
        numeric = np.empty(coords.size)
        for j, i in enumerate(coords):
            original = flat[i]
            flat[i] = original + eps
            f_plus = _scalar(loss_fn)
            flat[i] = original - eps
            f_minus = _scalar(loss_fn)
            flat[i] = original
            numeric[j] = (f_plus - f_minus) / (2 * eps)
        errors[name] = _relative_error(analytic[name].reshape(-1)[coords], numeric)
    worst = max(errors, key=errors.get) if errors else None
    if worst is not None:
        logger.debug(f"Worst gradient error {errors[worst]:.3e} at {worst}")
    return errors
