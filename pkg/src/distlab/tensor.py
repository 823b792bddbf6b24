"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive records its parents and a backward closure; ``Tensor.backward``
walks the tape in reverse topological order.  Also home to the SGD-with-momentum
update and the step-decay learning-rate schedule used by every training loop.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""


class NumericOverflowError(FloatingPointError):
    """A primitive produced NaN or Inf."""


def _as_array(value) -> np.ndarray:
    return np.array(value, dtype=np.float64)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward: Callable | None = None):
        arr = _as_array(data)
        if not np.all(np.isfinite(arr)):
            raise NumericOverflowError(f"non-finite value produced by '{op}'")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def backward(self, seed: np.ndarray | None = None) -> None:
        if seed is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        grads: dict[int, np.ndarray] = {id(self): seed.astype(np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return add(self, neg(other))
    def __rsub__(self, other): return add(other, neg(self))
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by constants")
        return mul(self, 1.0 / float(other))


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return Tensor(a.data + b.data, op="add", parents=(a, b),
                  backward=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(-a.data, op="neg", parents=(a,), backward=lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return Tensor(a.data * b.data, op="mul", parents=(a, b),
                  backward=lambda g: (_unbroadcast(g * b.data, a.shape),
                                      _unbroadcast(g * a.data, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return Tensor(a.data @ b.data, op="matmul", parents=(a, b),
                  backward=lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return Tensor(a.data.T, op="transpose", parents=(a,), backward=lambda g: (g.T,))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return Tensor(out, op="reshape", parents=(a,), backward=lambda g: (g.reshape(a.shape),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor(np.where(mask, a.data, 0.0), op="relu", parents=(a,),
                  backward=lambda g: (g * mask,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return Tensor(out, op="log", parents=(a,), backward=lambda g: (g / a.data,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor(out, op="exp", parents=(a,), backward=lambda g: (g * out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.data * a.data, op="square", parents=(a,),
                  backward=lambda g: (2.0 * a.data * g,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    # sign(0) = 0 is the subgradient used throughout
    return Tensor(np.abs(a.data), op="abs", parents=(a,),
                  backward=lambda g: (g * np.sign(a.data),))


def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), op="sum", parents=(a,),
                  backward=lambda g: (_expand(g, a.shape, axis, keepdims).copy(),))


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return Tensor(a.data.mean(axis=axis, keepdims=keepdims), op="mean", parents=(a,),
                  backward=lambda g: (_expand(g, a.shape, axis, keepdims) / count,))


def max(a, axis: int | None = None) -> Tensor:  # noqa: A001
    """Max-reduction; the gradient goes to the first maximizer only."""
    a = as_tensor(a)
    if axis is None:
        flat = int(np.argmax(a.data))

        def backward(g):
            out = np.zeros(a.data.size)
            out[flat] = g
            return (out.reshape(a.shape),)
        return Tensor(a.data.reshape(-1)[flat], op="max", parents=(a,), backward=backward)
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)

    def backward(g):
        out = np.zeros_like(a.data)
        np.put_along_axis(out, idx, np.expand_dims(g, axis), axis=axis)
        return (out,)
    return Tensor(np.take_along_axis(a.data, idx, axis=axis).squeeze(axis), op="max",
                  parents=(a,), backward=backward)


def _log_softmax_array(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    out = np.exp(_log_softmax_array(a.data, axis))

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return Tensor(out, op="softmax", parents=(a,), backward=backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    out = _log_softmax_array(a.data, axis)
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)
    return Tensor(out, op="log_softmax", parents=(a,), backward=backward)


# --- parameters and optimization -------------------------------------------

@dataclass
class Parameter:
    name: str
    tensor: Tensor
    momentum_state: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.tensor.requires_grad = True
        if self.momentum_state is None:
            self.momentum_state = np.zeros_like(self.tensor.data)
        if self.momentum_state.shape != self.tensor.shape:
            raise ShapeError(f"momentum state for {self.name!r} has shape "
                             f"{self.momentum_state.shape}, expected {self.tensor.shape}")

    @classmethod
    def from_array(cls, name: str, values) -> "Parameter":
        return cls(name, Tensor(values, requires_grad=True))

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate0: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_milestones: tuple[int, ...] = ()
    decay_factor: float = 0.1

    def __post_init__(self):
        if self.learning_rate0 <= 0:
            raise ValueError("learning_rate0 must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        ms = tuple(int(m) for m in self.decay_milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("decay_milestones must be strictly increasing")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        object.__setattr__(self, "decay_milestones", ms)


def lr_at(epoch: int, cfg: OptimizerConfig) -> float:
    passed = len([m for m in cfg.decay_milestones if m <= epoch])
    return cfg.learning_rate0 * cfg.decay_factor ** passed


def forward_backward(graph: Callable[..., Tensor], inputs: Sequence,
                     params: Sequence[Parameter]) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``graph(*inputs)`` and differentiate it w.r.t. ``params``.

    ``graph`` may only touch the given inputs and parameter tensors.  Returns
    the scalar loss and a name -> gradient mapping (zeros for parameters the
    loss does not depend on).
    """
    for p in params:
        p.tensor.grad = None
    # overflow surfaces as NumericOverflowError from the finiteness checks, not as warnings
    with np.errstate(over="ignore", invalid="ignore"):
        loss = graph(*[as_tensor(x) for x in inputs])
        if loss.data.size != 1:
            raise ShapeError(f"graph output must be scalar, got shape {loss.shape}")
        loss.backward()
    grads = {}
    for p in params:
        g = p.tensor.grad
        grads[p.name] = np.zeros_like(p.data) if g is None else g
        p.tensor.grad = None
    return float(loss.data), grads


def sgd_step(params: Iterable[Parameter], gradients: Mapping[str, np.ndarray], lr: float,
             cfg: OptimizerConfig) -> list[Parameter]:
    """Heavy-ball momentum step with L2 weight decay folded into the gradient."""
    params = list(params)
    for p in params:
        if p.name not in gradients:
            raise KeyError(f"no gradient supplied for parameter {p.name!r}")
        with np.errstate(over="ignore", invalid="ignore"):
            g = gradients[p.name] + cfg.weight_decay * p.data
            p.momentum_state = cfg.momentum * p.momentum_state + g
            p.tensor.data = p.data - lr * p.momentum_state
        if not np.all(np.isfinite(p.tensor.data)):
            raise NumericOverflowError(f"parameter {p.name!r} became non-finite")
    return params
