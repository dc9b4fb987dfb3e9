"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a backward closure on the output
node, so calling backward() on a scalar loss replays the recorded graph
in reverse topological order. All arrays are C-contiguous float64 and
every computation is single threaded and deterministic.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    # ascontiguousarray would promote 0-d scalars to shape (1,)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """A float64 array plus the bookkeeping for reverse-mode gradients."""

    __slots__ = ("data", "parents", "backward_fn", "requires_grad", "grad")

    def __init__(
        self,
        data,
        parents: Sequence["Tensor"] = (),
        backward_fn: Callable[[np.ndarray], None] | None = None,
        requires_grad: bool = False,
    ):
        self.data = _as_array(data)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in self.parents
        )
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar. Scalars are lifted to constant tensors where needed.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise ContractError("tensor division is only supported by a python scalar")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, _lift(other))


class Param(Tensor):
    """A named leaf tensor whose gradient persists between backward calls."""

    __slots__ = ("name",)

    def __init__(self, value, name: str):
        super().__init__(value, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape})"


def _lift(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def constant(value) -> Tensor:
    """Wrap an array as a non-differentiable leaf."""
    return Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the parent's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accumulate(parent: Tensor, grad: np.ndarray) -> None:
    if not parent.requires_grad:
        return
    grad = _unbroadcast(grad, parent.data.shape)
    if parent.grad is None:
        parent.grad = np.zeros(parent.data.shape, dtype=np.float64)
    parent.grad += grad


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad over the recorded graph.

    The loss must be a scalar. Gradients of Param leaves persist until
    explicitly zeroed; intermediate gradients are discarded with the graph.
    """
    if loss.data.ndim != 0:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, (a, b))

    def bwd(g: np.ndarray) -> None:
        _accumulate(a, g)
        _accumulate(b, g)

    out.backward_fn = bwd
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data, (a, b))

    def bwd(g: np.ndarray) -> None:
        _accumulate(a, g)
        _accumulate(b, -g)

    out.backward_fn = bwd
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    out = Tensor(a.data * b.data, (a, b))

    def bwd(g: np.ndarray) -> None:
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    out.backward_fn = bwd
    return out


def scale(a: Tensor, factor: float) -> Tensor:
    out = Tensor(a.data * factor, (a,))

    def bwd(g: np.ndarray) -> None:
        _accumulate(a, g * factor)

    out.backward_fn = bwd
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the trailing two axes, broadcasting the rest."""
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError(
            f"matmul needs rank >= 2 operands, got shapes {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError as exc:
        raise ContractError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc
    out = Tensor(data, (a, b))

    def bwd(g: np.ndarray) -> None:
        _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    out.backward_fn = bwd
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0), (a,))

    def bwd(g: np.ndarray) -> None:
        _accumulate(a, g * (a.data > 0.0))

    out.backward_fn = bwd
    return out


def absolute(a: Tensor) -> Tensor:
    """|x| with the sign subgradient, zero exactly at x == 0."""
    out = Tensor(np.abs(a.data), (a,))

    def bwd(g: np.ndarray) -> None:
        _accumulate(a, g * np.sign(a.data))

    out.backward_fn = bwd
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise NumericError("log() requires strictly positive input")
    out = Tensor(np.log(a.data), (a,))

    def bwd(g: np.ndarray) -> None:
        _accumulate(a, g / a.data)

    out.backward_fn = bwd
    return out


def tensor_sum(a: Tensor) -> Tensor:
    """Sum of all elements, returned as a scalar tensor."""
    out = Tensor(a.data.sum(), (a,))

    def bwd(g: np.ndarray) -> None:
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    out.backward_fn = bwd
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape), (a,))

    def bwd(g: np.ndarray) -> None:
        _accumulate(a, g.reshape(a.data.shape))

    out.backward_fn = bwd
    return out


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)), (a,))

    def bwd(g: np.ndarray) -> None:
        _accumulate(a, g.transpose(inverse))

    out.backward_fn = bwd
    return out


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise ContractError("concat needs at least one tensor")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), tuple(parts))
    sizes = [p.data.shape[axis] for p in parts]

    def bwd(g: np.ndarray) -> None:
        offsets = np.cumsum([0] + sizes)
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            _accumulate(part, g[tuple(index)])

    out.backward_fn = bwd
    return out


def gather_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows along the second-to-last axis: out[..., k, :] = a[..., idx[k], :]."""
    idx = np.asarray(indices, dtype=np.int64)
    if a.ndim < 2:
        raise ContractError(f"gather_rows needs rank >= 2, got shape {a.shape}")
    out = Tensor(np.take(a.data, idx, axis=-2), (a,))

    def bwd(g: np.ndarray) -> None:
        buf = np.zeros(a.data.shape, dtype=np.float64)
        moved = np.moveaxis(buf, -2, 0)
        np.add.at(moved, idx, np.moveaxis(g, -2, 0))
        _accumulate(a, buf)

    out.backward_fn = bwd
    return out


def scatter_rows(a: Tensor, indices: np.ndarray, size: int) -> Tensor:
    """Place rows at given positions along the second-to-last axis of a
    zero tensor with that axis expanded to `size`. Indices must be unique."""
    idx = np.asarray(indices, dtype=np.int64)
    if a.ndim < 2:
        raise ContractError(f"scatter_rows needs rank >= 2, got shape {a.shape}")
    if a.data.shape[-2] != idx.shape[0]:
        raise ContractError(
            f"scatter_rows got {idx.shape[0]} indices for {a.data.shape[-2]} rows"
        )
    shape = a.data.shape[:-2] + (size,) + a.data.shape[-1:]
    data = np.zeros(shape, dtype=np.float64)
    data[..., idx, :] = a.data
    out = Tensor(data, (a,))

    def bwd(g: np.ndarray) -> None:
        _accumulate(a, g[..., idx, :])

    out.backward_fn = bwd
    return out


# ---------------------------------------------------------------------------
# normalization ops
# ---------------------------------------------------------------------------


def softmax_rows(a: Tensor) -> Tensor:
    """Row softmax over the last axis, stabilized by max subtraction."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y, (a,))

    def bwd(g: np.ndarray) -> None:
        # d softmax: y * (g - <g, y>) per row
        inner = (g * y).sum(axis=-1, keepdims=True)
        _accumulate(a, y * (g - inner))

    out.backward_fn = bwd
    return out


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then apply
    the learnable elementwise affine. Variance is the population variance."""
    width = a.data.shape[-1]
    if gain.data.shape != (width,) or bias.data.shape != (width,):
        raise ContractError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match width {width}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat * gain.data + bias.data, (a, gain, bias))

    def bwd(g: np.ndarray) -> None:
        _accumulate(bias, g)
        _accumulate(gain, g * xhat)
        gx = g * gain.data
        term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        _accumulate(a, term * inv)

    out.backward_fn = bwd
    return out
