"""Dense tensors with tape-based reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array (float32 unless asked otherwise) and,
when it was produced by a differentiable op, a closure that maps the gradient
of its output to gradients of its parents.  :func:`backward` walks the graph
in reverse topological order and accumulates gradients into leaves.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """n-dimensional array node of the autodiff graph.

    Parameters
    ----------
    data : array_like
        Values, stored row-major.  Converted to ``dtype`` (float32 by default).
    requires_grad : bool
        Mark as a trainable leaf; ``backward`` fills ``.grad`` for such leaves.
    dtype : numpy dtype, optional
        float32 or float64.  float64 exists for gradient checking.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        dtype = np.float32 if dtype is None else np.dtype(dtype)
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = ""
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._backward = backward if needs else None
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- arithmetic (same-shape or scalar operands only) ------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _raise_item(shape):
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and b.size != 1 and a.size != 1:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no general broadcasting)")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    # scalar operand
    return np.asarray(grad.sum(dtype=np.float64), dtype=grad.dtype).reshape(shape)


# -- elementwise ops ------------------------------------------------------
def add(a, b) -> Tensor:
    a = _as_tensor(a, None if not isinstance(b, Tensor) else b.dtype)
    b = _as_tensor(b, a.dtype)
    _check_same_shape(a, b, "add")
    out = (a.data + b.data).astype(a.dtype, copy=False)
    sa, sb = a.shape, b.shape

    def _bw(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return Tensor._from_op(out, (a, b), _bw)


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, None if not isinstance(b, Tensor) else b.dtype)
    b = _as_tensor(b, a.dtype)
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    out = (ad * bd).astype(a.dtype, copy=False)

    def _bw(g):
        return _reduce_to(g * bd, ad.shape).astype(ad.dtype, copy=False), _reduce_to(g * ad, bd.shape).astype(
            bd.dtype, copy=False
        )

    return Tensor._from_op(out, (a, b), _bw)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype)
    shape, dtype = a.shape, a.dtype

    def _bw(g):
        return (np.full(shape, g, dtype=dtype),)

    return Tensor._from_op(out, (a,), _bw)


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    out = np.asarray(a.data.mean(dtype=np.float64), dtype=a.dtype)
    shape, dtype = a.shape, a.dtype

    def _bw(g):
        return (np.full(shape, g / n, dtype=dtype),)

    return Tensor._from_op(out, (a,), _bw)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    out = a.data.reshape(shape)
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(src),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def _bw(g):
        return g @ bd.T, ad.T @ g

    return Tensor._from_op(out, (a, b), _bw)


def custom_grad(
    x: Tensor,
    forward_fn: Callable[[np.ndarray], np.ndarray],
    backward_fn: Callable[[np.ndarray], np.ndarray],
) -> Tensor:
    """Elementwise op with an injected derivative.

    The output value is ``forward_fn(x)``.  During the backward pass the
    incoming gradient is multiplied elementwise by ``backward_fn(x)``, where
    ``x`` is the saved input, whatever the true derivative of ``forward_fn``.
    """
    saved = x.data
    out = np.asarray(forward_fn(saved), dtype=x.dtype)
    if out.shape != saved.shape:
        raise ValueError("custom_grad: forward_fn must be elementwise")

    def _bw(g):
        d = np.asarray(backward_fn(saved))
        return ((g * d).astype(g.dtype, copy=False),)

    return Tensor._from_op(out, (x,), _bw)


# -- graph traversal -------------------------------------------------------
def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every trainable leaf."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
