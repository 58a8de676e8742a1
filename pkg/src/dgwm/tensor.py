"""Dense tensors with reverse-mode differentiation.

Every operation on a :class:`Tensor` that needs a gradient records its
parents and a closure mapping the upstream gradient to one gradient per
parent.  :meth:`Tensor.backward` replays that record in reverse
topological order and accumulates into the ``grad`` buffer of each leaf
that has ``requires_grad`` set.

Only the operations the training pipeline needs are provided; the
broadcasting that ``add``/``mul`` accept is whatever numpy does, with the
gradient summed back down to the operand shape.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, DimensionError, NumericError

_grad_enabled = True
_check_finite = False


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Build no computation record inside the block (results are constants)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_finite_check(enabled: bool) -> bool:
    """Toggle the NaN/Inf guard on every op result. Returns the previous setting."""
    global _check_finite
    prev = _check_finite
    _check_finite = bool(enabled)
    return prev


@contextlib.contextmanager
def finite_check(enabled: bool = True) -> Iterator[None]:
    prev = set_finite_check(enabled)
    try:
        yield
    finally:
        set_finite_check(prev)


def _as_array(data) -> np.ndarray:
    if type(data) is np.ndarray and data.dtype.kind == "f":
        return data
    arr = np.asarray(data)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A real-valued array that can take part in a gradient computation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        if _check_finite and not np.all(np.isfinite(self.data)):
            raise NumericError("non-finite values in tensor")

    # -- bookkeeping -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, cut from the computation record."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    @staticmethod
    def _node(out: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        if type(out) is not np.ndarray or out.dtype.kind != "f" or _check_finite:
            t = Tensor(out)
        else:
            t = object.__new__(Tensor)
            t.data, t.grad, t.requires_grad, t._parents, t._backward = out, None, False, (), None
        if _grad_enabled:
            for p in parents:
                if p.requires_grad:
                    t.requires_grad = True
                    t._parents = tuple(parents)
                    t._backward = backward
                    break
        return t

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = _lift(other)
        a_shape, b_shape = self.shape, other.shape
        try:
            out = self.data + other.data
        except ValueError as exc:
            raise DimensionError(f"cannot add shapes {a_shape} and {b_shape}") from exc
        return Tensor._node(
            out, (self, other), lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape))
        )

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._node(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        return self + (-_lift(other))

    def __rsub__(self, other) -> "Tensor":
        return _lift(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = _lift(other)
        a, b = self.data, other.data
        try:
            out = a * b
        except ValueError as exc:
            raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
        return Tensor._node(
            out,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, scalar: float) -> "Tensor":
        if isinstance(scalar, Tensor):
            raise TypeError("division is only defined by a constant scalar")
        return self * (1.0 / scalar)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    # -- reshaping and indexing ------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError as exc:
            raise DimensionError(f"cannot reshape {src} to {shape}") from exc
        return Tensor._node(out, (self,), lambda g: (g.reshape(src),))

    @property
    def T(self) -> "Tensor":
        return Tensor._node(self.data.T, (self,), lambda g: (g.T,))

    def __getitem__(self, index) -> "Tensor":
        src = self.shape

        basic = isinstance(index, (int, np.integer, slice))

        def back(g):
            full = np.zeros(src, dtype=g.dtype)
            if basic:
                full[index] = g
            else:
                np.add.at(full, index, g)
            return (full,)

        return Tensor._node(self.data[index], (self,), back)

    # -- reductions ------------------------------------------------------
    def sum(self, axis=None) -> "Tensor":
        src = self.shape

        def back(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src).copy(),)

        return Tensor._node(np.sum(self.data, axis=axis), (self,), back)

    def mean(self, axis=None) -> "Tensor":
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    # -- elementwise nonlinearities -------------------------------------
    def relu(self) -> "Tensor":
        out = np.maximum(self.data, 0.0)
        return Tensor._node(out, (self,), lambda g: (g * (out > 0),))

    def sigmoid(self) -> "Tensor":
        s = _sigmoid(self.data)
        return Tensor._node(s, (self,), lambda g: (g * s * (1.0 - s),))

    def exp(self) -> "Tensor":
        e = np.exp(self.data)
        return Tensor._node(e, (self,), lambda g: (g * e,))

    def log_softmax(self, axis: int = -1) -> "Tensor":
        x = self.data
        shifted = x - np.max(x, axis=axis, keepdims=True)
        lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
        out = shifted - lse
        p = np.exp(out)
        return Tensor._node(
            out, (self,), lambda g: (g - p * np.sum(g, axis=axis, keepdims=True),)
        )

    # -- gradient --------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf.

        ``self`` must be a scalar unless an explicit upstream ``grad`` is given.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        # iterative post-order DFS over nodes that need a gradient
        order: list[Tensor] = []
        seen = {id(self)}
        stack = [(self, iter(self._parents))]
        while stack:
            node, it = stack[-1]
            for p in it:
                if p.requires_grad and id(p) not in seen:
                    seen.add(id(p))
                    stack.append((p, iter(p._parents)))
                    break
            else:
                stack.pop()
                order.append(node)

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 1-D/2-D operands."""
    a, b = _lift(a), _lift(b)
    A, B = a.data, b.data
    if A.ndim not in (1, 2) or B.ndim not in (1, 2):
        raise DimensionError("matmul supports 1-D and 2-D operands only")
    if A.shape[-1] != B.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {A.shape} @ {B.shape}")
    out = A @ B

    def back(g):
        if A.ndim == 2 and B.ndim == 2:
            return g @ B.T, A.T @ g
        if A.ndim == 1 and B.ndim == 2:
            return B @ g, np.outer(A, g)
        if A.ndim == 2:
            return np.outer(g, B), A.T @ g
        return g * B, g * A

    return Tensor._node(out, (a, b), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor, relu: bool = False) -> Tensor:
    """``x @ weight + bias`` (optionally ReLU'd) recorded as a single node.

    ``x`` is (in,) or (n, in); ``weight`` is (in, out); ``bias`` is (out,).
    """
    X, Wt, b = x.data, weight.data, bias.data
    if X.shape[-1] != Wt.shape[0]:
        raise DimensionError(f"expected width {Wt.shape[0]}, got {X.shape[-1]}")
    out = X @ Wt
    out += b
    if relu:
        np.maximum(out, 0.0, out=out)
        active = out > 0

    def back(g):
        if relu:
            g = g * active
        if X.ndim == 1:
            return g @ Wt.T, np.outer(X, g), g
        return g @ Wt.T, X.T @ g, g.sum(axis=0)

    return Tensor._node(out, (x, weight, bias), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor._node(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def sigmoid(x) -> Tensor:
    return _lift(x).sigmoid()


def relu(x) -> Tensor:
    return _lift(x).relu()


def softmax(x, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``; raises NumericError on NaN input."""
    x = _lift(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax of NaN input")
    return x.log_softmax(axis=axis).exp()


def cross_entropy(logits, target, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of ``target`` under softmax(``logits``).

    ``logits`` is ``(C,)`` with an integer target, or ``(n, C)`` with ``n``
    targets; ``reduction`` is ``"mean"``, ``"sum"`` or ``"none"``.
    """
    logits = _lift(logits)
    z = logits.data
    single = z.ndim == 1
    Z = z[None, :] if single else z
    t = np.atleast_1d(np.asarray(target))
    if not np.issubdtype(t.dtype, np.integer):
        raise IndexError("class targets must be integers")
    C = Z.shape[1]
    if t.shape[0] != Z.shape[0]:
        raise DimensionError(f"{Z.shape[0]} logit rows but {t.shape[0]} targets")
    if np.any(t < 0) or np.any(t >= C):
        raise IndexError(f"target out of range [0, {C})")
    rows = np.arange(Z.shape[0])
    shifted = Z - Z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    losses = -logp[rows, t]
    p = np.exp(logp)
    p[rows, t] -= 1.0  # d(loss_i)/d(z_i) = softmax - onehot

    if reduction == "none":
        out = losses[0] if single else losses
        scale = None
    elif reduction == "sum":
        out, scale = losses.sum(), 1.0
    elif reduction == "mean":
        out, scale = losses.mean(), 1.0 / Z.shape[0]
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def back(g):
        if scale is None:
            gz = p * np.reshape(g, (-1, 1))
        else:
            gz = p * (g * scale)
        return (gz[0] if single else gz,)

    return Tensor._node(np.asarray(out), (logits,), back)


def entropy(logits, axis: int = -1) -> Tensor:
    """Shannon entropy (nats) of softmax(``logits``) along ``axis``."""
    logp = _lift(logits).log_softmax(axis=axis)
    return -(logp.exp() * logp).sum(axis=axis)
